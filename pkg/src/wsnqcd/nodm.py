"""Network-oblivious detection on complete batches.

The decision maker runs the Shiryaev recursion over batches as though
each had just been sampled.  The stopping batch therefore depends only on
the measurements; the network only decides *when* that batch arrives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import mpmath
import numpy as np

from . import _kernels as kern
from .change_model import ObservationModel, batch_change_prob, log_likelihood_ratio, sample_change_time
from .network import require_stable
from .nadm import HorizonExceededError, _as_streams
from .streams import ObservationStream


@dataclass(frozen=True)
class NodmState:
    pi: float
    batches_processed: int = 0


@dataclass(frozen=True)
class NodmEpisode:
    T: int
    K: int
    K_tilde: int
    T_tilde: int
    U_tilde: int
    false_alarm: bool

    @property
    def detection_delay(self) -> int:
        """``(U~ - T) 1{T~ >= T}``."""
        return 0 if self.false_alarm else self.U_tilde - self.T

    @property
    def decision_delay(self) -> int:
        """``(T~ - T) 1{T~ >= T}``."""
        return 0 if self.false_alarm else self.T_tilde - self.T

    @property
    def batch_excess(self) -> int:
        return max(self.K_tilde - self.K, 0)


def shiryaev_update(pi: float, batch, p_r: float, model: ObservationModel) -> float:
    """Predict over one period, then weigh in the batch likelihood."""
    llr = float(np.sum(log_likelihood_ratio(model, np.asarray(batch, dtype=float))))
    return kern.shiryaev_step(float(pi), llr, math.log1p(-p_r), float(p_r))


def first_batch_after(T: int, period: int) -> int:
    """``K = ceil(T / period)``: first batch sampled at or after the change."""
    return -(-int(T) // int(period))


def stopping_batch(llr_stream: ObservationStream, rho: float, p_r: float, gamma: float,
                   max_batches: int) -> int:
    """First ``b >= 0`` with ``pi_b >= gamma`` (``pi_0 = rho``)."""
    if rho >= gamma:
        return 0
    pi, b0 = float(rho), 0
    while True:
        kb, pi = kern.shiryaev_run(llr_stream.llr, b0, pi, p_r, gamma)
        if kb > 0:
            return int(kb)
        b0 = llr_stream.n_batches
        if b0 >= max_batches:
            raise HorizonExceededError(f"no alarm within {max_batches} batches")
        llr_stream.grow()


def batch_completion_slot(cfg_net, target_batch: int, net_rng: np.random.Generator,
                          horizon: int, chunk: int = 4096) -> int:
    """Slot ``U_b`` at which batch ``target_batch`` is fully delivered, from empty queues."""
    st = np.array([0, cfg_net.period, 1, 0], dtype=np.int64)
    W = np.zeros(cfg_net.n_sensors, np.int64)
    R = np.zeros(cfg_net.n_sensors, np.int64)
    cb = np.zeros(1, np.int64)
    cs = np.zeros(1, np.int64)
    empty = np.empty(0, np.int64)
    while True:
        u = net_rng.random((chunk, 2))
        # only the last completion matters; reuse a one-slot buffer
        status, _, _ = kern.queue_run(st, W, R, cfg_net.period, cfg_net.n_sensors, cfg_net.sigma,
                                      u, 0, target_batch, cb, cs, 0, empty)
        if status == kern.DONE:
            return int(st[0])
        if st[0] > horizon:
            raise HorizonExceededError(f"batch {target_batch} not delivered within {horizon} slots")


def run_episode(scn, gamma: float, rng) -> NodmEpisode:
    """One NODM episode: change point, stopping batch, then its delivery slot."""
    if not scn.allow_unstable:
        require_stable(scn.net)
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must lie in (0, 1]")
    streams = _as_streams(rng)
    net = scn.net
    P = net.period
    T = sample_change_time(scn.change, streams.change)
    K = first_batch_after(T, P)
    p_r = batch_change_prob(scn.change.p, P)
    obs = ObservationStream(scn.obs, net.n_sensors, P, T, streams.obs, K + 16)
    kt = stopping_batch(obs, scn.change.rho, p_r, gamma, scn.horizon_cap // P + 1)
    if kt == 0:
        return NodmEpisode(T, K, 0, 0, 0, K > 0)
    U = batch_completion_slot(net, kt, streams.net, scn.horizon_cap)
    return NodmEpisode(T, K, kt, kt * P, U, kt < K)


def run_episode_reference(scn, gamma: float, rng) -> NodmEpisode:
    """Slot-by-slot version driven by the packet-level simulator.

    Batches are released to the detector exactly when the sequencer
    completes them, so this exercises the whole pipeline; it must agree
    with :func:`run_episode` episode by episode.
    """
    from .network import NetworkSimulator

    streams = _as_streams(rng)
    net = scn.net
    P = net.period
    T = sample_change_time(scn.change, streams.change)
    K = first_batch_after(T, P)
    p_r = batch_change_prob(scn.change.p, P)
    if scn.change.rho >= gamma:
        return NodmEpisode(T, K, 0, 0, 0, K > 0)
    obs = ObservationStream(scn.obs, net.n_sensors, P, T, streams.obs, K + 16)
    sim = NetworkSimulator(net, streams.net, values=obs.value, check=False)
    pending = {}
    state = NodmState(scn.change.rho)
    while sim.state.slot < scn.horizon_cap:
        prev, _, out = sim.step()
        for node, b, x in out.delivered:
            pending.setdefault(b, {})[node] = x
        if out.batch_completed:
            b = prev.batch
            vals = [pending[b][i] for i in range(net.n_sensors)]
            del pending[b]
            state = NodmState(shiryaev_update(state.pi, vals, p_r, scn.obs), state.batches_processed + 1)
            if state.pi >= gamma:
                return NodmEpisode(T, K, b, b * P, sim.state.slot, b < K)
    raise HorizonExceededError(f"no alarm within {scn.horizon_cap} slots")


def pre_change_max(scn, rng) -> tuple:
    """``(T, max_{b <= K-1} pi_b)`` including ``pi_0 = rho``; ``-inf`` if ``K = 0``."""
    streams = _as_streams(rng)
    net = scn.net
    P = net.period
    T = sample_change_time(scn.change, streams.change)
    K = first_batch_after(T, P)
    if K == 0:
        return T, -math.inf
    obs = ObservationStream(scn.obs, net.n_sensors, P, T, streams.obs, K)
    path = np.empty(K)
    kern.shiryaev_path(obs.llr, K - 1, scn.change.rho, batch_change_prob(scn.change.p, P), path)
    return T, float(path.max())


def decision_episode(scn, gamma: float, rng) -> NodmEpisode:
    """Batch-level episode without a network (``U~ = T~``)."""
    streams = _as_streams(rng)
    P = scn.net.period
    T = sample_change_time(scn.change, streams.change)
    K = first_batch_after(T, P)
    p_r = batch_change_prob(scn.change.p, P)
    obs = ObservationStream(scn.obs, scn.net.n_sensors, P, T, streams.obs, K + 16)
    kt = stopping_batch(obs, scn.change.rho, p_r, gamma, scn.horizon_cap // P + 1)
    return NodmEpisode(T, K, kt, kt * P, kt * P, kt < K)


def l_of_r(p: float, period: int) -> float:
    """Mean coarse-sampling lag ``E[K*period - T | T >= 1]``.

    Closed form ``period - (1/p - period (1 - p_r) / p_r)``.  The two terms
    cancel to ~period/2 out of ~1/p, so it is evaluated at 50 digits.
    """
    if not (0.0 < p < 1.0):
        raise ValueError("p must lie in (0, 1)")
    if int(period) != period or period < 1:
        raise ValueError("period must be a positive integer")
    if period == 1:
        return 0.0
    with mpmath.workdps(50):
        pm = mpmath.mpf(p)
        stay = (1 - pm) ** int(period)
        pr = 1 - stay
        val = period - (1 / pm - period * stay / pr)
        return float(val)


def l_of_r_sum(p: float, period: int) -> float:
    """Defining sum ``sum_y y (1-p)^(period-y-1) p / p_r`` (used as an oracle)."""
    with mpmath.workdps(50):
        pm = mpmath.mpf(p)
        pr = 1 - (1 - pm) ** int(period)
        s = mpmath.fsum(y * (1 - pm) ** (period - y - 1) * pm for y in range(int(period)))
        return float(s / pr)


def asymptotic_decision_delay(alpha: float, n: int, kl: float, p_r: float) -> float:
    """``|ln alpha| / (N I + |ln(1 - p_r)|)`` in batches."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must lie in (0, 1)")
    if kl < 0:
        raise ValueError("kl must be nonnegative")
    return abs(math.log(alpha)) / (n * kl + abs(math.log1p(-p_r)))


@dataclass(frozen=True)
class Decomposition:
    lhs: float
    lhs_ci: float
    rhs: float
    rhs_ci: float
    diff: float
    diff_ci: float
    d_r: float
    l_r: float
    alpha_hat: float
    batch_excess: float
    network_part: float
    sampling_part: float
    decision_part: float

    @property
    def agrees(self) -> bool:
        return abs(self.diff) <= self.diff_ci


def decompose_detection_delay(episodes, d_r: float, l_r: float, alpha: float | None, rho: float,
                              period: int, d_r_ci: float = 0.0) -> Decomposition:
    """Empirical left side versus the assembled right side of the delay identity.

    ``lhs = mean (U~ - T) 1{T~ >= T}`` and
    ``rhs = (d + l)(1 - a) - rho l + period * mean (K~ - K)^+``.  With
    ``alpha=None`` the empirical false-alarm rate is used.  The CI of the
    difference pairs the two sample terms episode by episode and adds the
    ``d_r`` uncertainty in quadrature.
    """
    eps = list(episodes)
    n = len(eps)
    if n < 2:
        raise ValueError("need at least two episodes")
    det = np.array([e.detection_delay for e in eps], float)
    fa = np.array([e.false_alarm for e in eps], float)
    exc = np.array([e.batch_excess for e in eps], float)
    a_hat = fa.mean() if alpha is None else float(alpha)
    z = 1.96
    lhs = det.mean()
    lhs_ci = z * det.std(ddof=1) / math.sqrt(n)
    rhs_terms = period * exc - (d_r + l_r) * fa if alpha is None else period * exc
    base = (d_r + l_r) * (1.0 if alpha is None else 1.0 - a_hat) - rho * l_r
    rhs = base + rhs_terms.mean()
    rhs_ci = math.hypot(z * rhs_terms.std(ddof=1) / math.sqrt(n), d_r_ci * (1 - a_hat))
    dterm = det - rhs_terms
    diff = lhs - rhs
    diff_ci = math.hypot(z * dterm.std(ddof=1) / math.sqrt(n), d_r_ci * (1 - a_hat))
    return Decomposition(lhs, lhs_ci, rhs, rhs_ci, diff, diff_ci, d_r, l_r, a_hat,
                         exc.mean(), d_r * (1 - a_hat), l_r * (1 - a_hat) - rho * l_r,
                         period * exc.mean())
