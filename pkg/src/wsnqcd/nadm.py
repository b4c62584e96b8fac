"""Network-aware detection: the per-slot posterior on ``[Q_k, Pi_k]``.

``Pi_k`` is the posterior of ``{T <= k}``; ``Psi_k`` is the posterior of
a change at or before the sampling instant of the batch in service,
``Delta_k`` slots back.  Updates are done on ``Psi`` and mapped to
``Pi`` with the prior drift over the ``Delta`` gap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as kern
from .change_model import ObservationModel, batch_change_prob, log_likelihood_ratio
from .network import E1, E2, E3, NetConfig, QueueState, SlotOutcome, initial_state, require_stable
from .streams import ObservationStream, episode_streams

PSI_FLOOR = kern.PSI_FLOOR


class HorizonExceededError(RuntimeError):
    """The detector did not stop within the configured slot budget."""


class PosteriorDomainError(ValueError):
    """``Pi`` lies below the prior floor reachable after ``Delta`` slots."""


class UpdateMismatchError(ValueError):
    """A slot outcome does not fit the queue state it is applied to."""


def psi_to_pi(psi: float, delta: int, p: float) -> float:
    """``Pi = 1 - (1 - Psi)(1 - p)^delta``."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    return kern.psi_to_pi(float(psi), int(delta), float(p))


def pi_to_psi(pi: float, delta: int, p: float, tol: float = 1e-12) -> float:
    """Inverse of :func:`psi_to_pi` on the reachable region."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0:
        return float(pi)
    stay = math.exp(delta * math.log1p(-p))
    psi = 1.0 - (1.0 - pi) / stay
    if psi < -tol:
        raise PosteriorDomainError(
            f"pi={pi} is below the floor {1 - stay} implied by delta={delta}, p={p}")
    return min(max(psi, 0.0), 1.0)


@dataclass(frozen=True)
class SufficientStat:
    queue: QueueState
    pi: float
    stopped: bool = False


@dataclass(frozen=True)
class NadmEpisode:
    T: int
    tau: int
    false_alarm: bool
    delay: int


def _delivered_llrs(outcome: SlotOutcome, model: ObservationModel, batch: int):
    cur = [x for (_, b, x) in outcome.delivered if b == batch]
    nxt = [x for (_, b, x) in outcome.delivered if b == batch + 1]
    if len(cur) + len(nxt) != len(outcome.delivered):
        raise UpdateMismatchError(f"delivery from unexpected batch while batch {batch} in service")
    return [float(log_likelihood_ratio(model, x)) for x in cur], [float(log_likelihood_ratio(model, x)) for x in nxt]


def update(stat: SufficientStat, outcome: SlotOutcome, next_queue: QueueState,
           model: ObservationModel, p: float, p_r: float, cfg: NetConfig | None = None) -> SufficientStat:
    """One-slot posterior update.

    ``p_r`` is accepted for interface symmetry; the completion case
    recomputes the inter-sample hazard from ``Delta`` so that a drained
    system does not over-count prior drift.
    """
    if stat.stopped:
        return stat
    q = stat.queue
    period = cfg.period if cfg is not None else None
    if next_queue.slot != q.slot + 1:
        raise UpdateMismatchError("next_queue is not the successor slot")
    cur, nxt = _delivered_llrs(outcome, model, q.batch)
    ev = outcome.event
    if ev == E1:
        if outcome.delivered:
            raise UpdateMismatchError("no-delivery event carries samples")
        if next_queue.batch != q.batch:
            raise UpdateMismatchError("batch advanced without a completion")
        return SufficientStat(next_queue, stat.pi + (1.0 - stat.pi) * p)
    psi = pi_to_psi(stat.pi, q.delta, p)
    if ev == E2:
        if len(cur) != 1 or nxt or next_queue.delta != q.delta + 1 or next_queue.batch != q.batch:
            raise UpdateMismatchError("partial delivery inconsistent with queue state")
        psi2 = kern.bayes_step(psi, cur[0])
    elif ev == E3:
        if len(cur) != 1 or next_queue.batch != q.batch + 1:
            raise UpdateMismatchError("batch completion inconsistent with queue state")
        if len(nxt) != sum(1 for w in q.seq_queue if w > 0):
            raise UpdateMismatchError("wrong number of head-of-line samples released")
        if period is None:
            period = _period_from(p, p_r)
        psi2 = kern.completion_step(psi, cur[0], math.fsum(nxt), q.delta, period, p)
    else:
        raise UpdateMismatchError(f"unknown event {ev}")
    return SufficientStat(next_queue, psi_to_pi(psi2, next_queue.delta, p))


def _period_from(p: float, p_r: float) -> int:
    # recover the period from the batch hazard when no config is supplied
    period = round(math.log1p(-p_r) / math.log1p(-p))
    if period < 1:
        raise UpdateMismatchError("cannot infer period from p_r")
    return period


def initial_stat(cfg: NetConfig, rho: float) -> SufficientStat:
    return SufficientStat(initial_state(cfg), float(rho))


def _require_horizon(k, horizon):
    raise HorizonExceededError(f"no alarm within {horizon} slots (reached slot {k})")


class _Engine:
    """Resumable wrapper around the compiled joint recursion."""

    def __init__(self, scn, streams, chunk=4096):
        net = scn.net
        self.scn = scn
        self.T = int(_change_time(scn, streams))
        est = max(64, (self.T + 4 * net.period + 512) // net.period + 4)
        self.obs = ObservationStream(scn.obs, net.n_sensors, net.period, self.T, streams.obs, est)
        self.net_rng = streams.net
        self.chunk = chunk
        self.st = np.array([0, net.period, 1, 0], dtype=np.int64)
        self.W = np.zeros(net.n_sensors, np.int64)
        self.R = np.zeros(net.n_sensors, np.int64)
        self.f = np.array([scn.change.rho, -np.inf])
        self.u = self.net_rng.random((chunk, 2))
        self.j = 0

    def run(self, gamma, calibrate, pi_out=None, ev_out=None):
        net, scn = self.scn.net, self.scn
        empty_f = np.empty(0)
        empty_i = np.empty(0, np.int64)
        while True:
            status, self.j = kern.nadm_run(
                self.st, self.W, self.R, self.f, net.period, net.n_sensors, net.sigma,
                scn.change.p, self.obs.llr, self.u, self.j, self.T, gamma, calibrate,
                scn.horizon_cap, empty_f if pi_out is None else pi_out,
                empty_i if ev_out is None else ev_out)
            if status == kern.DONE:
                return
            if status == kern.NEED_UNIFORMS:
                self.u = self.net_rng.random((self.chunk, 2))
                self.j = 0
            elif status == kern.NEED_OBS:
                self.obs.grow()
            else:
                _require_horizon(int(self.st[0]), scn.horizon_cap)


def _change_time(scn, streams):
    from .change_model import sample_change_time
    return sample_change_time(scn.change, streams.change)


def _as_streams(rng):
    if hasattr(rng, "obs"):
        return rng
    from .streams import EpisodeStreams
    c, o, n = rng.spawn(3)
    return EpisodeStreams(c, o, n)


def run_episode(scn, gamma: float, rng) -> NadmEpisode:
    """Run the threshold rule ``tau = inf{k : Pi_k >= gamma}`` once.

    ``rng`` is either an :class:`EpisodeStreams` or a Generator from
    which the three streams are spawned.
    """
    if not scn.allow_unstable:
        require_stable(scn.net)
    streams = _as_streams(rng)
    if scn.change.rho >= gamma:
        T = _change_time(scn, streams)
        return NadmEpisode(T, 0, 0 < T, 0)
    eng = _Engine(scn, streams)
    eng.run(gamma, False)
    tau = int(eng.st[0])
    T = eng.T
    return NadmEpisode(T, tau, tau < T, max(tau - T, 0))


def pre_change_max(scn, rng) -> tuple:
    """``(T, max_{k<T} Pi_k)``; the max is ``-inf`` when ``T = 0``."""
    streams = _as_streams(rng)
    eng = _Engine(scn, streams)
    if eng.T == 0:
        return 0, -math.inf
    eng.run(2.0, True)
    return eng.T, float(eng.f[1])


@dataclass
class NadmTrace:
    T: int
    pi: np.ndarray
    events: np.ndarray
    psi: np.ndarray
    delta: np.ndarray
    queues: list | None = None


def trace(scn, slots: int, rng, record_queues: bool = False) -> NadmTrace:
    """Record ``Pi_k`` for ``k = 0..slots`` without stopping.

    Uses the pure-Python reference path so that the queue state and the
    event class of every slot are available.
    """
    from .network import NetworkSimulator

    streams = _as_streams(rng)
    T = _change_time(scn, streams)
    obs = ObservationStream(scn.obs, scn.net.n_sensors, scn.net.period, T, streams.obs)
    sim = NetworkSimulator(scn.net, streams.net, values=obs.value, check=False)
    p = scn.change.p
    p_r = batch_change_prob(p, scn.net.period)
    stat = initial_stat(scn.net, scn.change.rho)
    pis = np.empty(slots + 1)
    psis = np.empty(slots + 1)
    deltas = np.empty(slots + 1, np.int64)
    evs = np.zeros(slots, np.int8)
    queues = [] if record_queues else None
    for k in range(slots + 1):
        pis[k] = stat.pi
        deltas[k] = stat.queue.delta
        psis[k] = pi_to_psi(stat.pi, stat.queue.delta, p)
        if record_queues:
            queues.append(stat.queue)
        if k == slots:
            break
        _, _, out = sim.step()
        evs[k] = out.event
        stat = update(stat, out, sim.state, scn.obs, p, p_r, scn.net)
    return NadmTrace(T, pis, evs, psis, deltas, queues)


def kernel_trace(scn, slots: int, rng):
    """Same as :func:`trace` but through the compiled engine.

    Returns ``(T, pi, events)`` with ``pi`` of length ``slots + 1``.
    """
    from dataclasses import replace

    eng = _Engine(replace(scn, horizon_cap=int(slots)), _as_streams(rng))
    pi = np.full(slots + 1, np.nan)
    ev = np.zeros(slots, np.int64)
    try:
        eng.run(2.0, False, pi, ev)
    except HorizonExceededError:
        pass
    return eng.T, pi, ev


@dataclass(frozen=True)
class ConsistencyBucket:
    lo: float
    hi: float
    visits: int
    episodes: int
    mean_psi: float
    freq: float
    ci_half: float

    @property
    def consistent(self) -> bool:
        # tiny absolute slack: the certain bucket has zero sampling spread
        return abs(self.freq - self.mean_psi) <= self.ci_half + 1e-9


def verify_sufficient_stat_consistency(scn, episodes: int, slots: int, seed: int,
                                       edges=None, tag: int = 4) -> list:
    """Calibration check of ``Psi`` against the ground-truth change time.

    For each slot the event ``{theta at the in-service sampling instant = 1}``
    is compared with ``Psi_k``, grouped by ``Psi`` bucket.  Visits within an
    episode are correlated, so the CI is built from per-episode cluster
    sums (ratio estimator with a delta-method variance).
    """
    if edges is None:
        edges = np.array([0.0, 0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95, 1.0 - 1e-12, 1.0 + 1e-12])
    nb = len(edges) - 1
    hits = np.zeros((episodes, nb))
    cnt = np.zeros((episodes, nb))
    psum = np.zeros((episodes, nb))
    for e in range(episodes):
        tr = trace(scn, slots, episode_streams(seed, tag, e))
        k = np.arange(slots + 1)
        anchor = k - tr.delta          # slot whose state Psi_k describes
        truth = (anchor >= tr.T).astype(float)
        idx = np.clip(np.searchsorted(edges, tr.psi, side="right") - 1, 0, nb - 1)
        np.add.at(cnt[e], idx, 1.0)
        np.add.at(hits[e], idx, truth)
        np.add.at(psum[e], idx, tr.psi)
    out = []
    for b in range(nb):
        c = cnt[:, b]
        n = c.sum()
        if n == 0:
            continue
        f = hits[:, b].sum() / n
        mp = psum[:, b].sum() / n
        used = c > 0
        m = used.sum()
        # cluster-robust standard error of a ratio of sums
        resid = hits[used, b] - f * c[used]
        se = math.sqrt((resid ** 2).sum() * m / max(m - 1, 1)) / n if m > 1 else 0.0
        resid_p = psum[used, b] - mp * c[used]
        se_p = math.sqrt((resid_p ** 2).sum() * m / max(m - 1, 1)) / n if m > 1 else 0.0
        half = 1.96 * math.hypot(se, se_p)
        out.append(ConsistencyBucket(edges[b], edges[b + 1], int(n), int(m), mp, f, half))
    return out
