"""Fork-join random-access network: sensor FIFOs, GPS success process
and the fusion-centre sequencer.

The observable queue state is ``Q_k = [lambda, B, Delta, W, R]``.  We
also carry the global slot index ``k``: at ``k = 0`` and at ``k = period``
the five state coordinates coincide, yet the sensor queues are empty in
the first case and hold a fresh sample in the second.

Embedding used throughout: a batch is forked into every sensor queue at
the start of its sampling slot, contends in that same slot, and a
successful packet reaches the fusion centre at the start of the next
slot.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

E1, E2, E3 = 1, 2, 3


class StateCorruptionError(RuntimeError):
    """A queue state violated the L/W/Delta conservation law."""


class UnstableNetworkError(ValueError):
    """Requested sampling load is at or beyond the service capacity.

    With ``sigma <= N / period`` the batch sojourn time is not a proper
    random variable with finite mean, so no stationary delay exists.
    """


@dataclass(frozen=True)
class NetConfig:
    n_sensors: int
    period: int
    sigma: float

    def __post_init__(self):
        if int(self.n_sensors) != self.n_sensors or self.n_sensors < 1:
            raise ValueError(f"n_sensors must be a positive integer, got {self.n_sensors}")
        if int(self.period) != self.period or self.period < 1:
            raise ValueError(f"period must be a positive integer, got {self.period}")
        if not (0.0 < self.sigma < 1.0):
            raise ValueError(f"sigma must lie in (0, 1), got {self.sigma}")

    @property
    def rate(self) -> float:
        return 1.0 / self.period


@dataclass(frozen=True)
class QueueState:
    lam: int
    batch: int
    delta: int
    seq_queue: tuple
    received: tuple
    slot: int = 0


@dataclass(frozen=True)
class SlotOutcome:
    success_node: int
    delivered: tuple = ()
    batch_completed: bool = False
    event: int = E1


@dataclass
class SensorBuffers:
    sensor: list = field(default_factory=list)
    sequencer: list = field(default_factory=list)

    @classmethod
    def empty(cls, n: int) -> "SensorBuffers":
        return cls([deque() for _ in range(n)], [deque() for _ in range(n)])

    def copy(self) -> "SensorBuffers":
        return SensorBuffers([deque(q) for q in self.sensor], [deque(q) for q in self.sequencer])


def initial_state(cfg: NetConfig) -> QueueState:
    n = cfg.n_sensors
    return QueueState(cfg.period, 1, 0, (0,) * n, (0,) * n, 0)


def is_fresh(state: QueueState, cfg: NetConfig) -> bool:
    return state.delta == 0 and state.lam == cfg.period and state.slot > 0


def sensor_queue_lengths(state: QueueState, cfg: NetConfig) -> list:
    n = cfg.n_sensors
    if state.delta > 0:
        base = state.delta // cfg.period + 1
        out = [base - state.received[i] - state.seq_queue[i] for i in range(n)]
        bad = [i for i, v in enumerate(out) if v < 0]
        if bad:
            raise StateCorruptionError(f"negative sensor queue at nodes {bad}: {state}")
        return out
    if is_fresh(state, cfg):
        return [1] * n
    return [0] * n


def num_contending(state: QueueState, cfg: NetConfig) -> int:
    return sum(1 for v in sensor_queue_lengths(state, cfg) if v > 0)


def draw_success_from_uniforms(lengths, sigma: float, u0: float, u1: float) -> int:
    """Map two uniforms to ``M_k`` (1-based node id, 0 for no success)."""
    nonempty = [i for i, v in enumerate(lengths) if v > 0]
    if not nonempty or u0 >= sigma:
        return 0
    return nonempty[int(u1 * len(nonempty))] + 1


def draw_success(state: QueueState, cfg: NetConfig, rng: np.random.Generator) -> int:
    u0, u1 = rng.random(2)
    return draw_success_from_uniforms(sensor_queue_lengths(state, cfg), cfg.sigma, u0, u1)


def classify(state: QueueState, m: int, n: int) -> int:
    if m == 0 or state.received[m - 1] == 1:
        return E1
    return E2 if sum(state.received) < n - 1 else E3


def next_queue_state(state: QueueState, m: int, cfg: NetConfig) -> tuple:
    """Pure transition ``Q_{k+1} = phi_Q(Q_k, M_k)``; returns ``(Q', event)``."""
    P, n = cfg.period, cfg.n_sensors
    lam = state.lam - 1 if state.lam > 1 else P
    outstanding = state.delta > 0 or is_fresh(state, cfg)
    ev = classify(state, m, n)
    W = list(state.seq_queue)
    R = list(state.received)
    batch, delta = state.batch, state.delta
    if ev == E1:
        if m:
            W[m - 1] += 1
        delta = delta + 1 if outstanding else 0
    elif ev == E2:
        R[m - 1] = 1
        delta += 1
    else:
        R = [1 if w > 0 else 0 for w in W]
        W = [max(w - 1, 0) for w in W]
        batch += 1
        # the next batch may not have been sampled yet: clamp to 0
        delta = max(delta + 1 - P, 0)
    return QueueState(lam, batch, delta, tuple(W), tuple(R), state.slot + 1), ev


def check_conservation(state: QueueState, cfg: NetConfig) -> None:
    """Raise if the state violates any structural invariant."""
    P = cfg.period
    if state.lam != P - (state.slot % P):
        raise StateCorruptionError(f"lambda {state.lam} inconsistent with slot {state.slot}")
    if state.delta < 0 or state.batch < 1:
        raise StateCorruptionError(f"bad batch/delta: {state}")
    if state.delta == 0 and (any(state.seq_queue) or any(state.received)):
        raise StateCorruptionError(f"sequencer or R nonempty with delta=0: {state}")
    for w, r in zip(state.seq_queue, state.received):
        if w < 0 or r not in (0, 1) or (r == 0 and w > 0):
            raise StateCorruptionError(f"W/R inconsistent: {state}")
    if state.delta > 0 and state.slot - state.delta != state.batch * P:
        raise StateCorruptionError(f"delta does not match batch sampling instant: {state}")
    if state.delta == 0 and state.slot > state.batch * P:
        raise StateCorruptionError(f"batch {state.batch} overdue with delta=0: {state}")
    if state.delta == 0 and state.slot < (state.batch - 1) * P + 1 and state.slot > 0:
        raise StateCorruptionError(f"batch {state.batch - 1} completed before it was sampled: {state}")
    sensor_queue_lengths(state, cfg)


def advance(state: QueueState, buffers: SensorBuffers, m: int, cfg: NetConfig,
            values=None, check: bool = True):
    """Apply one slot with success index ``m`` to state and buffers.

    ``values(batch, node)`` supplies the sample carried by each packet;
    when omitted packets carry ``nan``.  Returns ``(state', buffers',
    outcome)``; ``buffers`` is updated in place.
    """
    n = cfg.n_sensors
    lengths = sensor_queue_lengths(state, cfg)
    if m and lengths[m - 1] <= 0:
        raise StateCorruptionError(f"node {m} succeeded with an empty queue at {state}")
    new, ev = next_queue_state(state, m, cfg)
    delivered = []
    if m:
        b, x = buffers.sensor[m - 1].popleft()
        j = m - 1
        if ev == E1:
            buffers.sequencer[j].append((b, x))
        else:
            if b != state.batch:
                raise StateCorruptionError(f"node {m} delivered batch {b} while {state.batch} in service")
            delivered.append((j, b, x))
            if ev == E3:
                for i in range(n):
                    if buffers.sequencer[i]:
                        bb, xx = buffers.sequencer[i].popleft()
                        if bb != state.batch + 1:
                            raise StateCorruptionError(f"sequencer released batch {bb} out of order")
                        delivered.append((i, bb, xx))
    # fork the next batch at the start of slot k+1
    if new.lam == cfg.period:
        b_new = new.slot // cfg.period
        for i in range(n):
            x = values(b_new, i) if values is not None else math.nan
            buffers.sensor[i].append((b_new, x))
    if check:
        check_conservation(new, cfg)
        got = [len(q) for q in buffers.sensor]
        want = sensor_queue_lengths(new, cfg)
        if got != want:
            raise StateCorruptionError(f"buffer lengths {got} disagree with state-derived {want}")
        if [len(q) for q in buffers.sequencer] != list(new.seq_queue):
            raise StateCorruptionError("sequencer lengths disagree with W")
    out = SlotOutcome(m, tuple(delivered), ev == E3, ev)
    return new, buffers, out


def stability_margin(cfg: NetConfig) -> float:
    return cfg.sigma - cfg.n_sensors / cfg.period


def require_stable(cfg: NetConfig) -> None:
    margin = stability_margin(cfg)
    if margin <= 0:
        raise UnstableNetworkError(
            f"sampling load N/period = {cfg.n_sensors}/{cfg.period} = "
            f"{cfg.n_sensors / cfg.period:.5f} is not below the success rate sigma = {cfg.sigma}; "
            f"stability needs sigma - N/period > 0 (margin {margin:+.5f}), otherwise batch delays grow without bound"
        )


class NetworkSimulator:
    """Step-by-step reference simulator carrying actual packets.

    Slow but explicit; the Monte Carlo paths use the compiled kernels in
    ``_kernels`` which implement the same transition.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator, values=None, check: bool = True):
        self.cfg = cfg
        self.rng = rng
        self.values = values
        self.check = check
        self.state = initial_state(cfg)
        self.buffers = SensorBuffers.empty(cfg.n_sensors)
        self.generated = 0
        self.delivered_count = 0
        self.completion_slots = {}

    def step(self):
        cfg = self.cfg
        u0, u1 = self.rng.random(2)
        lengths = sensor_queue_lengths(self.state, cfg)
        m = draw_success_from_uniforms(lengths, cfg.sigma, u0, u1)
        prev = self.state
        self.state, self.buffers, out = advance(prev, self.buffers, m, cfg, self.values, self.check)
        if self.state.lam == cfg.period:
            self.generated += cfg.n_sensors
        self.delivered_count += len(out.delivered)
        if out.batch_completed:
            self.completion_slots[prev.batch] = self.state.slot
        return prev, lengths, out

    def backlog(self) -> int:
        return sum(len(q) for q in self.buffers.sensor) + sum(len(q) for q in self.buffers.sequencer)

    def run(self, slots: int):
        for _ in range(slots):
            yield self.step()


TRACE_VERSION = 1


def write_trace(path, cfg: NetConfig, rows: Iterable) -> None:
    """Per-slot CSV: k, lambda, batch, delta, W_i, R_i, L_i, M_k, delivered count.

    ``rows`` yields ``(state, lengths, outcome)`` as produced by
    ``NetworkSimulator.step``.
    """
    n = cfg.n_sensors
    header = (["k", "lambda", "batch", "delta"] + [f"W{i + 1}" for i in range(n)]
              + [f"R{i + 1}" for i in range(n)] + [f"L{i + 1}" for i in range(n)]
              + ["M", "delivered"])
    with open(path, "w", newline="") as fh:
        fh.write(f"# wsnqcd trace v{TRACE_VERSION} N={n} period={cfg.period} sigma={cfg.sigma}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for st, lengths, out in rows:
            w.writerow([st.slot, st.lam, st.batch, st.delta, *st.seq_queue, *st.received,
                        *lengths, out.success_node, len(out.delivered)])


@dataclass(frozen=True)
class SojournEstimate:
    mean: float
    ci_half: float
    batches: int
    replications: int


def _run_queue(cfg: NetConfig, rng: np.random.Generator, n_batches: int, backlog_slots: int = 0,
               chunk: int = 8192):
    """Drive the compiled network until ``n_batches`` have completed.

    Returns completion slots indexed by batch and, optionally, the backlog
    over the first ``backlog_slots`` slots.
    """
    from . import _kernels as kern

    st = np.array([0, cfg.period, 1, 0], dtype=np.int64)
    W = np.zeros(cfg.n_sensors, np.int64)
    R = np.zeros(cfg.n_sensors, np.int64)
    cb = np.zeros(n_batches, np.int64)
    cs = np.zeros(n_batches, np.int64)
    ncomp = 0
    bl = np.zeros(backlog_slots, np.int64)
    done_slots = 0
    while ncomp < n_batches or done_slots < backlog_slots:
        u = rng.random((chunk, 2))
        view = bl[done_slots:done_slots + chunk] if done_slots < backlog_slots else np.empty(0, np.int64)
        stop = n_batches if done_slots >= backlog_slots else np.iinfo(np.int64).max
        status, used, ncomp = kern.queue_run(st, W, R, cfg.period, cfg.n_sensors, cfg.sigma,
                                             u, 0, stop, cb, cs, ncomp, view)
        done_slots += used
    return cs[:ncomp], bl


def batch_sojourns(cfg: NetConfig, n_batches: int, rng: np.random.Generator) -> np.ndarray:
    """``D_b = U_b - t_b`` for batches ``1..n_batches`` from empty queues."""
    comp, _ = _run_queue(cfg, rng, n_batches)
    return comp - cfg.period * np.arange(1, n_batches + 1)


def estimate_batch_sojourn(cfg: NetConfig, episodes: int, warmup_batches: int,
                           rng: np.random.Generator, replications: int = 8) -> SojournEstimate:
    """Stationary mean batch sojourn ``d(r)`` with a 95% CI.

    ``replications`` independent runs each discard ``warmup_batches`` and
    then measure ``episodes // replications`` batches; the CI is a
    t-interval over the replication means.
    """
    require_stable(cfg)
    from scipy import stats

    per = max(1, episodes // replications)
    means = []
    for child in rng.spawn(replications):
        d = batch_sojourns(cfg, warmup_batches + per, child)[warmup_batches:]
        means.append(d.mean())
    means = np.asarray(means)
    half = stats.t.ppf(0.975, replications - 1) * means.std(ddof=1) / math.sqrt(replications) if replications > 1 else math.inf
    return SojournEstimate(float(means.mean()), float(half), per * replications, replications)


def backlog_series(cfg: NetConfig, slots: int, rng: np.random.Generator) -> np.ndarray:
    """Total packets in sensor queues plus sequencer at the start of each slot.

    Does not refuse unstable configurations: this is how instability is
    exhibited.
    """
    _, bl = _run_queue(cfg, rng, 0, slots)
    return bl
