"""Value iteration for the network-aware stopping problem at toy scale.

The state is ``[q, pi]`` with ``q`` the observable queue state (batch
index dropped, it does not affect costs or dynamics) and ``pi`` on a
uniform grid.  Observations are discretised onto a finite alphabet so the
Bayes updates inside the expectation are exact for the discrete model;
``J`` between grid points is linear interpolation.

This is a verification tool: it certifies that the optimal stopping set
is a threshold in ``pi`` for each ``q``.  Production detection uses the
heuristic constant threshold in :mod:`wsnqcd.nadm`.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse, stats

from .change_model import Family, ObservationModel
from .network import E1, E2, E3, NetConfig, QueueState, is_fresh, next_queue_state, sensor_queue_lengths

log = logging.getLogger(__name__)


class DPConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TinyScenario:
    n_sensors: int
    period: int
    sigma: float
    p: float
    obs: ObservationModel
    delta_cap: int = 12
    grid_points: int = 201
    obs_points: int = 41

    def __post_init__(self):
        if not (1 <= self.n_sensors <= 2):
            raise ValueError("tiny DP supports 1 or 2 sensors")
        if not (1 <= self.period <= 4):
            raise ValueError("tiny DP supports period <= 4")
        if not (0.0 < self.p < 1.0):
            raise ValueError("p must lie in (0, 1)")
        if self.delta_cap < self.period:
            raise ValueError("delta_cap must be at least one period")
        if self.grid_points < 3 or self.obs_points < 2:
            raise ValueError("grid too small")

    @property
    def net(self) -> NetConfig:
        return NetConfig(self.n_sensors, self.period, self.sigma)

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.grid_points)


@dataclass(frozen=True)
class StateKey:
    lam: int
    delta: int
    seq_queue: tuple
    received: tuple
    fresh: bool
    initial: bool = False

    def as_queue(self) -> QueueState:
        # slot only matters through is_fresh: 0 marks the pre-sampling start
        return QueueState(self.lam, 1, self.delta, self.seq_queue, self.received, 0 if self.initial else 1)


def _key(q: QueueState, cfg: NetConfig) -> StateKey:
    return StateKey(q.lam, q.delta, q.seq_queue, q.received, is_fresh(q, cfg), q.slot == 0)


def observation_alphabet(model: ObservationModel, points: int):
    """Support points and the two pmfs ``(y, w0, w1)`` of the discretised model."""
    lo = min(model.loc(0) - 6 * model.scale(0), model.loc(1) - 6 * model.scale(1))
    hi = max(model.loc(0) + 6 * model.scale(0), model.loc(1) + 6 * model.scale(1))
    y = np.linspace(lo, hi, points)
    dist = stats.norm if model.family is Family.GAUSSIAN else stats.laplace
    w = []
    for h in (0, 1):
        d = dist.pdf(y, loc=model.loc(h), scale=model.scale(h))
        w.append(d / d.sum())
    if model.uninformative:
        w[1] = w[0]
    return y, w[0], w[1]


def _cap(q: QueueState, cap: int, period: int) -> tuple:
    """Redirect an over-cap ``delta`` down by whole periods (keeps ``lam`` consistent)."""
    if q.delta <= cap:
        return q, False
    drop = -(-(q.delta - cap) // period) * period
    W = tuple(max(w - drop // period, 0) for w in q.seq_queue)
    return QueueState(q.lam, q.batch, q.delta - drop, W, q.received, q.slot), True


def enumerate_states(tiny: TinyScenario):
    """Reachable queue states from the empty start, with the cap applied."""
    cfg = tiny.net
    start = QueueState(cfg.period, 1, 0, (0,) * cfg.n_sensors, (0,) * cfg.n_sensors, 0)
    seen = {_key(start, cfg): start}
    order = [_key(start, cfg)]
    todo = deque([start])
    while todo:
        q = todo.popleft()
        for m in _possible_winners(q, cfg):
            nq, _ = next_queue_state(q, m, cfg)
            nq, _ = _cap(nq, tiny.delta_cap, cfg.period)
            nq = QueueState(nq.lam, 1, nq.delta, nq.seq_queue, nq.received, 1)
            k = _key(nq, cfg)
            if k not in seen:
                seen[k] = nq
                order.append(k)
                todo.append(nq)
    return order


def _possible_winners(q: QueueState, cfg: NetConfig):
    lengths = sensor_queue_lengths(q, cfg)
    nonempty = [i + 1 for i, v in enumerate(lengths) if v > 0]
    return [0] + nonempty if nonempty else [0]


@dataclass
class DPResult:
    tiny: TinyScenario
    cost: float
    states: list
    grid: np.ndarray
    value: np.ndarray
    stop: np.ndarray
    continuation: np.ndarray
    residuals: list
    redirected: int = 0
    thresholds: np.ndarray = field(default=None)

    def __post_init__(self):
        g = np.full(len(self.states), np.nan)
        for s in range(len(self.states)):
            idx = np.flatnonzero(self.stop[s])
            if idx.size:
                g[s] = self.grid[idx[0]]
        self.thresholds = g

    @property
    def is_upset(self) -> np.ndarray:
        """Per state: once stopping is optimal it stays optimal as ``pi`` grows."""
        return np.array([not np.any(row[:-1] & ~row[1:]) for row in self.stop])

    def reachable_floor(self, s: int) -> float:
        d = self.states[s].delta
        return -math.expm1(d * math.log1p(-self.tiny.p))

    def concavity_violation(self) -> float:
        """Largest positive second difference of ``J`` over the reachable part of each row."""
        worst = 0.0
        for s in range(len(self.states)):
            lo = np.searchsorted(self.grid, self.reachable_floor(s) - 1e-15)
            row = self.value[s, lo:]
            if row.size >= 3:
                worst = max(worst, float(np.max(row[2:] - 2 * row[1:-1] + row[:-2])))
        return worst

    def kappa_at_zero(self) -> np.ndarray:
        """Continuation cost at ``pi = 0``; bounded by ``1 - p`` in theory."""
        return self.continuation[:, 0]

    def write_csv(self, path) -> None:
        n = self.tiny.n_sensors
        with open(path, "w", newline="") as fh:
            fh.write("# wsnqcd dp-thresholds v1\n")
            w = csv.writer(fh)
            w.writerow(["lambda", "delta", *[f"W{i + 1}" for i in range(n)],
                        *[f"R{i + 1}" for i in range(n)], "fresh", "gamma", "upset"])
            up = self.is_upset
            for s, k in enumerate(self.states):
                w.writerow([k.lam, k.delta, *k.seq_queue, *k.received, int(k.fresh),
                            "" if np.isnan(self.thresholds[s]) else f"{self.thresholds[s]:.6g}", int(up[s])])


def _interp_cols(pi_next: np.ndarray, G: int):
    x = np.clip(pi_next, 0.0, 1.0) * (G - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), G - 2)
    frac = x - i0
    return i0, frac


def build_transitions(tiny: TinyScenario):
    """Sparse one-slot kernel over ``(state, grid point)`` pairs."""
    cfg = tiny.net
    P, n, p = cfg.period, cfg.n_sensors, tiny.p
    G = tiny.grid_points
    grid = tiny.grid
    states = enumerate_states(tiny)
    index = {k: i for i, k in enumerate(states)}
    _, w0, w1 = observation_alphabet(tiny.obs, tiny.obs_points)
    rows, cols, vals = [], [], []
    redirected = 0
    base_rows = np.arange(G)

    def emit(s, prob, nq, pi_next):
        nonlocal redirected
        nq, hit = _cap(nq, tiny.delta_cap, P)
        redirected += hit
        nk = _key(QueueState(nq.lam, 1, nq.delta, nq.seq_queue, nq.received, 1), cfg)
        t = index[nk]
        i0, frac = _interp_cols(pi_next, G)
        r = s * G + base_rows
        rows.extend((r, r))
        cols.extend((t * G + i0, t * G + i0 + 1))
        vals.extend((prob * (1 - frac), prob * frac))

    for s, key in enumerate(states):
        q = key.as_queue()
        d = q.delta
        stay = math.exp(d * math.log1p(-p))
        psi = np.clip(1.0 - (1.0 - grid) / stay, 0.0, 1.0)
        lengths = sensor_queue_lengths(q, cfg)
        nonempty = [i for i, v in enumerate(lengths) if v > 0]
        drift = grid + (1.0 - grid) * p
        if not nonempty:
            nq, _ = next_queue_state(q, 0, cfg)
            emit(s, np.ones(G), nq, drift)
            continue
        nq, _ = next_queue_state(q, 0, cfg)
        emit(s, np.full(G, 1.0 - cfg.sigma), nq, drift)
        share = cfg.sigma / len(nonempty)
        for i in nonempty:
            nq, ev = next_queue_state(q, i + 1, cfg)
            if ev == E1:
                emit(s, np.full(G, share), nq, drift)
                continue
            stay_next = math.exp(nq.delta * math.log1p(-p))
            if ev == E2:
                for a, b in zip(w0, w1):
                    pred = psi * b + (1 - psi) * a
                    post = np.divide(psi * b, pred, out=np.ones(G), where=pred > 0)
                    emit(s, share * pred, nq, 1.0 - (1.0 - post) * stay_next)
                continue
            assert ev == E3
            gap = min(P, d + 1)
            qg = -math.expm1(gap * math.log1p(-p))
            extras = sum(1 for w in q.seq_queue if w > 0)
            # with at most two sensors there is at most one head-of-line extra
            e0 = [1.0] if extras == 0 else w0
            e1 = [1.0] if extras == 0 else w1
            for a, b in zip(w0, w1):
                for c0, c1 in zip(e0, e1):
                    stay_t = (1 - psi) * (1 - qg) * a * c0
                    move = (1 - psi) * qg * a * c1 + psi * b * c1
                    pred = stay_t + move
                    post = np.divide(move, pred, out=np.ones(G), where=pred > 0)
                    emit(s, share * pred, nq, 1.0 - (1.0 - post) * stay_next)

    S = len(states)
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(S * G, S * G))
    if redirected:
        log.warning("delta cap %d redirected %d transitions; raise delta_cap if thresholds near the cap matter",
                    tiny.delta_cap, redirected)
    return states, A, redirected


def bellman_value_iteration(tiny: TinyScenario, c: float, tol: float = 1e-10,
                            max_iter: int = 100_000) -> DPResult:
    """Solve ``J = min(1 - pi, c pi + E J')`` by value iteration from ``J = 1 - pi``."""
    if c <= 0:
        raise ValueError("cost c must be positive")
    states, A, redirected = build_transitions(tiny)
    S, G = len(states), tiny.grid_points
    grid = tiny.grid
    stop_cost = np.tile(1.0 - grid, S)
    run_cost = np.tile(c * grid, S)
    J = stop_cost.copy()
    residuals = []
    for _ in range(max_iter):
        cont = run_cost + A @ J
        Jn = np.minimum(stop_cost, cont)
        res = float(np.max(np.abs(Jn - J)))
        residuals.append(res)
        J = Jn
        if res <= tol:
            break
    else:
        raise DPConvergenceError(f"residual {residuals[-1]:.3g} still above tol={tol} after {max_iter} sweeps")
    cont = run_cost + A @ J
    stop = (stop_cost <= cont + 1e-12).reshape(S, G)
    return DPResult(tiny, c, states, grid, J.reshape(S, G), stop, cont.reshape(S, G), residuals, redirected)


def prior_only_threshold(p: float, c: float, grid: np.ndarray, horizon: int = 100_000) -> float:
    """Optimal threshold when observations carry no information.

    ``pi`` then follows ``pi + (1 - pi) p`` deterministically, so stopping
    after ``n`` more slots costs ``c (pi_0 + ... + pi_{n-1}) + 1 - pi_n``;
    the answer is the smallest grid point where ``n = 0`` is the best ``n``.
    """
    for g in grid:
        pi, run, best = g, 0.0, 1.0 - g
        for _ in range(horizon):
            run += c * pi
            pi = pi + (1.0 - pi) * p
            if run + 1.0 - pi < best - 1e-15:
                break
            if run > best:
                return float(g)
        else:
            return float(g)
    return 1.0
