"""False-alarm / delay estimation and threshold calibration."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from scipy import stats

from . import nadm, nodm
from .nadm import HorizonExceededError
from .network import require_stable
from .streams import CALIBRATION, ESTIMATION, episode_streams

MAX_HORIZON_FRACTION = 1e-3


class Detector(str, Enum):
    NODM = "nodm"
    NADM = "nadm"


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Estimate:
    value: float
    ci_half: float

    @property
    def lo(self) -> float:
        return self.value - self.ci_half

    @property
    def hi(self) -> float:
        return self.value + self.ci_half

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


@dataclass(frozen=True)
class MetricEstimate:
    pfa: Estimate
    mean_delay: Estimate
    episodes: int
    seed: int
    horizon_exceeded: int = 0
    pfa_interval: tuple = (0.0, 1.0)
    extras: dict | None = None


def wilson_interval(k: int, n: int, z: float = 1.959963984540054) -> tuple:
    if n == 0:
        return 0.0, 1.0
    ph = k / n
    den = 1 + z * z / n
    centre = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


def t_interval(x: np.ndarray) -> Estimate:
    n = len(x)
    if n < 2:
        return Estimate(float(x.mean()) if n else math.nan, math.inf)
    half = stats.t.ppf(0.975, n - 1) * x.std(ddof=1) / math.sqrt(n)
    return Estimate(float(x.mean()), float(half))


def _episode(detector, scn, gamma, seed, tag, i):
    s = episode_streams(seed, tag, i)
    try:
        if detector is Detector.NODM:
            e = nodm.run_episode(scn, gamma, s)
            return (e.false_alarm, e.detection_delay, e.T, e.K, e.K_tilde, e.U_tilde)
        e = nadm.run_episode(scn, gamma, s)
        return (e.false_alarm, e.delay, e.T, e.tau, e.tau, e.tau)
    except HorizonExceededError:
        return None


def _chunk(args):
    detector, scn, gamma, seed, tag, lo, hi = args
    return [_episode(detector, scn, gamma, seed, tag, i) for i in range(lo, hi)]


def _map_episodes(fn, detector, scn, gamma, seed, tag, episodes, workers):
    if workers is None or workers <= 1 or episodes < 2000:
        return fn((detector, scn, gamma, seed, tag, 0, episodes))
    bounds = np.linspace(0, episodes, workers * 4 + 1).astype(int)
    jobs = [(detector, scn, gamma, seed, tag, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    out = []
    with ProcessPoolExecutor(workers) as ex:
        for part in ex.map(fn, jobs):
            out.extend(part)
    return out


def run_episodes(detector, scn, gamma: float, episodes: int, seed: int, tag: int = ESTIMATION,
                 workers: int | None = None) -> np.ndarray:
    """Raw per-episode records ``(fa, delay, T, K or tau, K~ or tau, U~ or tau)``.

    Rows of episodes that hit the horizon are filled with ``-1``.
    """
    detector = Detector(detector)
    rows = _map_episodes(_chunk, detector, scn, gamma, seed, tag, episodes, workers)
    out = np.full((episodes, 6), -1, dtype=np.int64)
    for i, r in enumerate(rows):
        if r is not None:
            out[i] = r
    return out


def estimate_metrics(detector, gamma: float, scn, episodes: int, seed: int,
                     workers: int | None = None, tag: int = ESTIMATION) -> MetricEstimate:
    """Monte Carlo false-alarm probability and mean detection delay.

    Delay follows each detector's own definition: NODM averages
    ``(U~ - T) 1{T~ >= T}``, NADM averages ``(tau - T)^+``; both average
    over all episodes, false alarms contributing zero.
    """
    detector = Detector(detector)
    if not scn.allow_unstable:
        require_stable(scn.net)
    raw = run_episodes(detector, scn, gamma, episodes, seed, tag, workers)
    ok = raw[:, 2] >= 0
    n_h = int((~ok).sum())
    if n_h > MAX_HORIZON_FRACTION * episodes:
        raise HorizonExceededError(
            f"{n_h}/{episodes} episodes hit the {scn.horizon_cap}-slot horizon (limit {MAX_HORIZON_FRACTION:.1%})")
    raw = raw[ok]
    n = len(raw)
    k = int(raw[:, 0].sum())
    lo, hi = wilson_interval(k, n)
    pfa = Estimate(k / n, max(k / n - lo, hi - k / n))
    delay = t_interval(raw[:, 1].astype(float))
    extras = {"raw": raw}
    return MetricEstimate(pfa, delay, n, seed, n_h, (lo, hi), extras)


def pre_change_maxima(detector, scn, episodes: int, seed: int, tag: int = CALIBRATION) -> np.ndarray:
    """Per-episode maximum of the detector statistic over pre-change epochs.

    An episode raises a false alarm at threshold ``gamma`` exactly when its
    maximum is ``>= gamma``, so one pass prices every candidate threshold
    on common random numbers.
    """
    detector = Detector(detector)
    f = nodm.pre_change_max if detector is Detector.NODM else nadm.pre_change_max
    out = np.empty(episodes)
    for i in range(episodes):
        out[i] = f(scn, episode_streams(seed, tag, i))[1]
    return out


@dataclass(frozen=True)
class CalibrationResult:
    gamma: float
    pfa: float
    pfa_interval: tuple
    probes: int
    episodes: int

    def __float__(self):
        return self.gamma


def calibrate_threshold(detector, scn, alpha: float, episodes_per_probe: int, tol: float,
                        seed: int, max_iter: int = 200) -> CalibrationResult:
    """Bisection on ``gamma`` so that the empirical false-alarm rate meets ``alpha``.

    All probes share the same episodes.  Bisection keeps the bracket
    ``pfa(lo) > alpha >= pfa(hi)`` and stops once ``|pfa - alpha| <= tol``
    or the Wilson interval at the probe covers ``alpha`` and the bracket has
    collapsed to adjacent order statistics.
    """
    detector = Detector(detector)
    rho = scn.change.rho
    if not (0.0 < alpha < 1.0 - rho):
        raise CalibrationError(
            f"alpha={alpha} must lie in (0, 1 - rho) = (0, {1 - rho}); at alpha >= 1 - rho an immediate "
            "alarm already satisfies the constraint")
    if not scn.allow_unstable:
        require_stable(scn.net)
    m = pre_change_maxima(detector, scn, episodes_per_probe, seed)
    n = len(m)
    srt = np.sort(m)

    def pfa(g):
        return (n - np.searchsorted(srt, g, side="left")) / n

    lo, hi = 0.0, 1.0
    if pfa(hi) > alpha:
        raise CalibrationError("even gamma=1 exceeds the false-alarm target")
    g = 0.5
    probes = 0
    for probes in range(1, max_iter + 1):
        g = 0.5 * (lo + hi)
        f = pfa(g)
        if f > alpha:
            lo = g
        else:
            hi = g
        # stop when no order statistic lies strictly inside the bracket
        inside = np.searchsorted(srt, hi, side="left") - np.searchsorted(srt, lo, side="right")
        if inside == 0 and hi - lo < 1e-15 + 1e-12 * hi:
            break
        if abs(f - alpha) <= tol and f <= alpha:
            hi = g
            break
    g = hi
    f = pfa(g)
    # a pfa that rises with gamma can only come from a broken statistic
    ladder = np.linspace(max(lo - 0.05, 0.0), min(hi + 0.05, 1.0), 11)
    vals = [pfa(x) for x in ladder]
    if any(b > a + 1e-12 for a, b in zip(vals, vals[1:])):
        raise CalibrationError("empirical false-alarm rate is not monotone in gamma")
    k = int(round(f * n))
    return CalibrationResult(float(g), float(f), wilson_interval(k, n), probes, n)


def oracle_nadm_uninformative(scn, gamma: float) -> tuple:
    """Closed-form stop slot and false-alarm probability when ``f0 = f1``.

    ``Pi_k = 1 - (1-rho)(1-p)^k`` so ``tau`` is deterministic and
    ``P(tau < T) = (1-rho)(1-p)^tau``.
    """
    rho, p = scn.change.rho, scn.change.p
    if gamma <= rho:
        return 0, 1.0 - rho
    tau = math.ceil(math.log((1 - gamma) / (1 - rho)) / math.log1p(-p) - 1e-12)
    return tau, (1 - rho) * (1 - p) ** tau


def oracle_nadm_gamma(scn, alpha: float) -> float:
    """Largest ``gamma`` whose deterministic stop slot gives ``P(tau < T) <= alpha``."""
    rho, p = scn.change.rho, scn.change.p
    tau = math.ceil(math.log(alpha / (1 - rho)) / math.log1p(-p) - 1e-12)
    return 1 - (1 - rho) * (1 - p) ** tau


def with_episodes(scn, episodes=None, calibration_episodes=None):
    kw = {}
    if episodes is not None:
        kw["episodes"] = episodes
    if calibration_episodes is not None:
        kw["calibration_episodes"] = calibration_episodes
    return replace(scn, **kw)
