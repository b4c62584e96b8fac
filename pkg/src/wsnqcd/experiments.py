"""Parameter sweeps: sampling period at fixed N, and N at fixed N*r."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import nodm
from .calibration import (CalibrationError, Detector, calibrate_threshold, estimate_metrics,
                          t_interval, wilson_interval)
from .change_model import kl_divergence
from .config import ScenarioConfig, period_for_node_rate
from .nadm import HorizonExceededError
from .network import UnstableNetworkError, estimate_batch_sojourn, stability_margin
from .streams import ESTIMATION, SOJOURN, episode_streams, generator

log = logging.getLogger(__name__)

CSV_VERSION = 1
DECISION_ONLY = "nodm-decision"

COLUMNS = ("param", "value", "n_sensors", "period", "detector", "status", "gamma", "pfa", "pfa_lo", "pfa_hi",
           "mean_delay", "delay_ci", "decision_delay", "decision_ci", "d_r", "d_r_ci", "l_r",
           "batch_term", "batch_term_ci", "approx_delay", "episodes")


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: float
    n_sensors: int
    period: int
    detector: str
    status: str = "ok"
    gamma: float = math.nan
    pfa: float = math.nan
    pfa_lo: float = math.nan
    pfa_hi: float = math.nan
    mean_delay: float = math.nan
    delay_ci: float = math.nan
    decision_delay: float = math.nan
    decision_ci: float = math.nan
    d_r: float = math.nan
    d_r_ci: float = math.nan
    l_r: float = math.nan
    batch_term: float = math.nan
    batch_term_ci: float = math.nan
    approx_delay: float = math.nan
    episodes: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class SweepResult:
    param: str
    rows: list
    seed: int
    config: dict = field(default_factory=dict)

    def series(self, detector: str, column: str = "mean_delay"):
        """``(values, column)`` arrays over successful rows of one detector."""
        rs = [r for r in self.rows if r.detector == detector and r.ok]
        return np.array([r.value for r in rs]), np.array([getattr(r, column) for r in rs])

    def argmin(self, detector: str, column: str = "mean_delay"):
        x, y = self.series(detector, column)
        if not len(x):
            raise ValueError(f"no successful rows for {detector}")
        return x[int(np.argmin(y))]

    def failures(self) -> list:
        return [r for r in self.rows if not r.ok]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# wsnqcd sweep v{CSV_VERSION} param={self.param} seed={self.seed} "
                  f"config={json.dumps(self.config, sort_keys=True, separators=(',', ':'))}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            d = asdict(r)
            w.writerow([_fmt(d[c]) for c in COLUMNS])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def read_sweep_csv(path) -> tuple:
    """``(header_line, rows as dicts)``; rejects files from a newer schema."""
    with open(path) as fh:
        head = fh.readline().rstrip("\n")
        if not head.startswith("# wsnqcd sweep v"):
            raise ValueError(f"{path}: missing sweep header")
        version = int(head.split()[3][1:])
        if version > CSV_VERSION:
            raise ValueError(f"{path}: schema v{version} is newer than supported v{CSV_VERSION}")
        return head, list(csv.DictReader(fh))


def approximate_delay(scn: ScenarioConfig, d_r: float) -> float:
    """NODM delay from ``d(r)``, the closed-form lag and the asymptotic batch count."""
    P = scn.net.period
    l_r = nodm.l_of_r(scn.change.p, P)
    k = nodm.asymptotic_decision_delay(scn.alpha, scn.net.n_sensors, kl_divergence(scn.obs), scn.p_r)
    return (d_r + l_r) * (1 - scn.alpha) - scn.change.rho * l_r + P * k


def nodm_episodes(raw: np.ndarray, period: int) -> list:
    """Rebuild episode records from ``estimate_metrics`` raw rows."""
    return [nodm.NodmEpisode(int(T), int(K), int(kt), int(kt) * period, int(u), bool(fa))
            for fa, _, T, K, kt, u in raw]


def estimate_decision_delay(scn: ScenarioConfig, gamma: float, episodes: int, seed: int):
    """Decision delay ``(T~ - T) 1{T~ >= T}`` with no network in the loop."""
    eps = [nodm.decision_episode(scn, gamma, episode_streams(seed, ESTIMATION, i)) for i in range(episodes)]
    dd = np.array([e.decision_delay for e in eps], float)
    fa = int(sum(e.false_alarm for e in eps))
    return t_interval(dd), fa, eps


def _nodm_components(scn, raw, sojourn_batches, seed):
    P = scn.net.period
    eps = nodm_episodes(raw, P)
    dec = t_interval(np.array([e.decision_delay for e in eps], float))
    bt = t_interval(np.array([P * e.batch_excess for e in eps], float))
    d = estimate_batch_sojourn(scn.net, sojourn_batches, scn.warmup_batches, generator(seed, SOJOURN, P))
    return dec, bt, d


def _failed(param, value, scn, det, status):
    return SweepRow(param, float(value), scn.net.n_sensors, scn.net.period, det, status)


def evaluate_point(scn: ScenarioConfig, param: str, value, detectors=("nodm", "nadm"), seed: int | None = None,
                   episodes: int | None = None, calibration_episodes: int | None = None,
                   sojourn_batches: int | None = None, workers: int | None = None) -> list:
    """Calibrate and estimate each detector at one scenario; failures become status rows."""
    seed = scn.seed if seed is None else seed
    episodes = episodes or scn.episodes
    cal_eps = calibration_episodes or scn.calibration_episodes
    sojourn_batches = sojourn_batches or episodes
    rows = []
    unstable = stability_margin(scn.net) <= 0 and not scn.allow_unstable
    l_r = nodm.l_of_r(scn.change.p, scn.net.period)
    for det in detectors:
        if det == DECISION_ONLY:
            rows.append(_decision_row(scn, param, value, seed, episodes, cal_eps, l_r))
            continue
        if unstable:
            rows.append(_failed(param, value, scn, det, "unstable"))
            continue
        try:
            cal = calibrate_threshold(det, scn, scn.alpha, cal_eps, 0.0, seed)
            m = estimate_metrics(det, cal.gamma, scn, episodes, seed, workers)
        except (CalibrationError, HorizonExceededError, UnstableNetworkError) as e:
            log.warning("%s=%s %s failed: %s", param, value, det, e)
            rows.append(_failed(param, value, scn, det, type(e).__name__))
            continue
        lo, hi = m.pfa_interval
        kw = dict(gamma=cal.gamma, pfa=m.pfa.value, pfa_lo=lo, pfa_hi=hi, mean_delay=m.mean_delay.value,
                  delay_ci=m.mean_delay.ci_half, l_r=l_r, episodes=m.episodes)
        if Detector(det) is Detector.NODM:
            dec, bt, d = _nodm_components(scn, m.extras["raw"], sojourn_batches, seed)
            kw.update(decision_delay=dec.value, decision_ci=dec.ci_half, d_r=d.mean, d_r_ci=d.ci_half,
                      batch_term=bt.value, batch_term_ci=bt.ci_half, approx_delay=approximate_delay(scn, d.mean))
        rows.append(SweepRow(param, float(value), scn.net.n_sensors, scn.net.period, det, **kw))
    return rows


def _decision_row(scn, param, value, seed, episodes, cal_eps, l_r):
    det = DECISION_ONLY
    try:
        cal = calibrate_threshold(Detector.NODM, replace(scn, allow_unstable=True), scn.alpha, cal_eps, 0.0, seed)
    except CalibrationError as e:
        return _failed(param, value, scn, det, type(e).__name__)
    est, fa, eps = estimate_decision_delay(scn, cal.gamma, episodes, seed)
    lo, hi = wilson_interval(fa, episodes)
    P = scn.net.period
    bt = t_interval(np.array([P * e.batch_excess for e in eps], float))
    return SweepRow(param, float(value), scn.net.n_sensors, P, det, gamma=cal.gamma, pfa=fa / episodes,
                    pfa_lo=lo, pfa_hi=hi, mean_delay=est.value, delay_ci=est.ci_half,
                    decision_delay=est.value, decision_ci=est.ci_half, l_r=l_r,
                    batch_term=bt.value, batch_term_ci=bt.ci_half, episodes=episodes)


def sweep_rate(scn: ScenarioConfig, periods, detectors=("nodm", "nadm"), seed: int | None = None,
               episodes: int | None = None, calibration_episodes: int | None = None,
               sojourn_batches: int | None = None, workers: int | None = None, progress=None) -> SweepResult:
    """Delay versus sampling period at fixed N.

    Every period reuses the same seed, so change points and noise draws
    are shared across the sweep and differences between periods are not
    swamped by episode-to-episode variance.
    """
    seed = scn.seed if seed is None else seed
    rows = []
    for P in periods:
        s = scn.with_net(period=int(P))
        rows.extend(evaluate_point(s, "period", P, detectors, seed, episodes, calibration_episodes,
                                   sojourn_batches, workers))
        if progress:
            progress(P, rows[-len(detectors):])
    return SweepResult("period", rows, seed, scn.to_dict())


def sweep_nodes(scn: ScenarioConfig, nodes, node_rate, detectors=(DECISION_ONLY, "nodm", "nadm"),
                seed: int | None = None, episodes: int | None = None, calibration_episodes: int | None = None,
                sojourn_batches: int | None = None, workers: int | None = None, progress=None) -> SweepResult:
    """Delay versus N with ``N * r = node_rate`` held fixed (period ``1 / node_rate`` per node)."""
    seed = scn.seed if seed is None else seed
    node_rate = Fraction(node_rate)
    rows = []
    for n in nodes:
        P = period_for_node_rate(int(n), node_rate)
        s = scn.with_net(n_sensors=int(n), period=P)
        rows.extend(evaluate_point(s, "nodes", n, detectors, seed, episodes, calibration_episodes,
                                   sojourn_batches, workers))
        if progress:
            progress(n, rows[-len(detectors):])
    cfg = scn.to_dict()
    cfg["node_rate"] = str(node_rate)
    return SweepResult("nodes", rows, seed, cfg)


def theorem_check(scn: ScenarioConfig, episodes: int, calibration_episodes: int, sojourn_batches: int,
                  seed: int | None = None):
    """Calibrated NODM run at one period plus the delay decomposition with CIs."""
    seed = scn.seed if seed is None else seed
    cal = calibrate_threshold(Detector.NODM, scn, scn.alpha, calibration_episodes, 0.0, seed)
    m = estimate_metrics(Detector.NODM, cal.gamma, scn, episodes, seed)
    P = scn.net.period
    eps = nodm_episodes(m.extras["raw"], P)
    d = estimate_batch_sojourn(scn.net, sojourn_batches, scn.warmup_batches, generator(seed, SOJOURN, P))
    return nodm.decompose_detection_delay(eps, d.mean, nodm.l_of_r(scn.change.p, P), None, scn.change.rho, P,
                                          d.ci_half)


__all__ = ["SweepRow", "SweepResult", "sweep_rate", "sweep_nodes", "evaluate_point", "approximate_delay",
           "estimate_decision_delay", "theorem_check", "read_sweep_csv", "CSV_VERSION"]
