"""Deterministic identity checks behind ``wsnqcd validate``.

Each check returns a :class:`CheckResult`.  Checks look functions up on
their modules at call time, so a patched implementation is what gets
tested.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace

import numpy as np

from . import dp, nadm, network, nodm
from .change_model import ChangeSpec, ObservationModel
from .config import baseline_scenario


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_l_of_r(seed: int = 0, pairs: int = 200, tol: float = 1e-12) -> CheckResult:
    """Closed-form lag against its defining sum on random ``(p, period)``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        p = float(10 ** rng.uniform(-4, -0.5))
        period = int(rng.integers(1, 200))
        worst = max(worst, abs(nodm.l_of_r(p, period) - nodm.l_of_r_sum(p, period)))
    at_one = nodm.l_of_r(0.01, 1)
    ok = worst <= tol and at_one == 0.0
    return CheckResult("l_of_r", ok, f"max |closed - sum| = {worst:.2e} over {pairs} pairs; l(1) = {at_one!r}")


def check_lemma_round_trip(seed: int = 0, points: int = 10, tol: float = 1e-12) -> CheckResult:
    """Forward/inverse posterior conversion on a ``points**3`` grid of ``(psi, delta, p)``.

    The inverse divides by ``(1-p)^delta``, so the grid keeps that factor
    above about 1e-2 where double precision still supports 1e-12.
    """
    del seed  # deterministic grid
    worst = 0.0
    for psi in np.linspace(0.0, 1.0, points):
        for delta in np.linspace(0, 45, points).astype(int):
            for p in np.geomspace(1e-4, 0.05, points):
                back = nadm.pi_to_psi(nadm.psi_to_pi(psi, delta, p), delta, p)
                worst = max(worst, abs(back - psi))
    return CheckResult("lemma_round_trip", worst <= tol,
                       f"max |psi - inv(fwd(psi))| = {worst:.2e} over {points ** 3} grid points")


def check_uninformative_collapse(seed: int = 0, slots: int = 10_000, tol: float = 1e-9) -> CheckResult:
    """With ``f0 = f1`` the posterior is the prior: ``Pi_k = 1 - (1-rho)(1-p)^k``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rho, period, sigma in ((0.0, 34, 0.3636), (0.2, 5, 0.9), (0.05, 3, 0.7)):
        n = 10 if period == 34 else 2
        scn = baseline_scenario(period, obs=ObservationModel.gaussian(0.0, 1.0, 0.0, 1.0),
                             change=ChangeSpec(rho, 0.0005), alpha=min(0.01, 0.5 * (1 - rho)))
        scn = scn.with_net(n_sensors=n, sigma=sigma)
        _, pi, _ = nadm.kernel_trace(scn, slots, rng)
        k = np.arange(slots + 1)
        exact = math.log1p(-rho) + k * math.log1p(-scn.change.p)
        worst = max(worst, float(np.max(np.abs(np.log1p(-pi) - exact))))
    return CheckResult("uninformative_collapse", worst <= tol,
                       f"max |log(1-Pi_k) - closed form| = {worst:.2e} for k <= {slots}")


def check_queue_conservation(seed: int = 0, episodes: int = 1000, slots: int = 300) -> CheckResult:
    """Fuzz random small networks through the packet-level simulator with checks on."""
    rng = np.random.default_rng(seed)
    violations = 0
    first = ""
    for _ in range(episodes):
        cfg = network.NetConfig(int(rng.integers(1, 9)), int(rng.integers(1, 17)), float(rng.uniform(0.05, 1.0)))
        sim = network.NetworkSimulator(cfg, np.random.default_rng(rng.integers(2**63)), check=True)
        try:
            for _ in sim.run(slots):
                pass
            if sim.generated - sim.delivered_count != sim.backlog():
                raise network.StateCorruptionError("generated - delivered != backlog")
        except network.StateCorruptionError as e:
            violations += 1
            first = first or str(e)
    detail = f"{violations} violations in {episodes} episodes x {slots} slots"
    return CheckResult("queue_conservation", violations == 0, detail + (f"; first: {first}" if first else ""))


def check_tiny_dp(seed: int = 0) -> CheckResult:
    """Threshold structure, concavity and the prior-only oracle on toy instances."""
    del seed  # exact computation
    msgs, ok = [], True
    informative = ObservationModel.gaussian(0.0, 1.0, 1.0, 1.0)
    flat = ObservationModel.gaussian(0.0, 1.0, 0.0, 1.0)
    for period in (2, 3, 4):
        tiny = dp.TinyScenario(1, period, 0.8, 0.05, informative, delta_cap=3 * period)
        r = dp.bellman_value_iteration(tiny, 0.02)
        conc = r.concavity_violation()
        kap = float(r.kappa_at_zero().max())
        good = bool(r.is_upset.all()) and conc <= 1e-9 and kap <= 1 - tiny.p + 1e-12
        ok &= good
        msgs.append(f"P={period}: upset={bool(r.is_upset.all())} concavity={conc:.1e} kappa0={kap:.3f}")
    tiny = dp.TinyScenario(1, 4, 0.8, 0.05, flat, delta_cap=12)
    r = dp.bellman_value_iteration(tiny, 0.02)
    oracle = dp.prior_only_threshold(tiny.p, 0.02, tiny.grid)
    step = 1.0 / (tiny.grid_points - 1)
    dev = float(np.nanmax(np.abs(r.thresholds - oracle)))
    ok &= dev <= step + 1e-12
    msgs.append(f"f0=f1: max |gamma(q) - oracle {oracle:.3f}| = {dev:.3f} (grid step {step:.3f})")
    return CheckResult("tiny_dp", bool(ok), "; ".join(msgs))


CHECKS = (check_l_of_r, check_lemma_round_trip, check_uninformative_collapse, check_queue_conservation,
          check_tiny_dp)


def run_all(seed: int = 0, checks=None) -> list:
    out = []
    for fn in checks or CHECKS:
        t = time.perf_counter()
        try:
            r = fn(seed=seed)
        except Exception as e:  # a crashing check is a failing check
            r = CheckResult(fn.__name__.removeprefix("check_"), False, f"raised {type(e).__name__}: {e}")
        out.append(replace(r, seconds=time.perf_counter() - t))
    return out


def format_report(results) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}" for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
