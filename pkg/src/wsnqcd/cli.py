"""``wsnqcd`` command line.

Exit codes: 0 success, 1 validation failure, 2 config error, 3 the
network is unstable for the requested load.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

from . import __version__
from .change_model import ObservationModel
from .config import ConfigError, ScenarioConfig, load_config, baseline_scenario
from .network import NetworkSimulator, UnstableNetworkError, require_stable, write_trace
from .streams import TRACE, episode_streams

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_UNSTABLE = 0, 1, 2, 3


def _int_list(text: str) -> list:
    """``"28-60"``, ``"28,30,34"`` or a mix like ``"1-5,10"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out or any(x < 1 for x in out):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return out


def _scenario(args) -> ScenarioConfig:
    scn = load_config(args.config) if args.config else baseline_scenario()
    kw = {"seed": args.seed, "episodes": args.episodes, "calibration_episodes": args.calibration_episodes}
    kw = {k: v for k, v in kw.items() if v is not None}
    try:
        return replace(scn, **kw)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _print_rows(rows, out=sys.stdout):
    cols = ("value", "detector", "status", "gamma", "pfa", "mean_delay", "delay_ci", "d_r", "approx_delay")
    print("  ".join(f"{c:>12}" for c in cols), file=out)
    for r in rows:
        cells = []
        for c in cols:
            v = getattr(r, c)
            cells.append(f"{v:>12.5g}" if isinstance(v, float) else f"{v!s:>12}")
        print("  ".join(cells), file=out)


def _write_trace(scn: ScenarioConfig, path: Path, slots: int) -> None:
    sim = NetworkSimulator(scn.net, episode_streams(scn.seed, TRACE, 0).net, check=True)
    write_trace(path, scn.net, sim.run(slots))
    print(f"trace: {slots} slots -> {path}", file=sys.stderr)


def cmd_run(args) -> int:
    from .experiments import SweepResult, evaluate_point

    scn = _scenario(args)
    if not scn.allow_unstable:
        require_stable(scn.net)
    if args.trace:
        _write_trace(scn, Path(args.trace), args.trace_slots)
    rows = evaluate_point(scn, "period", scn.net.period, workers=args.workers)
    _print_rows(rows)
    res = SweepResult("period", rows, scn.seed, scn.to_dict())
    if args.out:
        res.to_csv(args.out)
    return EXIT_OK if all(r.ok for r in rows) else EXIT_VALIDATION


def _progress(value, rows):
    for r in rows:
        print(f"  {value}: {r.detector} {r.status} delay={r.mean_delay:.4g}", file=sys.stderr, flush=True)


def cmd_sweep_rate(args) -> int:
    from .experiments import sweep_rate

    scn = _scenario(args)
    periods = args.periods or list(scn.sweep.periods)
    if not periods:
        raise ConfigError("no periods given (use --periods or sweep.periods in the config)", "sweep.periods")
    res = sweep_rate(scn, periods, workers=args.workers, progress=_progress)
    _print_rows(res.rows)
    if args.out:
        res.to_csv(args.out)
    return EXIT_OK


def cmd_sweep_nodes(args) -> int:
    from .experiments import DECISION_ONLY, sweep_nodes

    scn = _scenario(args)
    nodes = args.nodes or list(scn.sweep.nodes)
    rate = Fraction(args.node_rate) if args.node_rate else scn.sweep.node_rate
    if not nodes or rate is None:
        raise ConfigError("node sweep needs --nodes and --node-rate (or sweep.nodes / sweep.node_rate)", "sweep")
    dets = (DECISION_ONLY,) if args.decision_only else (DECISION_ONLY, "nodm", "nadm")
    res = sweep_nodes(scn, nodes, rate, dets, workers=args.workers, progress=_progress)
    _print_rows(res.rows)
    if args.out:
        res.to_csv(args.out)
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validate import format_report, run_all

    results = run_all(seed=args.seed or 0)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def cmd_dp_solve(args) -> int:
    from .dp import TinyScenario, bellman_value_iteration

    obs = load_config(args.config).obs if args.config else ObservationModel.gaussian(0.0, 1.0, 1.0, 1.0)
    try:
        tiny = TinyScenario(args.nodes, args.period, args.sigma, args.p, obs, args.delta_cap, args.grid)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    res = bellman_value_iteration(tiny, args.cost, args.tol)
    up = res.is_upset
    for key, g, u in zip(res.states, res.thresholds, up):
        print(f"lambda={key.lam} delta={key.delta} W={key.seq_queue} R={key.received} fresh={int(key.fresh)}"
              f"  gamma={g:.4f}  upset={bool(u)}")
    conc = res.concavity_violation()
    print(f"{len(res.states)} queue states, {len(res.residuals)} sweeps, all up-sets={bool(up.all())}, "
          f"max concavity violation={conc:.2e}, max kappa(q,0)={res.kappa_at_zero().max():.4f} (bound {1 - args.p:.4f})")
    if args.out:
        res.write_csv(args.out)
    return EXIT_OK if up.all() and conc <= 1e-9 else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario JSON file (default: the N=10 Gaussian baseline)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--episodes", type=int, help="episodes per delay estimate")
    common.add_argument("--calibration-episodes", type=int, help="episodes for threshold calibration")
    common.add_argument("--out", type=Path, help="write results as CSV")
    common.add_argument("--workers", type=int, default=None, help="worker processes for episode batches")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="wsnqcd", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="calibrate and evaluate both detectors on one scenario")
    p.add_argument("--trace", nargs="?", const="trace.csv", help="also write a per-slot network trace CSV")
    p.add_argument("--trace-slots", type=int, default=2000)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-rate", parents=[common], help="delay versus sampling period")
    p.add_argument("--periods", type=_int_list, help="e.g. 28-60 or 28,34,40")
    p.set_defaults(func=cmd_sweep_rate)

    p = sub.add_parser("sweep-nodes", parents=[common], help="delay versus N at fixed N*r")
    p.add_argument("--nodes", type=_int_list, help="e.g. 1-30")
    p.add_argument("--node-rate", help="N*r as a fraction, e.g. 1/3 or 1/100")
    p.add_argument("--decision-only", action="store_true", help="skip the network-in-the-loop series")
    p.set_defaults(func=cmd_sweep_nodes)

    p = sub.add_parser("validate", parents=[common], help="run the exact identity checks")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("dp-solve", parents=[common], help="value iteration on a toy instance")
    p.add_argument("--nodes", type=int, default=1)
    p.add_argument("--period", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.8)
    p.add_argument("--p", type=float, default=0.05)
    p.add_argument("--cost", type=float, default=0.02)
    p.add_argument("--delta-cap", type=int, default=12)
    p.add_argument("--grid", type=int, default=201)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_dp_solve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UnstableNetworkError as e:
        print(f"refusing to run an unstable network: {e}", file=sys.stderr)
        return EXIT_UNSTABLE


if __name__ == "__main__":
    sys.exit(main())
