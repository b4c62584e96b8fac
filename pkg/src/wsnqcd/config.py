"""Scenario configuration files (JSON)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

from .change_model import ChangeSpec, Family, ObservationModel
from .network import NetConfig, stability_margin


class ConfigError(ValueError):
    """Malformed or out-of-domain scenario file."""

    def __init__(self, message, field_path=None, line=None, source=None):
        self.field_path = field_path
        self.line = line
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if field_path:
            where.append(f"field '{field_path}'")
        super().__init__(f"{': '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class SweepSpec:
    periods: tuple = ()
    nodes: tuple = ()
    node_rate: Fraction | None = None


@dataclass(frozen=True)
class ScenarioConfig:
    net: NetConfig
    change: ChangeSpec
    obs: ObservationModel
    alpha: float = 0.01
    cost_c: float = 0.01
    horizon_cap: int = 1_000_000
    seed: int = 0
    episodes: int = 20_000
    calibration_episodes: int = 10_000
    warmup_batches: int = 1_000
    allow_unstable: bool = False
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}", "alpha")
        if self.alpha >= 1.0 - self.change.rho:
            raise ConfigError(
                f"alpha={self.alpha} >= 1 - rho={1 - self.change.rho}: an alarm before any "
                "observation already meets the false-alarm bound, nothing to detect", "alpha")
        if self.horizon_cap < 1 or self.episodes < 1 or self.calibration_episodes < 1:
            raise ConfigError("horizon_cap, episodes and calibration_episodes must be positive")
        if self.cost_c <= 0:
            raise ConfigError("cost_c must be positive", "cost_c")

    @property
    def p_r(self) -> float:
        from .change_model import batch_change_prob
        return batch_change_prob(self.change.p, self.net.period)

    @property
    def margin(self) -> float:
        return stability_margin(self.net)

    def with_net(self, **kw) -> "ScenarioConfig":
        return replace(self, net=replace(self.net, **kw))

    def with_obs(self, obs: ObservationModel) -> "ScenarioConfig":
        return replace(self, obs=obs)

    def to_dict(self) -> dict:
        d = {
            "network": {"n_sensors": self.net.n_sensors, "period": self.net.period, "sigma": self.net.sigma},
            "change": {"rho": self.change.rho, "p": self.change.p},
            "observation": self.obs.to_dict(),
            "alpha": self.alpha,
            "cost_c": self.cost_c,
            "horizon_cap": self.horizon_cap,
            "seed": self.seed,
            "episodes": self.episodes,
            "calibration_episodes": self.calibration_episodes,
            "warmup_batches": self.warmup_batches,
            "allow_unstable": self.allow_unstable,
        }
        sw = {}
        if self.sweep.periods:
            sw["periods"] = list(self.sweep.periods)
        if self.sweep.nodes:
            sw["nodes"] = list(self.sweep.nodes)
        if self.sweep.node_rate is not None:
            sw["node_rate"] = str(self.sweep.node_rate)
        if sw:
            d["sweep"] = sw
        return d


def baseline_scenario(period: int = 34, **overrides) -> ScenarioConfig:
    """The baseline N=10 Gaussian scenario used throughout the experiments."""
    base = ScenarioConfig(
        net=NetConfig(10, period, 0.3636),
        change=ChangeSpec(0.0, 0.0005),
        obs=ObservationModel.gaussian(0.0, 1.0, 1.0, 1.0),
        alpha=0.01,
    )
    return replace(base, **overrides)


_TOP = {"network", "change", "observation", "alpha", "cost_c", "horizon_cap", "seed", "episodes",
        "calibration_episodes", "warmup_batches", "allow_unstable", "sweep"}


def _line_of(text: str, key: str):
    if text is None:
        return None
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _num(d, key, path, text, source, kind=float, default=None, required=True):
    if key not in d:
        if required and default is None:
            raise ConfigError("missing required field", path + key, None, source)
        return default
    v = d[key]
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if kind is int:
        ok = ok and float(v).is_integer()
    if not ok or (isinstance(v, float) and not math.isfinite(v)):
        raise ConfigError(f"expected {'an integer' if kind is int else 'a number'}, got {v!r}",
                          path + key, _line_of(text, key), source)
    return kind(v)


def _fraction(v, path, text, source):
    try:
        f = Fraction(str(v))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"expected a positive fraction like '1/3', got {v!r}", path,
                          _line_of(text, path.split(".")[-1]), source) from None
    if f <= 0:
        raise ConfigError("node_rate must be positive", path, _line_of(text, "node_rate"), source)
    return f


def config_from_dict(d: dict, text: str | None = None, source=None) -> ScenarioConfig:
    if not isinstance(d, dict):
        raise ConfigError("top level must be a JSON object", None, 1, source)
    unknown = set(d) - _TOP
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError("unknown field", k, _line_of(text, k), source)
    for sect in ("network", "change", "observation"):
        if sect not in d:
            raise ConfigError("missing required section", sect, None, source)
        if not isinstance(d[sect], dict):
            raise ConfigError("expected an object", sect, _line_of(text, sect), source)

    nd = d["network"]
    try:
        net = NetConfig(_num(nd, "n_sensors", "network.", text, source, int),
                        _num(nd, "period", "network.", text, source, int),
                        _num(nd, "sigma", "network.", text, source))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        key = str(e).split()[0]
        raise ConfigError(str(e), "network." + key, _line_of(text, key), source) from None

    cd = d["change"]
    try:
        change = ChangeSpec(_num(cd, "rho", "change.", text, source, default=0.0, required=False),
                            _num(cd, "p", "change.", text, source))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        key = str(e).split()[0]
        raise ConfigError(str(e), "change." + key, _line_of(text, key), source) from None

    od = d["observation"]
    fam = od.get("family", "gaussian")
    if fam not in {f.value for f in Family}:
        raise ConfigError(f"unknown family {fam!r}; choose one of {[f.value for f in Family]}",
                          "observation.family", _line_of(text, "family"), source)
    try:
        obs = ObservationModel(
            _num(od, "pre_mean", "observation.", text, source, default=0.0, required=False),
            _num(od, "pre_var", "observation.", text, source, default=1.0, required=False),
            _num(od, "post_mean", "observation.", text, source, default=1.0, required=False),
            _num(od, "post_var", "observation.", text, source, default=1.0, required=False),
            Family(fam))
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        key = str(e).split()[0]
        raise ConfigError(str(e), "observation." + key, _line_of(text, key), source) from None

    sweep = SweepSpec()
    if "sweep" in d:
        sd = d["sweep"]
        if not isinstance(sd, dict):
            raise ConfigError("expected an object", "sweep", _line_of(text, "sweep"), source)
        periods = tuple(sd.get("periods", ()))
        nodes = tuple(sd.get("nodes", ()))
        for name, seq in (("periods", periods), ("nodes", nodes)):
            if any(not isinstance(x, int) or isinstance(x, bool) or x < 1 for x in seq):
                raise ConfigError("expected a list of positive integers", "sweep." + name,
                                  _line_of(text, name), source)
        nr = _fraction(sd["node_rate"], "sweep.node_rate", text, source) if "node_rate" in sd else None
        sweep = SweepSpec(periods, nodes, nr)

    allow = d.get("allow_unstable", False)
    if not isinstance(allow, bool):
        raise ConfigError("expected true/false", "allow_unstable", _line_of(text, "allow_unstable"), source)

    kw = {}
    for key, kind in (("alpha", float), ("cost_c", float), ("horizon_cap", int), ("seed", int),
                      ("episodes", int), ("calibration_episodes", int), ("warmup_batches", int)):
        if key in d:
            kw[key] = _num(d, key, "", text, source, kind)
    try:
        return ScenarioConfig(net, change, obs, allow_unstable=allow, sweep=sweep, **kw)
    except ConfigError as e:
        raise ConfigError(str(e).split(": ", 1)[-1], e.field_path, _line_of(text, e.field_path or ""),
                          source) from None


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", source=path) from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON ({e.msg}, column {e.colno})", None, e.lineno, path) from None
    return config_from_dict(d, text, path)


def period_for_node_rate(n: int, node_rate: Fraction) -> int:
    """Sampling period ``1/r`` giving ``N * r = node_rate``; must be an integer."""
    period = Fraction(n) / Fraction(node_rate)
    if period.denominator != 1:
        raise ConfigError(f"N={n} with N*r={node_rate} gives non-integer period {period}", "sweep.node_rate")
    return int(period)
