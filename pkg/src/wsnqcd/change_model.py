"""Change-point prior and sensor observation families.

The change slot ``T`` is primitive: ``P(T=0) = rho`` and
``P(T=k) = (1-rho) p (1-p)^(k-1)`` for ``k >= 1``.  Observations are
drawn from ``f0`` before the change and ``f1`` after it; detectors only
ever see log-likelihood ratios, so any family with an evaluable
log-density plugs in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ChangeSpec:
    """Geometric change prior with an atom ``rho`` at slot 0.

    ``rho = 1`` is accepted as a degenerate "already changed" prior; the
    detectors short-circuit it to an immediate stop.
    """

    rho: float
    p: float

    def __post_init__(self):
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"p must lie in (0, 1), got {self.p}")

    def pmf(self, k):
        """Closed-form ``P(T = k)`` (vectorised over integer ``k``)."""
        k = np.asarray(k)
        tail = (1.0 - self.rho) * self.p * np.power(1.0 - self.p, np.maximum(k - 1, 0))
        return np.where(k == 0, self.rho, np.where(k > 0, tail, 0.0))

    def survival(self, k):
        """``P(T > k)`` for integer ``k >= 0``."""
        k = np.asarray(k, dtype=float)
        return (1.0 - self.rho) * np.power(1.0 - self.p, k)

    def mean(self) -> float:
        return (1.0 - self.rho) / self.p


class Family(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"


@dataclass(frozen=True)
class ObservationModel:
    """Pre/post-change densities from one location-scale family.

    For the Laplace family ``*_var`` is still the variance; the scale is
    ``sqrt(var / 2)``.
    """

    pre_mean: float = 0.0
    pre_var: float = 1.0
    post_mean: float = 1.0
    post_var: float = 1.0
    family: Family = Family.GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        for name in ("pre_var", "post_var"):
            v = getattr(self, name)
            if not (v > 0.0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        for name in ("pre_mean", "post_mean"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @classmethod
    def gaussian(cls, pre_mean=0.0, pre_var=1.0, post_mean=1.0, post_var=1.0):
        return cls(pre_mean, pre_var, post_mean, post_var, Family.GAUSSIAN)

    @classmethod
    def laplace(cls, pre_mean=0.0, pre_var=1.0, post_mean=1.0, post_var=1.0):
        return cls(pre_mean, pre_var, post_mean, post_var, Family.LAPLACE)

    @property
    def uninformative(self) -> bool:
        return self.pre_mean == self.post_mean and self.pre_var == self.post_var

    def loc(self, hypothesis: int) -> float:
        return self.post_mean if hypothesis else self.pre_mean

    def scale(self, hypothesis: int) -> float:
        var = self.post_var if hypothesis else self.pre_var
        if self.family is Family.LAPLACE:
            return math.sqrt(var / 2.0)
        return math.sqrt(var)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "pre_mean": self.pre_mean,
            "pre_var": self.pre_var,
            "post_mean": self.post_mean,
            "post_var": self.post_var,
        }


def batch_change_prob(p: float, period: int) -> float:
    """Probability that the change falls inside one sampling period."""
    if not (0.0 <= p < 1.0):
        raise ValueError(f"p must lie in [0, 1), got {p}")
    if int(period) != period or period < 1:
        raise ValueError(f"period must be a positive integer, got {period}")
    return -math.expm1(period * math.log1p(-p))


def sample_change_time(spec: ChangeSpec, rng: np.random.Generator) -> int:
    """Draw one change slot from the geometric prior."""
    if rng.random() < spec.rho:
        return 0
    return int(rng.geometric(spec.p))


def sample_change_times(spec: ChangeSpec, rng: np.random.Generator, size: int) -> np.ndarray:
    atom = rng.random(size) < spec.rho
    t = rng.geometric(spec.p, size=size)
    t[atom] = 0
    return t


def log_likelihood(model: ObservationModel, hypothesis: int, x):
    """``log f0(x)`` or ``log f1(x)``; works on scalars and arrays."""
    mu = model.loc(hypothesis)
    s = model.scale(hypothesis)
    z = (np.asarray(x, dtype=float) - mu) / s
    if model.family is Family.LAPLACE:
        out = -np.abs(z) - math.log(2.0 * s)
    else:
        out = -0.5 * z * z - _LOG_SQRT_2PI - math.log(s)
    return float(out) if np.ndim(out) == 0 else out


def log_likelihood_ratio(model: ObservationModel, x):
    """``log f1(x) - log f0(x)``."""
    if model.uninformative:
        return 0.0 if np.ndim(x) == 0 else np.zeros(np.shape(x))
    return log_likelihood(model, 1, x) - log_likelihood(model, 0, x)


def sample_observation(model: ObservationModel, theta: int, rng: np.random.Generator, size=None):
    """Draw from ``f_theta`` as ``loc + scale * z``."""
    if model.family is Family.LAPLACE:
        z = rng.laplace(size=size)
    else:
        z = rng.standard_normal(size=size)
    return model.loc(theta) + model.scale(theta) * z


def standard_noise(model: ObservationModel, rng: np.random.Generator, size):
    """Unit noise for the family; ``loc + scale * noise`` gives a sample."""
    if model.family is Family.LAPLACE:
        return rng.laplace(size=size)
    return rng.standard_normal(size=size)


def kl_divergence(model: ObservationModel) -> float:
    """KL divergence ``I(f1, f0) = E_f1[log f1/f0]``."""
    m0, m1 = model.pre_mean, model.post_mean
    if model.family is Family.LAPLACE:
        b0, b1 = model.scale(0), model.scale(1)
        d = abs(m1 - m0)
        return math.log(b0 / b1) + (b1 * math.exp(-d / b1) + d) / b0 - 1.0
    v0, v1 = model.pre_var, model.post_var
    return 0.5 * (v1 / v0 + (m1 - m0) ** 2 / v0 - 1.0 + math.log(v0 / v1))


@dataclass(frozen=True)
class NatureTrajectory:
    """Realised state of nature: ``theta_k = 1{T <= k}``."""

    change_time: int

    def theta_at(self, k):
        return (np.asarray(k) >= self.change_time).astype(np.int8) if np.ndim(k) else int(k >= self.change_time)

    def batch_theta(self, batch: int, period: int) -> int:
        """State of nature at the sampling instant of ``batch``."""
        return int(batch * period >= self.change_time)

    @classmethod
    def sample(cls, spec: ChangeSpec, rng: np.random.Generator) -> "NatureTrajectory":
        return cls(sample_change_time(spec, rng))
