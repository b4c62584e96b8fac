"""Per-episode random streams.

Every episode owns three independent generators (change point,
observations, network) spawned from ``SeedSequence([seed, tag, index])``.
Keeping the network stream separate from the observation stream is what
lets the same episode be replayed under a different network realisation
while holding the measurements fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .change_model import ObservationModel, log_likelihood_ratio, standard_noise

# stream tags keep calibration and estimation runs disjoint
CALIBRATION = 1
ESTIMATION = 2
SOJOURN = 3
TRACE = 4


@dataclass
class EpisodeStreams:
    change: np.random.Generator
    obs: np.random.Generator
    net: np.random.Generator


def episode_streams(seed: int, tag: int, index: int) -> EpisodeStreams:
    ss = np.random.SeedSequence([int(seed), int(tag), int(index)])
    c, o, n = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(3))
    return EpisodeStreams(c, o, n)


def generator(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(tag), int(index)])))


class ObservationStream:
    """Batch-indexed sensor samples for one episode, generated lazily.

    Row ``b - 1`` holds batch ``b`` (sampled at slot ``b * period``); its
    state of nature is ``1{b * period >= T}``.  Rows are produced strictly
    in order so the realisation does not depend on how far a detector
    happens to read.
    """

    def __init__(self, model: ObservationModel, n_sensors: int, period: int,
                 change_time: int, rng: np.random.Generator, initial_batches: int = 64):
        self.model = model
        self.n = int(n_sensors)
        self.period = int(period)
        self.change_time = int(change_time)
        self._rng = rng
        self._values = np.empty((0, self.n))
        self._llr = np.empty((0, self.n))
        self.ensure(initial_batches)

    @property
    def n_batches(self) -> int:
        return self._llr.shape[0]

    @property
    def llr(self) -> np.ndarray:
        return self._llr

    @property
    def values(self) -> np.ndarray:
        return self._values

    def ensure(self, n_batches: int) -> None:
        """Make sure batches ``1..n_batches`` exist."""
        have = self.n_batches
        if n_batches <= have:
            return
        new = max(n_batches, 2 * have) - have
        b = np.arange(have + 1, have + new + 1)
        theta = (b * self.period >= self.change_time).astype(np.int64)
        z = standard_noise(self.model, self._rng, (new, self.n))
        loc = np.where(theta == 1, self.model.loc(1), self.model.loc(0))[:, None]
        scale = np.where(theta == 1, self.model.scale(1), self.model.scale(0))[:, None]
        x = loc + scale * z
        self._values = np.concatenate([self._values, x])
        self._llr = np.ascontiguousarray(np.concatenate([self._llr, log_likelihood_ratio(self.model, x)]))

    def grow(self) -> None:
        self.ensure(2 * max(self.n_batches, 1))

    def value(self, batch: int, node: int) -> float:
        """Sample of 0-based ``node`` in 1-based ``batch``."""
        self.ensure(batch)
        return float(self._values[batch - 1, node])

    def batch_llr(self, batch: int) -> np.ndarray:
        self.ensure(batch)
        return self._llr[batch - 1]


class UniformStream:
    """Two uniforms per slot for the success draw, chunked."""

    def __init__(self, rng: np.random.Generator, chunk: int = 4096):
        self._rng = rng
        self.chunk = int(chunk)

    def next_chunk(self) -> np.ndarray:
        return self._rng.random((self.chunk, 2))
