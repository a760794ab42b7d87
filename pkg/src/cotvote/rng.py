"""Counter-based random streams with explicit substream derivation.

Every stochastic choice in the library (dropout masks, parameter init,
data generation, batch shuffling) draws from an `RngStream` keyed by
``(seed, stream_id)``. Streams are backed by the Philox counter-based
bit generator, so the sequence for a given key is identical across runs
and platforms, and distinct stream ids give statistically independent
sequences. This is what makes N concurrent sampled forward passes
bit-reproducible regardless of scheduling: each pass owns its own
pre-assigned stream.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15  # splitmix64 increment


def _splitmix64(x: int) -> int:
    x = (x + _GAMMA) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def substream_id(*parts: int | str) -> int:
    """Fold a tag path (ints and strings) into a 64-bit stream id.

    Used to give every logical consumer its own stream, e.g.
    ``substream_id("dropout", stage, step, sample)``.
    """
    h = 0
    for part in parts:
        if isinstance(part, str):
            for b in part.encode("utf-8"):
                h = _splitmix64(h ^ b)
        elif isinstance(part, (int, np.integer)):
            h = _splitmix64(h ^ (int(part) & _MASK64))
        else:
            raise TypeError(f"substream parts must be int or str, got {type(part).__name__}")
    return h


class RngStream:
    """A deterministic stream of random values.

    Same ``(seed, stream_id)`` always yields the same sequence; the
    ``counter`` tracks how many values have been drawn so far.
    """

    __slots__ = ("seed", "stream_id", "counter", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        self.counter = 0
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        )

    def derive(self, *parts: int | str) -> "RngStream":
        """Child stream whose id folds this stream's id with `parts`."""
        return RngStream(self.seed, substream_id(self.stream_id, *parts))

    def random(self, shape=None) -> np.ndarray:
        """Uniform f64 in [0, 1)."""
        out = self._gen.random(shape)
        self.counter += int(np.size(out))
        return out

    def normal(self, shape=None, scale: float = 1.0) -> np.ndarray:
        out = self._gen.standard_normal(shape)
        self.counter += int(np.size(out))
        if scale != 1.0:
            out = out * scale
        return out

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Uniform integers in [low, high)."""
        out = self._gen.integers(low, high, size=shape)
        self.counter += int(np.size(out))
        return out

    def permutation(self, n: int) -> np.ndarray:
        out = self._gen.permutation(n)
        self.counter += n
        return out

    def choice_index(self, weights) -> int:
        """Index sampled proportionally to `weights` (need not be normalized)."""
        w = np.asarray(weights, dtype=np.float64)
        cum = np.cumsum(w)
        u = self.random() * cum[-1]
        return int(np.searchsorted(cum, u, side="right"))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


class StackedRng:
    """Adapter presenting N per-sample streams as one stream over a stacked batch.

    A forward pass that has folded N samples into its leading batch axis
    (rows ``[i*group : (i+1)*group]`` belong to sample i) can use this in
    place of an `RngStream`; each ``random`` call draws sample i's block
    from ``streams[i]``, so the stacked pass consumes randomness exactly
    per-sample.
    """

    __slots__ = ("streams", "group")

    def __init__(self, streams: list[RngStream], group: int):
        self.streams = list(streams)
        self.group = int(group)

    def random(self, shape) -> np.ndarray:
        n = len(self.streams)
        if shape[0] != n * self.group:
            raise ValueError(
                f"stacked draw expects leading dim {n * self.group}, got shape {tuple(shape)}"
            )
        block = (self.group,) + tuple(shape[1:])
        return np.concatenate([s.random(block) for s in self.streams], axis=0)
