"""Reproducible sampling with counter-based substreams.

Every stream is a PCG64 generator whose 64-bit seed is derived from
``(master_seed, stream_id)`` with the SplitMix64 finalizer::

    seed = splitmix64(splitmix64(master_seed) ^ (stream_id * 0x9E3779B97F4A7C15))

For a fixed master seed the map ``stream_id -> seed`` is a bijection on
64-bit integers, so distinct trials never share a seed and any trial can be
recreated without replaying the others. Draws use inverse-CDF lookup on a
uniform variate from the stream. The generator choice is fixed for this
release; bit-identical sequences are promised within it, not across
implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def mix_seed(master_seed: int, stream_id: int) -> int:
    if not (0 <= master_seed <= MASK64 and 0 <= stream_id <= MASK64):
        raise ValueError("seeds and stream ids are unsigned 64-bit integers")
    return splitmix64(splitmix64(master_seed) ^ ((stream_id * GOLDEN) & MASK64))


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    stream_id: int = 0


class Stream:
    """Single-owner random stream; not safe to share across threads."""

    def __init__(self, spec: SeedSpec):
        self.spec = spec
        self._gen = np.random.Generator(np.random.PCG64(mix_seed(spec.master_seed, spec.stream_id)))

    def uniform(self, size: int | tuple[int, ...] | None = None) -> np.ndarray | float:
        return self._gen.random(size)

    def draw(self, probs: np.ndarray) -> int:
        return int(inverse_cdf(cdf_of(probs), self._gen.random()))

    def draw_many(self, probs: np.ndarray, size: int | tuple[int, ...]) -> np.ndarray:
        return inverse_cdf(cdf_of(probs), self._gen.random(size))


def substream(master_seed: int, trial_index: int) -> Stream:
    return Stream(SeedSpec(master_seed, trial_index))


def cdf_of(probs: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(np.asarray(probs, dtype=float), axis=-1)
    # roundoff must never push a variate past the last atom
    cdf[..., -1] = 1.0
    return cdf


def inverse_cdf(cdf: np.ndarray, u: np.ndarray | float) -> np.ndarray:
    """Index of the first cumulative weight strictly above ``u``.

    Zero-probability atoms (repeated cumulative values) are never returned.
    """
    return np.searchsorted(cdf, u, side="right")


def draw(stream: Stream, probs: np.ndarray) -> int:
    return stream.draw(probs)
