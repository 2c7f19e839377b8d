"""Seeded random streams.

Every stochastic routine in the package draws from ``make_rng``: NumPy's
Philox-4x64 counter-based bit generator keyed by a ``SeedSequence``.
Uniform doubles come from ``Generator.random`` (53-bit, [0, 1)); normal
deviates are produced by the basic Box-Muller transform in
:func:`box_muller`, not by NumPy's ziggurat sampler, so the mapping from
uniform stream to Gaussian values is fixed by this module.
"""
from __future__ import annotations

import math
import zlib

import numpy as np

from .tensor import DTYPE


def _key_words(seed) -> list[int]:
    if isinstance(seed, (tuple, list)):
        return [w for part in seed for w in _key_words(part)]
    if isinstance(seed, str):
        return [zlib.crc32(seed.encode("utf-8"))]
    value = int(seed)
    if value < 0:
        raise ValueError(f"seeds must be non-negative, got {value}")
    return [value]


def make_rng(seed) -> np.random.Generator:
    """Generator keyed by an int, a string label, or a nested tuple of them.

    Tuples give independent named sub-streams, e.g. ``("snow", seed)``.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(_key_words(seed))))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal float64 samples; pairs (u1, u2) -> (r cos, r sin)."""
    shape = tuple(int(s) for s in shape)
    count = math.prod(shape)
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1], keeps log finite
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:count].reshape(shape)


def rng_fill_gaussian(shape, seed, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    z = box_muller(make_rng(seed), shape)
    return (mean + std * z).astype(DTYPE)


def rng_fill_uniform(shape, seed) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    return make_rng(seed).random(shape).astype(DTYPE)
