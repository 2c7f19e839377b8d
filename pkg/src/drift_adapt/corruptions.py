"""Seeded, severity-indexed image degradations on [0, 1] NCHW tensors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import box_muller, make_rng

KINDS = ("none", "gaussian_noise", "impulse_noise", "gaussian_blur", "fog", "snow")
CORRUPTION_KINDS = KINDS[1:]

# severity 1..5
GAUSSIAN_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
IMPULSE_RATE = (0.01, 0.03, 0.06, 0.10, 0.17)
BLUR_SIGMA = (0.5, 1.0, 1.5, 2.0, 2.5)
FOG_MIX = (0.15, 0.25, 0.35, 0.45, 0.55)
SNOW_DENSITY = (0.005, 0.01, 0.02, 0.03, 0.05)
SNOW_LIFT = (0.05, 0.10, 0.15, 0.20, 0.25)
SNOW_STREAK = 9


@dataclass(frozen=True)
class Corruption:
    kind: str = "none"
    severity: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


NONE = Corruption("none")


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _filter_axis(x: np.ndarray, kernel: np.ndarray, axis: int, mode: str) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * x.ndim
    pad[axis] = (r, r)
    xp = np.pad(x, pad, mode=mode)
    n = x.shape[axis]
    out = np.zeros_like(x)
    for i, wgt in enumerate(kernel):
        out += wgt * np.take(xp, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img, sigma: float, mode: str = "reflect") -> np.ndarray:
    """Separable Gaussian blur; ``mode`` is an ``np.pad`` boundary mode."""
    k = gaussian_kernel(sigma)
    x = np.asarray(img, dtype=np.float64)
    return _filter_axis(_filter_axis(x, k, 2, mode), k, 3, mode)


def gaussian_noise(img, sigma: float, seed, clip: bool = True) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    out = x + sigma * box_muller(make_rng(("gaussian_noise", seed)), x.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


def impulse_noise(img, rate: float, seed) -> np.ndarray:
    """Salt-and-pepper: each element independently hit with probability ``rate``."""
    x = np.asarray(img, dtype=np.float64)
    rng = make_rng(("impulse_noise", seed))
    hit = rng.random(x.shape) < rate
    salt = rng.random(x.shape) < 0.5
    out = x.copy()
    out[hit] = salt[hit].astype(np.float64)
    return out


def plasma_fractal(size: int, seed, decay: float = 2.0) -> np.ndarray:
    """Diamond-square height map on a periodic ``size`` x ``size`` grid, scaled to [0, 1].

    ``size`` is rounded up to a power of two.
    """
    size = 1 << max(1, math.ceil(math.log2(max(size, 2))))
    rng = make_rng(("plasma", seed))
    grid = np.zeros((size, size), dtype=np.float64)
    step = size
    roughness = 1.0

    def jitter(values):
        return values / 4 + roughness * rng.uniform(-1.0, 1.0, values.shape)

    while step >= 2:
        half = step // 2
        corners = grid[0:size:step, 0:size:step]
        # square step: centre of each cell from its four corners
        acc = corners + np.roll(corners, -1, axis=0)
        acc = acc + np.roll(acc, -1, axis=1)
        grid[half:size:step, half:size:step] = jitter(acc)
        # diamond step: edge midpoints from two corners and two centres
        centres = grid[half:size:step, half:size:step]
        top = corners + np.roll(corners, -1, axis=1) + centres + np.roll(centres, 1, axis=0)
        grid[0:size:step, half:size:step] = jitter(top)
        left = corners + np.roll(corners, -1, axis=0) + centres + np.roll(centres, 1, axis=1)
        grid[half:size:step, 0:size:step] = jitter(left)
        step = half
        roughness /= decay
    grid -= grid.min()
    peak = grid.max()
    return grid / peak if peak > 0 else grid


def fog(img, mix: float, seed) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    n, _, h, w = x.shape
    out = np.empty_like(x)
    for i in range(n):
        plasma = plasma_fractal(max(h, w), (seed, i))[:h, :w]
        out[i] = (1 - mix) * x[i] + mix * (0.7 * plasma + 0.3)[None]
    return np.clip(out, 0.0, 1.0)


def snow(img, density: float, lift: float, seed) -> np.ndarray:
    """Bright diagonal streaks screen-blended over the image, plus a brightness lift."""
    x = np.asarray(img, dtype=np.float64)
    n, _, h, w = x.shape
    rng = make_rng(("snow", seed))
    flakes = np.where(rng.random((n, h, w)) < density, rng.uniform(0.7, 1.0, (n, h, w)), 0.0)
    layer = np.zeros_like(flakes)
    for k in range(SNOW_STREAK):
        layer[:, k:, k:] += flakes[:, :h - k, :w - k]
    layer = np.clip(layer, 0.0, 1.0)[:, None]
    out = 1.0 - (1.0 - x) * (1.0 - layer) + lift
    return np.clip(out, 0.0, 1.0)


def apply(img, corruption: Corruption) -> np.ndarray:
    """Return a corrupted copy of ``img`` (values in [0, 1])."""
    if corruption.kind not in KINDS:
        raise ValueError(f"unknown corruption kind {corruption.kind!r}")
    x = T.as_tensor(img, "image")
    if x.size and (x.min() < 0 or x.max() > 1):
        raise ValueError("corruption input must lie in [0, 1]")
    s = corruption.severity - 1
    seed = corruption.seed
    kind = corruption.kind
    if kind == "none":
        return x.copy()
    if kind == "gaussian_noise":
        out = gaussian_noise(x, GAUSSIAN_SIGMA[s], seed)
    elif kind == "impulse_noise":
        out = impulse_noise(x, IMPULSE_RATE[s], seed)
    elif kind == "gaussian_blur":
        out = np.clip(gaussian_blur(x, BLUR_SIGMA[s]), 0.0, 1.0)
    elif kind == "fog":
        out = fog(x, FOG_MIX[s], seed)
    else:
        out = snow(x, SNOW_DENSITY[s], SNOW_LIFT[s], seed)
    return out.astype(T.DTYPE)
