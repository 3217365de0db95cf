"""Seeded synthetic image generation: procedural sinusoidal textures.

Images are flat vectors of sqrt(s) x sqrt(s) grids, min-max normalized to
[0, 1] per image, so every image spans the full intensity range and no two
seeds collide in practice.
"""

from __future__ import annotations

import math

import numpy as np


def gen_synthetic_images(count: int, s: int, seed: int) -> np.ndarray:
    """(count, s) array of distinct textures with pixel values in [0, 1].

    s must be a perfect square; each image mixes a few random oriented
    sinusoids with a little pixel noise, then rescales to full range.
    """
    side = math.isqrt(s)
    if side * side != s:
        raise ValueError(f"s must be a perfect square, got {s}")
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    u, v = np.meshgrid(
        np.linspace(0.0, 1.0, side, endpoint=False),
        np.linspace(0.0, 1.0, side, endpoint=False),
        indexing="ij",
    )
    images = np.empty((count, s))
    for i in range(count):
        canvas = np.zeros((side, side))
        for _ in range(4):
            freq = rng.uniform(0.5, 4.0)
            theta = rng.uniform(0.0, math.pi)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            amp = rng.uniform(0.3, 1.0)
            canvas += amp * np.sin(
                2.0 * math.pi * freq * (math.cos(theta) * u + math.sin(theta) * v)
                + phase
            )
        canvas += 0.15 * rng.standard_normal((side, side))
        lo, hi = canvas.min(), canvas.max()
        images[i] = ((canvas - lo) / (hi - lo)).ravel()
    return images
