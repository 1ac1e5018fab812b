"""Synthetic sphere-in-noise segmentation tasks for smoke tests and demos."""
from __future__ import annotations

import numpy as np


def sphere_case(extents, seed: int = 0, radius_frac: float = 0.3,
                jitter_frac: float = 0.1, contrast: float = 2.0,
                noise: float = 0.3, dtype=np.float32):
    """One case: noisy background with a brighter ball. Returns (image, mask).

    ``image`` is (1, *extents); ``mask`` is binary with the same spatial
    extents. Works for 2D and 3D alike.
    """
    extents = tuple(int(n) for n in extents)
    rng = np.random.default_rng(seed)
    center = np.array([
        (n - 1) / 2.0 + rng.uniform(-jitter_frac, jitter_frac) * n
        for n in extents
    ])
    radius = radius_frac * min(extents)
    grids = np.meshgrid(*[np.arange(n) for n in extents], indexing="ij")
    dist2 = sum((g - c) ** 2 for g, c in zip(grids, center))
    mask = dist2 <= radius ** 2
    image = rng.normal(0.0, noise, size=extents)
    image[mask] += contrast
    return image[None].astype(dtype), mask


def sphere_batch(extents, n_cases: int, seed: int = 0, **kwargs):
    """A list of (image, mask) cases with per-case derived seeds."""
    return [sphere_case(extents, seed=seed * 1000 + i, **kwargs)
            for i in range(n_cases)]
