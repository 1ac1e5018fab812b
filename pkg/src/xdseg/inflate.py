"""2D-to-3D kernel inflation and 2D-to-2D weight transfer.

Inflation replicates a 2D convolution kernel along a new depth axis, either
verbatim (``replicate``) or divided by the depth so that responses to
depth-constant inputs keep the 2D magnitude (``replicate-scaled``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .store import WeightStore
from .tensor import ConvParams
from . import ops

MODES = ("replicate", "replicate-scaled")


@dataclass
class InflationPlan:
    kd: int = 3
    mode: str = "replicate"
    norm_transfer: bool = False  # rewrite batch-norm entries to instance norm

    def __post_init__(self):
        if self.kd < 1:
            raise ValidationError(f"target depth kd must be >= 1, got {self.kd}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown inflation mode {self.mode!r}")


def inflate_kernel(k2: np.ndarray, kd: int, mode: str = "replicate") -> np.ndarray:
    """Replicate a (out, in, kh, kw) kernel over ``kd`` depth slices."""
    k2 = np.asarray(k2)
    if k2.ndim != 4:
        raise DimensionError(f"expected a 4-axis 2D kernel, got rank {k2.ndim}")
    if kd < 1:
        raise ValidationError(f"kd must be >= 1, got {kd}")
    if mode not in MODES:
        raise ValidationError(f"unknown inflation mode {mode!r}")
    slab = k2 / kd if mode == "replicate-scaled" else k2
    return np.repeat(slab[:, :, None, :, :], kd, axis=2)


def inflate_store(s2: WeightStore, plan: InflationPlan) -> WeightStore:
    """Inflate every conv kernel of a 2D store to 3D per the plan.

    Biases and norm affine parameters are copied unchanged. With
    ``norm_transfer`` set, running-statistics entries are dropped (instance
    normalization carries none). The source store is never mutated.
    """
    bad = [
        e.name
        for e in s2.entries
        if e.role == "conv-kernel" and e.rank != 2
    ]
    if bad:
        raise ValidationError(f"store is not purely 2D; offending entries: {bad}")
    out = WeightStore(
        meta={
            **s2.meta,
            "inflation": plan.mode,
            "depth_used": plan.kd,
        }
    )
    for e in s2.entries:
        blob = s2.blobs[e.name]
        if e.role == "conv-kernel":
            out.add(e.name, e.role, inflate_kernel(blob, plan.kd, plan.mode), rank=3)
        elif plan.norm_transfer and e.role in (
            "norm-running-mean",
            "norm-running-var",
        ):
            continue
        else:
            out.add(e.name, e.role, blob.copy(), rank=3)
    return out


def transfer_weights(
    target: WeightStore, source: WeightStore, prefix: str = ""
) -> list[str]:
    """Copy source entries into matching target entries, unaltered.

    ``prefix`` is prepended to source names to locate targets. Returns the
    list of target names written; raises when a source entry has no match or
    shapes disagree.
    """
    written = []
    for e in source.entries:
        name = prefix + e.name
        if name not in target:
            raise ValidationError(f"no target entry for transferred weight {name!r}")
        if target.entry(name).shape != e.shape:
            raise ValidationError(
                f"transfer shape mismatch at {name!r}: "
                f"{target.entry(name).shape} vs {e.shape}"
            )
        target[name] = source.blobs[e.name].copy()
        written.append(name)
    return written


@dataclass
class EquivalenceReport:
    kd: int
    mode: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def verify_inflation_equivalence(
    k2: np.ndarray,
    kd: int,
    trials: int = 20,
    mode: str = "replicate",
    seed: int = 0,
    tolerance: float = 1e-6,
    image_size: int = 7,
) -> EquivalenceReport:
    """Check the depth-constant equivalence property of an inflated kernel.

    For inputs whose depth slices all equal one random 2D image, a valid
    (zero-padding-free) 3D convolution with the replicated kernel must equal
    kd times the 2D convolution at every output depth; the scaled mode must
    equal the 2D result.
    """
    k2 = np.asarray(k2, dtype=np.float64)
    if k2.ndim != 4:
        raise DimensionError(f"expected a 4-axis 2D kernel, got rank {k2.ndim}")
    k3 = inflate_kernel(k2, kd, mode)
    factor = float(kd) if mode == "replicate" else 1.0
    rng = np.random.default_rng(seed)
    out_ch, in_ch, kh, kw = k2.shape
    h = max(image_size, kh + 1)
    w = max(image_size, kw + 1)
    depth = kd + 2  # input depth >= kd so a valid 3D output exists
    max_rel = 0.0
    for _ in range(trials):
        x2 = rng.standard_normal((1, in_ch, h, w))
        y2, _ = ops.conv_forward(x2, ConvParams(kernel=k2))
        x3 = np.repeat(x2[:, :, None, :, :], depth, axis=2)
        y3, _ = ops.conv_forward(x3, ConvParams(kernel=k3))
        expected = factor * y2[:, :, None, :, :]
        denom = max(np.abs(expected).max(), 1e-30)
        rel = np.abs(y3 - expected).max() / denom
        max_rel = max(max_rel, float(rel))
    return EquivalenceReport(
        kd=kd, mode=mode, trials=trials, max_rel_error=max_rel, tolerance=tolerance
    )
