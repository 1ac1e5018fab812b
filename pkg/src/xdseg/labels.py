"""Brain-tumor label algebra: region remapping and label-map reconstruction.

BraTS label convention: 0 background, 1 necrotic/non-enhancing core
(NET/Ncr), 2 peritumoral edema (ED), 4 enhancing tumor (ET). The derived
evaluation regions nest: ET within tumor core (TC) within whole tumor (WT).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError

VALID_LABELS = (0, 1, 2, 4)


@dataclass
class RegionChannels:
    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise DimensionError("region channels must share extents")

    def stacked(self) -> np.ndarray:
        """(3, *spatial) channel order WT, TC, ET."""
        return np.stack([self.wt, self.tc, self.et], axis=0)


def region_remap(labels: np.ndarray) -> RegionChannels:
    """Map a {0,1,2,4} label volume to nested WT/TC/ET binary channels."""
    labels = np.asarray(labels)
    found = np.unique(labels)
    unknown = [int(v) for v in found if v not in VALID_LABELS]
    if unknown:
        raise ValidationError(
            f"unknown label values {unknown}; expected subset of {list(VALID_LABELS)}"
        )
    wt = np.isin(labels, (1, 2, 4))
    tc = np.isin(labels, (1, 4))
    et = labels == 4
    return RegionChannels(wt=wt, tc=tc, et=et)


@dataclass
class ReconstructionInfo:
    et_voxels: int
    et_suppressed: bool
    et_min_volume: float


def reconstruct_labels(
    ch: RegionChannels,
    et_min_volume: float = 0,
    spacing: tuple[float, ...] | None = None,
    volume_unit: str = "voxels",
) -> tuple[np.ndarray, ReconstructionInfo]:
    """Rebuild a {0,1,2,4} label map from binarized region channels.

    Channels are first repaired to nesting by OR-down (tc gains et voxels,
    wt gains tc voxels). If the ET volume falls below ``et_min_volume`` its
    voxels are reassigned to NET/Ncr so they still count toward TC and WT.
    The volume is measured in voxels by default, or in mm^3 when
    ``volume_unit='mm3'`` (requires ``spacing``).
    """
    wt = ch.wt.astype(bool)
    tc = ch.tc.astype(bool) | ch.et.astype(bool)
    wt = wt | tc
    et = ch.et.astype(bool)

    et_count = int(et.sum())
    if volume_unit == "voxels":
        et_volume = float(et_count)
    elif volume_unit == "mm3":
        if spacing is None:
            raise ValidationError("mm3 volume unit requires voxel spacing")
        et_volume = et_count * float(np.prod(spacing))
    else:
        raise ValidationError(f"unknown volume unit {volume_unit!r}")

    suppressed = et_volume < et_min_volume
    if suppressed:
        et = np.zeros_like(et)  # voxels fall through to NET/Ncr via tc

    out = np.zeros(wt.shape, dtype=np.uint8)
    out[wt & ~tc] = 2
    out[tc & ~et] = 1
    out[et] = 4
    info = ReconstructionInfo(
        et_voxels=et_count, et_suppressed=bool(suppressed),
        et_min_volume=float(et_min_volume),
    )
    return out, info


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) > threshold
