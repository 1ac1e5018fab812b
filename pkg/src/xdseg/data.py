"""Preprocessing, patch extraction, augmentation, and dataset splitting.

All randomized operations are pure functions of (input, seed); nothing
reads global random state.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ValidationError
from .io import read_volume


@dataclass
class LabeledVolume:
    image: np.ndarray  # (channels, *spatial), 1-3 spatial axes
    spacing: tuple[float, ...]
    labels: np.ndarray | None = None
    case_id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be positive, got {self.spacing}")
        if len(self.spacing) != self.image.ndim - 1:
            raise ValidationError("spacing must have one entry per spatial axis")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.image.shape[1:]:
                raise ValidationError(
                    f"label extents {self.labels.shape} != image spatial "
                    f"extents {self.image.shape[1:]}"
                )

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.image.shape[1:]


def load_volume(paths, label_path=None, case_id: str = "",
                dtype=np.float32) -> LabeledVolume:
    """Load one case; multiple image paths stack as channels."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    channels = []
    spacing = None
    for p in paths:
        vol, sp = read_volume(p)
        channels.append(np.asarray(vol, dtype=dtype))
        if spacing is None:
            spacing = sp
    labels = None
    if label_path is not None:
        lab, _ = read_volume(label_path)
        labels = np.asarray(lab)
    return LabeledVolume(image=np.stack(channels, axis=0), spacing=spacing,
                         labels=labels, case_id=case_id)


@dataclass
class CropRecord:
    offsets: tuple[int, ...]
    extents: tuple[int, ...]  # cropped extents
    original: tuple[int, ...]


def crop_nonzero(v: LabeledVolume, margin: int = 0) -> tuple[LabeledVolume, CropRecord]:
    """Tight bounding box over the union of nonzero voxels across channels."""
    nz = np.any(v.image != 0, axis=0)
    if not nz.any():
        raise ValidationError("cannot crop an all-zero volume")
    coords = np.argwhere(nz)
    lo = np.maximum(coords.min(axis=0) - margin, 0)
    hi = np.minimum(coords.max(axis=0) + 1 + margin, nz.shape)
    box = tuple(slice(int(a), int(b)) for a, b in zip(lo, hi))
    record = CropRecord(
        offsets=tuple(int(a) for a in lo),
        extents=tuple(int(b - a) for a, b in zip(lo, hi)),
        original=nz.shape,
    )
    image = v.image[(slice(None),) + box]
    labels = v.labels[box] if v.labels is not None else None
    return (LabeledVolume(image=image, spacing=v.spacing, labels=labels,
                          case_id=v.case_id), record)


def reembed(values: np.ndarray, record: CropRecord, fill=0) -> np.ndarray:
    """Place cropped-space values back at original extents (zero elsewhere)."""
    spatial = values.shape[-len(record.original):]
    if spatial != record.extents:
        raise ValidationError(
            f"values extents {spatial} != crop extents {record.extents}"
        )
    lead = values.shape[: values.ndim - len(record.original)]
    out = np.full(lead + record.original, fill, dtype=values.dtype)
    box = tuple(slice(o, o + n) for o, n in zip(record.offsets, record.extents))
    out[(slice(None),) * len(lead) + box] = values
    return out


def zscore_nonzero(v: LabeledVolume) -> LabeledVolume:
    """Standardize the nonzero voxels of each channel; zeros stay zero.

    Population standard deviation; raises on zero-variance channels.
    """
    image = v.image.copy()
    for c in range(image.shape[0]):
        ch = image[c]
        mask = ch != 0
        n = int(mask.sum())
        if n < 2:
            raise ValidationError(f"channel {c}: fewer than 2 nonzero voxels")
        vals = ch[mask]
        mean = vals.mean()
        std = vals.std()
        if std == 0:
            raise ConfigError(f"channel {c}: zero variance among nonzero voxels")
        ch[mask] = (vals - mean) / std
    return LabeledVolume(image=image, spacing=v.spacing, labels=v.labels,
                         case_id=v.case_id)


def sample_normalize(v: LabeledVolume) -> LabeledVolume:
    """Whole-image standardization (population standard deviation)."""
    if v.image.size < 2:
        raise ValidationError("sample normalization needs >= 2 voxels")
    std = v.image.std()
    if std == 0:
        raise ConfigError("zero variance image")
    image = (v.image - v.image.mean()) / std
    return LabeledVolume(image=image, spacing=v.spacing, labels=v.labels,
                         case_id=v.case_id)


@dataclass
class PatchRecord:
    offsets: tuple[int, ...]
    size: tuple[int, ...]
    original: tuple[int, ...]


def extract_patch(v: LabeledVolume, size, policy: str = "center",
                  seed: int = 0) -> tuple[LabeledVolume, PatchRecord]:
    """Deterministic center crop or seeded random-anchor crop."""
    size = tuple(int(s) for s in size)
    extents = v.spatial_shape
    if len(size) != len(extents):
        raise ConfigError(f"patch size rank {len(size)} != spatial rank {len(extents)}")
    if any(s > n for s, n in zip(size, extents)):
        raise ConfigError(f"patch size {size} exceeds extents {extents}")
    if policy == "center":
        offsets = tuple((n - s) // 2 for n, s in zip(extents, size))
    elif policy == "random":
        rng = np.random.default_rng(seed)
        offsets = tuple(int(rng.integers(0, n - s + 1))
                        for n, s in zip(extents, size))
    else:
        raise ConfigError(f"unknown anchor policy {policy!r}")
    box = tuple(slice(o, o + s) for o, s in zip(offsets, size))
    image = v.image[(slice(None),) + box]
    labels = v.labels[box] if v.labels is not None else None
    record = PatchRecord(offsets=offsets, size=size, original=extents)
    return (LabeledVolume(image=image, spacing=v.spacing, labels=labels,
                          case_id=v.case_id), record)


def tile_positions(extents, size, stride=None) -> list[tuple[int, ...]]:
    """Anchor grid covering the volume; the last tile per axis clamps to the edge."""
    size = tuple(size)
    stride = tuple(stride) if stride is not None else size
    per_axis = []
    for n, s, st in zip(extents, size, stride):
        pos = list(range(0, max(n - s, 0) + 1, st))
        if pos[-1] != n - s:
            pos.append(n - s)
        per_axis.append(pos)
    grid = np.meshgrid(*per_axis, indexing="ij")
    return [tuple(int(g[i]) for g in grid) for i in np.ndindex(grid[0].shape)]


@dataclass
class AugmentConfig:
    """Per-transform enables and parameter ranges; each fires independently
    with probability p. Ranges are (low, high) uniform draws."""

    p: float = 0.5
    scale: tuple[float, float] | None = (0.9, 1.1)
    rotate_deg: tuple[float, float] | None = (-10.0, 10.0)  # in-plane
    translate_vox: tuple[float, float] | None = (-4.0, 4.0)
    shear: tuple[float, float] | None = (-0.1, 0.1)  # in-plane
    window_width: tuple[float, float] | None = None  # e.g. (2.0, 6.0)
    window_level: tuple[float, float] | None = (-0.5, 0.5)
    noise_sigma: tuple[float, float] | None = (0.0, 0.1)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"probability must lie in [0, 1], got {self.p}")


def _affine_matrix(rank: int, scale, angle_rad, shear) -> np.ndarray:
    m = np.eye(rank) * scale
    # rotation and shear act on the trailing (in-plane) axes
    if angle_rad != 0.0:
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        rot = np.eye(rank)
        rot[rank - 2:, rank - 2:] = [[c, -s], [s, c]]
        m = rot @ m
    if shear != 0.0:
        sh = np.eye(rank)
        sh[rank - 2, rank - 1] = shear
        m = sh @ m
    return m


def augment(v: LabeledVolume, cfg: AugmentConfig, seed: int = 0) -> LabeledVolume:
    """Seeded stochastic augmentation.

    Affine components (scale, in-plane rotation, translation, in-plane
    shear) compose into one resampling pass: linear interpolation for the
    image, nearest-neighbor for labels, zero fill outside. Window
    width/level rescales intensities linearly; Gaussian noise is additive.
    """
    rng = np.random.default_rng(seed)
    rank = v.image.ndim - 1

    def draw(rng_range):
        return float(rng.uniform(*rng_range))

    def fires(enabled) -> bool:
        if enabled is None:
            return False
        return bool(rng.random() < cfg.p)

    # draw all decisions in a fixed order so the stream is reproducible
    scale = draw(cfg.scale) if fires(cfg.scale) else 1.0
    angle = np.deg2rad(draw(cfg.rotate_deg)) if fires(cfg.rotate_deg) else 0.0
    translate = (np.array([draw(cfg.translate_vox) for _ in range(rank)])
                 if fires(cfg.translate_vox) else np.zeros(rank))
    shear = draw(cfg.shear) if fires(cfg.shear) else 0.0
    do_window = fires(cfg.window_width or cfg.window_level)
    width = draw(cfg.window_width) if (do_window and cfg.window_width) else None
    level = draw(cfg.window_level) if (do_window and cfg.window_level) else 0.0
    sigma = draw(cfg.noise_sigma) if fires(cfg.noise_sigma) else 0.0

    image = v.image
    labels = v.labels
    identity_affine = (scale == 1.0 and angle == 0.0 and shear == 0.0
                       and not translate.any())
    if not identity_affine:
        m = _affine_matrix(rank, 1.0 / scale, -angle, -shear)  # output -> input
        center = (np.array(v.spatial_shape) - 1) / 2.0
        offset = center - m @ (center + translate)
        image = np.stack([
            ndimage.affine_transform(ch, m, offset=offset, order=1, cval=0.0,
                                     mode="constant")
            for ch in image
        ])
        if labels is not None:
            labels = ndimage.affine_transform(
                labels, m, offset=offset, order=0, cval=0, mode="constant",
                output=labels.dtype)
    if width is not None or level != 0.0:
        w = width if width is not None else 1.0
        image = (image - level) / w
    if sigma > 0.0:
        image = image + rng.normal(0.0, sigma, size=image.shape).astype(image.dtype)
    return LabeledVolume(image=image.astype(v.image.dtype), spacing=v.spacing,
                         labels=labels, case_id=v.case_id)


def kfold_split(case_ids, k: int, seed: int = 0) -> list[list[str]]:
    """Seeded shuffle then contiguous chunking into k disjoint folds."""
    case_ids = list(case_ids)
    if len(set(case_ids)) != len(case_ids):
        raise ValidationError("duplicate case ids")
    if k > len(case_ids) or k < 1:
        raise ConfigError(f"k = {k} incompatible with {len(case_ids)} cases")
    rng = np.random.default_rng(seed)
    order = [case_ids[i] for i in rng.permutation(len(case_ids))]
    return [list(chunk) for chunk in np.array_split(order, k)]


def holdout_split(case_ids, fraction: float, seed: int = 0):
    """Returns (train_ids, val_ids) with |val| = round(fraction * n)."""
    case_ids = list(case_ids)
    if len(set(case_ids)) != len(case_ids):
        raise ValidationError("duplicate case ids")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    order = [case_ids[i] for i in rng.permutation(len(case_ids))]
    n_val = int(round(fraction * len(order)))
    return order[n_val:], order[:n_val]


@dataclass
class ManifestRow:
    case_id: str
    image_paths: list[str]
    label_path: str | None = None
    split: str = ""


def read_manifest(path: str | os.PathLike) -> list[ManifestRow]:
    """CSV of case_id, image path(s) separated by ';', label path, split tag."""
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            rows.append(ManifestRow(
                case_id=rec["case_id"],
                image_paths=[p for p in rec["image"].split(";") if p],
                label_path=rec.get("label") or None,
                split=rec.get("split", "") or "",
            ))
    if len({r.case_id for r in rows}) != len(rows):
        raise ValidationError("duplicate case ids in manifest")
    return rows


def write_manifest(path: str | os.PathLike, rows: list[ManifestRow]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["case_id", "image", "label", "split"])
        for r in rows:
            w.writerow([r.case_id, ";".join(r.image_paths), r.label_path or "",
                        r.split])
