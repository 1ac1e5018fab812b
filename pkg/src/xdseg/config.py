"""Run configuration: documented key = value sections, strictly validated.

Unknown keys are rejected so a typo never silently falls back to a default.
See README for the full key reference.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .archs import ArchConfig
from .data import AugmentConfig
from .errors import ConfigError
from .losses import LossConfig
from .optim import CosineSchedule, ExpDecaySchedule

_KNOWN_KEYS = {
    "arch": {
        "net", "in_channels", "n_classes", "input_extents", "stem_filters",
        "encoder_widths", "output_activation", "depth_fold", "depth_widths",
        "frozen_encoder", "init_checkpoint", "init_mode",
    },
    "optim": {"betas", "epsilon", "lookahead_k", "lookahead_alpha"},
    "schedule": {
        "policy", "lr0", "factor", "floor", "lr_min", "score_threshold",
        "epoch_threshold", "period",
    },
    "loss": {"epsilon", "log_floor", "et_min_volume", "threshold"},
    "data": {
        "synthetic", "extents", "n_cases", "manifest", "patch_size",
        "patch_policy", "augment", "augment_p", "noise_sigma", "normalize",
    },
    "run": {"epochs", "steps_per_epoch", "seed", "out_dir", "precision"},
}


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    net: str = "omnia"
    arch: ArchConfig = field(default_factory=ArchConfig)
    frozen_encoder: bool = False
    init_checkpoint: str | None = None
    init_mode: str = "transfer"  # transfer | replicate | replicate-scaled

    betas: tuple[float, float] = (0.95, 0.99)
    optim_epsilon: float = 1e-8
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5

    schedule_policy: str = "exp-decay"
    lr0: float = 3e-4
    factor: float = 0.95
    floor: float = 1e-5
    lr_min: float = 1e-5
    score_threshold: float = 0.85
    epoch_threshold: int = 40
    period: int | None = None

    loss: LossConfig = field(default_factory=LossConfig)
    et_min_volume: float = 0.0
    threshold: float = 0.5

    synthetic: str | None = None  # sphere2d | sphere3d
    extents: tuple[int, ...] = ()
    n_cases: int = 1
    manifest: str | None = None
    patch_size: tuple[int, ...] | None = None
    patch_policy: str = "center"
    augment: bool = False
    augment_p: float = 0.5
    noise_sigma: float = 0.1
    normalize: str = "zscore"  # zscore | sample | none

    epochs: int = 5
    steps_per_epoch: int | None = None
    seed: int = 0
    out_dir: str = "runs/latest"
    precision: str = "single"

    source_path: str | None = None

    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def make_schedule(self):
        if self.schedule_policy == "exp-decay":
            return ExpDecaySchedule(lr0=self.lr0, factor=self.factor,
                                    floor=self.floor)
        if self.schedule_policy == "constant-cosine":
            return CosineSchedule(
                lr0=self.lr0, lr_min=self.lr_min,
                score_threshold=self.score_threshold,
                epoch_threshold=self.epoch_threshold,
                total_epochs=self.epochs, period=self.period,
            )
        raise ConfigError(f"unknown schedule policy {self.schedule_policy!r}")

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(p=self.augment_p,
                             noise_sigma=(0.0, self.noise_sigma))


def load_config(path: str | os.PathLike) -> RunConfig:
    path = str(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - _KNOWN_KEYS[section]
        if unknown:
            raise ConfigError(
                f"unknown keys in [{section}]: {sorted(unknown)}"
            )
    cfg = RunConfig(source_path=path)

    if parser.has_section("arch"):
        a = parser["arch"]
        cfg.net = a.get("net", cfg.net)
        if cfg.net not in ("omnia", "ds", "dx"):
            raise ConfigError(f"unknown net {cfg.net!r}")
        kwargs = {}
        if "in_channels" in a:
            kwargs["in_channels"] = int(a["in_channels"])
        if "n_classes" in a:
            kwargs["n_classes"] = int(a["n_classes"])
        if "input_extents" in a:
            kwargs["input_extents"] = _ints(a["input_extents"])
        if "stem_filters" in a:
            kwargs["stem_filters"] = int(a["stem_filters"])
        if "encoder_widths" in a:
            kwargs["encoder_widths"] = _ints(a["encoder_widths"])
        if "output_activation" in a:
            kwargs["output_activation"] = a["output_activation"]
        if "depth_fold" in a:
            kwargs["depth_fold"] = int(a["depth_fold"])
        if "depth_widths" in a:
            kwargs["depth_widths"] = _ints(a["depth_widths"])
        cfg.arch = ArchConfig(**kwargs)
        cfg.frozen_encoder = _bool(a.get("frozen_encoder", "false"))
        cfg.init_checkpoint = a.get("init_checkpoint") or None
        if cfg.init_checkpoint and not os.path.exists(cfg.init_checkpoint):
            raise ConfigError(
                f"init_checkpoint does not exist: {cfg.init_checkpoint}"
            )
        cfg.init_mode = a.get("init_mode", cfg.init_mode)
        if cfg.init_mode not in ("transfer", "replicate", "replicate-scaled"):
            raise ConfigError(f"unknown init_mode {cfg.init_mode!r}")

    if parser.has_section("optim"):
        o = parser["optim"]
        if "betas" in o:
            b = _floats(o["betas"])
            if len(b) != 2:
                raise ConfigError("betas needs two values")
            cfg.betas = (b[0], b[1])
        cfg.optim_epsilon = float(o.get("epsilon", cfg.optim_epsilon))
        cfg.lookahead_k = int(o.get("lookahead_k", cfg.lookahead_k))
        cfg.lookahead_alpha = float(o.get("lookahead_alpha", cfg.lookahead_alpha))

    if parser.has_section("schedule"):
        s = parser["schedule"]
        cfg.schedule_policy = s.get("policy", cfg.schedule_policy)
        cfg.lr0 = float(s.get("lr0", cfg.lr0))
        cfg.factor = float(s.get("factor", cfg.factor))
        cfg.floor = float(s.get("floor", cfg.floor))
        cfg.lr_min = float(s.get("lr_min", cfg.lr_min))
        cfg.score_threshold = float(s.get("score_threshold", cfg.score_threshold))
        cfg.epoch_threshold = int(s.get("epoch_threshold", cfg.epoch_threshold))
        if "period" in s:
            cfg.period = int(s["period"])

    if parser.has_section("loss"):
        ls = parser["loss"]
        cfg.loss = LossConfig(
            epsilon=float(ls.get("epsilon", 1e-6)),
            log_floor=float(ls.get("log_floor", 1e-7)),
        )
        cfg.et_min_volume = float(ls.get("et_min_volume", cfg.et_min_volume))
        cfg.threshold = float(ls.get("threshold", cfg.threshold))

    if parser.has_section("data"):
        d = parser["data"]
        cfg.synthetic = d.get("synthetic") or None
        if cfg.synthetic and cfg.synthetic not in ("sphere2d", "sphere3d"):
            raise ConfigError(f"unknown synthetic task {cfg.synthetic!r}")
        if "extents" in d:
            cfg.extents = _ints(d["extents"])
        cfg.n_cases = int(d.get("n_cases", cfg.n_cases))
        cfg.manifest = d.get("manifest") or None
        if cfg.manifest and not os.path.exists(cfg.manifest):
            raise ConfigError(f"manifest does not exist: {cfg.manifest}")
        if "patch_size" in d:
            cfg.patch_size = _ints(d["patch_size"])
        cfg.patch_policy = d.get("patch_policy", cfg.patch_policy)
        cfg.augment = _bool(d.get("augment", "false"))
        cfg.augment_p = float(d.get("augment_p", cfg.augment_p))
        cfg.noise_sigma = float(d.get("noise_sigma", cfg.noise_sigma))
        cfg.normalize = d.get("normalize", cfg.normalize)
        if cfg.normalize not in ("zscore", "sample", "none"):
            raise ConfigError(f"unknown normalize policy {cfg.normalize!r}")
        if cfg.synthetic is None and cfg.manifest is None:
            raise ConfigError("[data] needs either synthetic or manifest")

    if parser.has_section("run"):
        r = parser["run"]
        cfg.epochs = int(r.get("epochs", cfg.epochs))
        if "steps_per_epoch" in r:
            cfg.steps_per_epoch = int(r["steps_per_epoch"])
        cfg.seed = int(r.get("seed", cfg.seed))
        cfg.out_dir = r.get("out_dir", cfg.out_dir)
        cfg.precision = r.get("precision", cfg.precision)
        if cfg.precision not in ("single", "double"):
            raise ConfigError("precision must be single or double")
    return cfg
