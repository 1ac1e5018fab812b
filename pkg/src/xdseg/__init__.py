"""Cross-dimensional transfer learning for medical image segmentation.

Numpy-based encoder-decoder segmentation networks with exact reverse-mode
gradients, 2D-to-3D kernel inflation, weight transfer between network
families, overlap metrics, and a config-driven training/inference CLI.
"""
from .archs import (ArchConfig, apply_inflated_encoder, apply_weight_transfer,
                    build_dx_net, build_ds_net, build_encoder_2d,
                    build_omnia_net, count_params, extract_substore)
from .config import RunConfig, load_config
from .errors import (ConfigError, DimensionError, FormatError, NumericFault,
                     ParamLookupError, ValidationError, XdsegError)
from .estimators import SegmenterEstimator
from .graph import NetworkGraph, infer_shapes, init_store, run_backward, run_graph
from .inflate import (EquivalenceReport, InflationPlan, inflate_kernel,
                      inflate_store, transfer_weights,
                      verify_inflation_equivalence)
from .labels import RegionChannels, binarize, reconstruct_labels, region_remap
from .losses import LossConfig, compound_loss, dice_score_term
from .metrics import (clamp_score, cohort_summary, dice, evaluate_case,
                      extract_surface, ravd, surface_distances)
from .optim import CosineSchedule, ExpDecaySchedule, LookAhead, Nadam, lr_at
from .store import WeightStore, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ConfigError", "CosineSchedule", "DimensionError",
    "EquivalenceReport", "ExpDecaySchedule", "FormatError", "InflationPlan",
    "LookAhead", "LossConfig", "Nadam", "NetworkGraph", "NumericFault",
    "ParamLookupError", "RegionChannels", "RunConfig", "SegmenterEstimator",
    "ValidationError", "WeightStore", "XdsegError",
    "apply_inflated_encoder", "apply_weight_transfer", "binarize",
    "build_ds_net", "build_dx_net", "build_encoder_2d", "build_omnia_net",
    "clamp_score", "cohort_summary", "compound_loss", "count_params", "dice",
    "dice_score_term", "evaluate_case", "extract_substore", "extract_surface",
    "infer_shapes", "inflate_kernel", "inflate_store", "init_store",
    "load_checkpoint", "load_config", "lr_at", "ravd", "reconstruct_labels",
    "region_remap", "run_backward", "run_graph", "save_checkpoint",
    "surface_distances", "transfer_weights", "verify_inflation_equivalence",
]
