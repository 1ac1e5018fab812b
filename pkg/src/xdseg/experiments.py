"""Transfer-benefit experiment: does a depth-inflated 2D encoder reach a
target overlap score in fewer steps than random initialization?

The harness pretrains a small 2D network on a synthetic circle task,
extracts its encoder, then trains 3D networks on a sphere task from three
starting points (random, replicate inflation, scaled inflation) across
several seeds, recording steps-to-target per arm. Results are written to a
CSV; the direction of the effect is reported, not enforced.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import archs, synthetic
from .archs import ArchConfig
from .graph import init_store
from .optim import ExpDecaySchedule
from .pipeline import train_loop

ARMS = ("random", "replicate", "replicate-scaled")


@dataclass
class ExperimentConfig:
    extents_2d: tuple[int, int] = (32, 32)
    extents_3d: tuple[int, int, int] = (16, 16, 16)
    encoder_widths: tuple[int, ...] = (4, 8)
    stem_filters: int = 4
    pretrain_steps: int = 60
    max_steps: int = 200
    target_dice: float = 0.90
    lr: float = 1e-2
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    n_cases: int = 4


@dataclass
class ArmResult:
    seed: int
    arm: str
    steps_to_target: int | None  # None => target not reached in budget
    final_dice: float


@dataclass
class ExperimentReport:
    rows: list[ArmResult] = field(default_factory=list)

    def mean_steps(self, arm: str, cap: int) -> float:
        """Mean steps-to-target with unreached runs counted at the cap."""
        vals = [r.steps_to_target if r.steps_to_target is not None else cap
                for r in self.rows if r.arm == arm]
        return float(np.mean(vals)) if vals else float("nan")


def _arch_2d(cfg: ExperimentConfig) -> ArchConfig:
    return ArchConfig(in_channels=1, n_classes=1,
                      input_extents=cfg.extents_2d,
                      stem_filters=cfg.stem_filters,
                      encoder_widths=cfg.encoder_widths,
                      output_activation="sigmoid")


def _arch_3d(cfg: ExperimentConfig) -> ArchConfig:
    return ArchConfig(in_channels=1, n_classes=1,
                      input_extents=cfg.extents_3d,
                      stem_filters=cfg.stem_filters,
                      encoder_widths=cfg.encoder_widths,
                      output_activation="sigmoid")


def _batches_from(cases, steps_per_epoch, base_seed):
    samples = [(img[None], mask[None, None].astype(img.dtype))
               for img, mask in cases]

    def batches(epoch):
        rng = np.random.default_rng((base_seed, epoch))
        return [samples[int(rng.integers(len(samples)))]
                for _ in range(steps_per_epoch)]

    return batches


def pretrain_encoder(cfg: ExperimentConfig, seed: int = 100):
    """Train the 2D network on circles and return its encoder substore."""
    graph = archs.build_omnia_net(_arch_2d(cfg))
    store = init_store(graph, seed=seed, dtype=np.float64)
    cases = synthetic.sphere_batch(cfg.extents_2d, cfg.n_cases, seed=seed)
    schedule = ExpDecaySchedule(lr0=cfg.lr, factor=1.0, floor=1e-6)
    train_loop(graph, store, _batches_from(cases, cfg.pretrain_steps, seed),
               epochs=1, schedule=schedule)
    return archs.extract_substore(store, "enc.")


def run_arm(cfg: ExperimentConfig, encoder2d, arm: str, seed: int) -> ArmResult:
    graph = archs.build_dx_net(_arch_3d(cfg))
    store = init_store(graph, seed=seed, dtype=np.float64)
    if arm != "random":
        archs.apply_inflated_encoder(store, encoder2d, mode=arm)
    cases = synthetic.sphere_batch(cfg.extents_3d, cfg.n_cases, seed=seed + 500)
    schedule = ExpDecaySchedule(lr0=cfg.lr, factor=1.0, floor=1e-6)

    hit = {"step": None}

    def on_step(step, loss, dice):
        if hit["step"] is None and dice >= cfg.target_dice:
            hit["step"] = step

    result = train_loop(graph, store,
                        _batches_from(cases, cfg.max_steps, seed),
                        epochs=1, schedule=schedule, step_callback=on_step)
    return ArmResult(seed=seed, arm=arm, steps_to_target=hit["step"],
                     final_dice=result.final_dice)


def run_transfer_benefit(cfg: ExperimentConfig | None = None,
                         out_csv: str | None = None) -> ExperimentReport:
    cfg = cfg or ExperimentConfig()
    encoder2d = pretrain_encoder(cfg)
    report = ExperimentReport()
    for seed in cfg.seeds:
        for arm in ARMS:
            report.rows.append(run_arm(cfg, encoder2d, arm, seed))
    if out_csv:
        write_experiment_csv(report, out_csv, cfg)
    return report


def write_experiment_csv(report: ExperimentReport, path: str,
                         cfg: ExperimentConfig):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["seed", "arm", "steps_to_target", "final_dice"])
        for r in report.rows:
            w.writerow([r.seed, r.arm,
                        "" if r.steps_to_target is None else r.steps_to_target,
                        f"{r.final_dice:.6f}"])
        w.writerow([])
        w.writerow(["arm", "mean_steps_to_target (cap=%d)" % cfg.max_steps])
        for arm in ARMS:
            w.writerow([arm, f"{report.mean_steps(arm, cfg.max_steps):.2f}"])
    os.replace(tmp, path)
