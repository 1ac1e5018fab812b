"""Training and inference engines tying the modules together."""
from __future__ import annotations

import csv
import os
import shutil
from dataclasses import dataclass, field

import numpy as np

from . import archs, data, labels, synthetic
from .config import RunConfig
from .errors import ConfigError, NumericFault, ValidationError
from .graph import NetworkGraph, init_store, run_backward, run_graph
from .losses import LossConfig, compound_loss, dice_score_term
from .optim import LookAhead, Nadam
from .store import WeightStore, load_checkpoint, save_checkpoint

TRAINABLE_ROLES = ("conv-kernel", "conv-bias", "norm-gamma", "norm-beta")


def build_network(cfg: RunConfig) -> tuple[NetworkGraph, WeightStore]:
    """Build the configured architecture and its initial weight store."""
    if cfg.net == "omnia":
        graph = archs.build_omnia_net(cfg.arch)
    elif cfg.net == "ds":
        graph = archs.build_ds_net(cfg.arch)
    elif cfg.net == "dx":
        graph = archs.build_dx_net(cfg.arch)
    else:
        raise ConfigError(f"unknown net {cfg.net!r}")
    store = init_store(graph, seed=cfg.seed, dtype=cfg.dtype())
    if cfg.init_checkpoint:
        source = load_checkpoint(cfg.init_checkpoint).astype(cfg.dtype())
        if cfg.net == "ds":
            archs.apply_weight_transfer(store, source)
        elif cfg.net == "dx":
            mode = "replicate" if cfg.init_mode == "transfer" else cfg.init_mode
            archs.apply_inflated_encoder(store, source, mode=mode)
        else:
            archs.transfer_weights(store, source, prefix="enc.")
    return graph, store


def frozen_prefixes(cfg: RunConfig) -> tuple[str, ...]:
    if not cfg.frozen_encoder:
        return ()
    return ("enc2d.",) if cfg.net == "ds" else ("enc.",)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_dice: float


@dataclass
class TrainResult:
    history: list[EpochLog] = field(default_factory=list)
    steps: int = 0

    @property
    def final_dice(self) -> float:
        return self.history[-1].train_dice if self.history else 0.0


def train_loop(
    graph: NetworkGraph,
    store: WeightStore,
    batches,
    *,
    epochs: int,
    schedule,
    loss_cfg: LossConfig | None = None,
    betas=(0.95, 0.99),
    optim_epsilon: float = 1e-8,
    lookahead_k: int = 6,
    lookahead_alpha: float = 0.5,
    frozen: tuple[str, ...] = (),
    step_callback=None,
    optimizer_state: dict | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Generic epoch/step loop: forward, compound loss, backward, Nadam,
    LookAhead, schedule. ``batches(epoch)`` yields (input, target) pairs.

    Updates the store in place; returns per-epoch history. The optimizer is
    returned alongside in ``result.optimizer`` for state checkpointing.
    """
    loss_cfg = loss_cfg or LossConfig()
    trainable = [
        s.name for s in graph.param_specs
        if s.role in TRAINABLE_ROLES and not any(s.name.startswith(p) for p in frozen)
    ]
    nadam = Nadam(betas=betas, epsilon=optim_epsilon)
    if optimizer_state:
        nadam.load_state_arrays(optimizer_state)
    lookahead = LookAhead({n: store[n] for n in trainable},
                          k=lookahead_k, alpha=lookahead_alpha)
    result = TrainResult()
    train_score = None
    for epoch in range(start_epoch, start_epoch + epochs):
        nadam.lr = schedule.lr_at(epoch, train_score)
        losses, dices = [], []
        for step, (x, y) in enumerate(batches(epoch)):
            out, tape = run_graph(graph, store, x, mode="train",
                                  update_stats=True, frozen_prefixes=frozen)
            loss, grad_pred = compound_loss(out, y, loss_cfg)
            if not np.isfinite(loss):
                raise NumericFault(
                    f"non-finite loss at epoch {epoch}, step {step}"
                )
            grads, _ = run_backward(tape, grad_pred, frozen_prefixes=frozen)
            params = {n: store[n] for n in trainable}
            # parameters untouched by this pass keep zero gradient
            for n in trainable:
                grads.setdefault(n, np.zeros_like(params[n]))
            params = nadam.step(params, grads)
            params = lookahead.step(params)
            for n, v in params.items():
                store[n] = v
            losses.append(loss)
            dices.append(dice_score_term(out, y))
            result.steps += 1
            if step_callback is not None:
                step_callback(result.steps, loss, dices[-1])
        train_score = float(np.mean(dices)) if dices else 0.0
        result.history.append(EpochLog(
            epoch=epoch, lr=nadam.lr,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            train_dice=train_score,
        ))
    result.optimizer = nadam  # type: ignore[attr-defined]
    return result


def _synthetic_samples(cfg: RunConfig, dtype):
    extents = cfg.extents or ((64, 64) if cfg.synthetic == "sphere2d"
                              else (32, 32, 32))
    cases = synthetic.sphere_batch(extents, cfg.n_cases, seed=cfg.seed)
    samples = []
    for image, mask in cases:
        x = image[None].astype(dtype)  # (1, 1, *extents)
        y = mask[None, None].astype(dtype)
        samples.append((x, y))
    return samples


def _manifest_samples(cfg: RunConfig, dtype):
    rows = data.read_manifest(cfg.manifest)
    samples = []
    for row in rows:
        if row.label_path is None:
            raise ValidationError(f"case {row.case_id}: training needs labels")
        vol = data.load_volume(row.image_paths, row.label_path,
                               case_id=row.case_id, dtype=dtype)
        samples.append(vol)
    return samples


def _prepare_case(vol: data.LabeledVolume, cfg: RunConfig, epoch: int,
                  dtype, train: bool):
    if cfg.normalize == "zscore":
        vol = data.zscore_nonzero(vol)
    elif cfg.normalize == "sample":
        vol = data.sample_normalize(vol)
    if train and cfg.augment:
        seed = int(np.random.default_rng(
            (cfg.seed, epoch, hash(vol.case_id) & 0xFFFF)).integers(2 ** 31))
        vol = data.augment(vol, cfg.augment_config(), seed=seed)
    if cfg.patch_size:
        seed = int(np.random.default_rng(
            (cfg.seed, epoch, 7, hash(vol.case_id) & 0xFFFF)).integers(2 ** 31))
        vol, _ = data.extract_patch(vol, cfg.patch_size,
                                    policy=cfg.patch_policy if train else "center",
                                    seed=seed)
    x = vol.image[None].astype(dtype)
    y = None
    if vol.labels is not None:
        if cfg.arch.n_classes == 3:
            y = labels.region_remap(vol.labels).stacked()[None].astype(dtype)
        else:
            y = (vol.labels > 0)[None, None].astype(dtype)
    return x, y


def train_run(cfg: RunConfig, resume: str | None = None) -> str:
    """Execute a full training run; returns the run directory."""
    dtype = cfg.dtype()
    os.makedirs(cfg.out_dir, exist_ok=True)
    graph, store = build_network(cfg)
    frozen = frozen_prefixes(cfg)

    start_epoch = 0
    optimizer_state = None
    if resume:
        store = load_checkpoint(os.path.join(resume, "final.ckpt")).astype(dtype)
        log_path = os.path.join(resume, "log.csv")
        with open(log_path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        start_epoch = int(rows[-1]["epoch"]) + 1 if rows else 0
        opt_path = os.path.join(resume, "optimizer.npz")
        if os.path.exists(opt_path):
            with np.load(opt_path) as z:
                optimizer_state = {k: z[k] for k in z.files}

    if cfg.synthetic:
        raw = _synthetic_samples(cfg, dtype)

        def batches(epoch):
            if cfg.steps_per_epoch is None:
                return list(raw)
            rng = np.random.default_rng((cfg.seed, epoch))
            return [raw[int(rng.integers(len(raw)))]
                    for _ in range(cfg.steps_per_epoch)]
    else:
        volumes = _manifest_samples(cfg, dtype)

        def batches(epoch):
            return [
                _prepare_case(v, cfg, epoch, dtype, train=True)
                for v in volumes
            ]

    schedule = cfg.make_schedule()
    best_dice = -1.0
    run_dir = cfg.out_dir

    result = train_loop(
        graph, store, batches,
        epochs=cfg.epochs, schedule=schedule, loss_cfg=cfg.loss,
        betas=cfg.betas, optim_epsilon=cfg.optim_epsilon,
        lookahead_k=cfg.lookahead_k, lookahead_alpha=cfg.lookahead_alpha,
        frozen=frozen, optimizer_state=optimizer_state,
        start_epoch=start_epoch,
    )

    mode = "a" if resume else "w"
    with open(os.path.join(run_dir, "log.csv"), mode, newline="",
              encoding="utf-8") as f:
        w = csv.writer(f)
        if not resume:
            w.writerow(["epoch", "lr", "train_loss", "train_dice"])
        for row in result.history:
            w.writerow([row.epoch, f"{row.lr:.8g}", f"{row.train_loss:.8g}",
                        f"{row.train_dice:.8g}"])
            if row.train_dice > best_dice:
                best_dice = row.train_dice

    save_checkpoint(store, os.path.join(run_dir, "final.ckpt"))
    # best-by-train-dice alias; with a single terminal save they coincide
    save_checkpoint(store, os.path.join(run_dir, "best.ckpt"))
    np.savez(os.path.join(run_dir, "optimizer.npz"),
             **result.optimizer.state_arrays())  # type: ignore[attr-defined]
    if cfg.source_path:
        shutil.copyfile(cfg.source_path, os.path.join(run_dir, "config.ini"))
    with open(os.path.join(run_dir, "graph.json"), "w", encoding="utf-8") as f:
        f.write(graph.to_json())
    return run_dir


def predict_volume(graph: NetworkGraph, store: WeightStore, image: np.ndarray,
                   patch_size=None, stride=None) -> np.ndarray:
    """Patched forward pass with overlap-averaged pre-threshold probabilities.

    ``image`` is (channels, *spatial); returns (classes, *spatial).
    """
    spatial = image.shape[1:]
    if patch_size is None:
        out, _ = run_graph(graph, store, image[None], mode="infer")
        return out[0]
    patch_size = tuple(patch_size)
    acc = None
    count = np.zeros(spatial, dtype=np.float64)
    for anchor in data.tile_positions(spatial, patch_size, stride):
        box = tuple(slice(o, o + s) for o, s in zip(anchor, patch_size))
        tile = image[(slice(None),) + box]
        out, _ = run_graph(graph, store, tile[None], mode="infer")
        if acc is None:
            acc = np.zeros((out.shape[1],) + spatial, dtype=np.float64)
        acc[(slice(None),) + box] += out[0]
        count[box] += 1.0
    return (acc / count).astype(image.dtype)


def infer_run(cfg: RunConfig, checkpoint: str, manifest_path: str,
              out_dir: str) -> list[str]:
    """Segment every manifest case and write uint8 NIfTI masks."""
    from .io import write_nifti

    dtype = cfg.dtype()
    graph, _ = build_network(cfg)
    store = load_checkpoint(checkpoint).astype(dtype)
    expected = {s.name for s in graph.param_specs}
    missing = sorted(expected - set(store.names()))
    if missing:
        raise ValidationError(f"checkpoint missing entries: {missing[0]} "
                              f"(+{len(missing) - 1} more)")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for row in data.read_manifest(manifest_path):
        vol = data.load_volume(row.image_paths, row.label_path,
                               case_id=row.case_id, dtype=dtype)
        cropped, record = data.crop_nonzero(vol)
        if cfg.normalize == "zscore":
            cropped = data.zscore_nonzero(cropped)
        elif cfg.normalize == "sample":
            cropped = data.sample_normalize(cropped)
        prob = predict_volume(graph, store, cropped.image,
                              patch_size=cfg.patch_size)
        if cfg.arch.n_classes == 3 and cfg.arch.output_activation == "sigmoid":
            binary = labels.binarize(prob, cfg.threshold)
            ch = labels.RegionChannels(wt=binary[0], tc=binary[1], et=binary[2])
            mask, _ = labels.reconstruct_labels(
                ch, et_min_volume=cfg.et_min_volume, spacing=vol.spacing)
        elif prob.shape[0] == 1:
            mask = labels.binarize(prob[0], cfg.threshold).astype(np.uint8)
        else:
            mask = prob.argmax(axis=0).astype(np.uint8)
        full = data.reembed(mask.astype(np.uint8), record)
        out_path = os.path.join(out_dir, f"{row.case_id}.nii.gz")
        write_nifti(out_path, full, spacing=vol.spacing)
        written.append(out_path)
    return written
