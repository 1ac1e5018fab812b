"""Builders for the three segmentation architectures.

All three share the same reduced encoder ("Eff-Mini"): a stack of stages,
each a stride-2 3x3 convolution block followed by a stride-1 block, both
norm + SiLU activated. It preserves the stage/skip topology of the full
pretrained encoders it stands in for, at desk scale.

Naming is load-bearing: the encoder entries of a 2D network (prefix
stripped) form a standalone store that can be transferred verbatim into
DS-Net's embedded 2D section, or depth-inflated into DX-Net's 3D encoder.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ValidationError
from .graph import NetworkGraph, Node, ParamSpec
from .inflate import InflationPlan, inflate_store, transfer_weights
from .store import WeightStore


@dataclass
class ArchConfig:
    in_channels: int = 1
    n_classes: int = 1
    input_extents: tuple[int, ...] = (64, 64)
    stem_filters: int = 16
    encoder_widths: tuple[int, ...] = (8, 16, 24, 32)
    output_activation: str = "softmax"
    # DS-Net only
    depth_fold: int = 8
    depth_widths: tuple[int, ...] = ()  # 3D intra-slice widths; last = channel budget
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.depth_widths = tuple(self.depth_widths)
        self.input_extents = tuple(self.input_extents)
        if self.in_channels < 1 or self.n_classes < 1:
            raise ConfigError("in_channels and n_classes must be positive")
        if self.output_activation not in ("softmax", "sigmoid"):
            raise ConfigError(
                f"unknown output activation {self.output_activation!r}"
            )

    def require_divisible(self, extents: tuple[int, ...]):
        f = 2 ** len(self.encoder_widths)
        for n in extents:
            if n % f != 0:
                raise ConfigError(
                    f"in-plane extent {n} must be divisible by the total "
                    f"downsampling factor {f}"
                )


class _Builder:
    """Adds parameterized layer chains to a graph with consistent naming."""

    def __init__(self, graph: NetworkGraph, rank: int, eps: float):
        self.g = graph
        self.rank = rank
        self.eps = eps
        self._n = 0

    def _nid(self, stem: str) -> str:
        self._n += 1
        return f"{stem}#{self._n}"

    def conv(self, name, x, in_ch, out_ch, k=3, stride=1, pad=None, bias=False,
             rank=None, transposed=False):
        rank = rank or self.rank
        if pad is None:
            pad = (k - 1) // 2
        if transposed:
            kshape = (in_ch, out_ch) + (k,) * rank
        else:
            kshape = (out_ch, in_ch) + (k,) * rank
        self.g.declare_param(ParamSpec(f"{name}.kernel", "conv-kernel", kshape, rank))
        params = {"kernel": f"{name}.kernel"}
        if bias:
            self.g.declare_param(
                ParamSpec(f"{name}.bias", "conv-bias", (out_ch,), rank, init="zeros")
            )
            params["bias"] = f"{name}.bias"
        return self.g.add(Node(
            id=self._nid(name),
            kind="tconv" if transposed else "conv",
            inputs=[x],
            attrs={"stride": (stride,) * rank, "padding": (pad,) * rank},
            params=params,
        ))

    def norm(self, name, x, ch, mode, rank=None):
        rank = rank or self.rank
        self.g.declare_param(ParamSpec(f"{name}.gamma", "norm-gamma", (ch,), rank, init="ones"))
        self.g.declare_param(ParamSpec(f"{name}.beta", "norm-beta", (ch,), rank, init="zeros"))
        params = {"gamma": f"{name}.gamma", "beta": f"{name}.beta"}
        if mode == "batch":
            self.g.declare_param(ParamSpec(
                f"{name}.running_mean", "norm-running-mean", (ch,), rank, init="zeros"))
            self.g.declare_param(ParamSpec(
                f"{name}.running_var", "norm-running-var", (ch,), rank, init="ones"))
            params["running_mean"] = f"{name}.running_mean"
            params["running_var"] = f"{name}.running_var"
        return self.g.add(Node(
            id=self._nid(name), kind="norm", inputs=[x],
            attrs={"mode": mode, "eps": self.eps}, params=params,
        ))

    def act(self, x, fn):
        return self.g.add(Node(id=self._nid(fn), kind="act", inputs=[x],
                               attrs={"fn": fn}))

    def block(self, name, x, in_ch, out_ch, norm_mode, fn, k=3, stride=1, rank=None):
        x = self.conv(f"{name}", x, in_ch, out_ch, k=k, stride=stride, rank=rank)
        x = self.norm(f"{name}.norm", x, out_ch, norm_mode, rank=rank)
        return self.act(x, fn)

    def upsample(self, x, factor):
        return self.g.add(Node(id=self._nid("up"), kind="upsample", inputs=[x],
                               attrs={"factor": tuple(factor)}))

    def concat(self, xs):
        return self.g.add(Node(id=self._nid("cat"), kind="concat", inputs=list(xs)))


def _encoder(b: _Builder, prefix: str, x: str, in_ch: int, widths, norm_mode: str,
             rank=None):
    """Eff-Mini encoder stages; returns (skip ids per stage, bottleneck id)."""
    skips = []
    prev = in_ch
    for i, w in enumerate(widths, start=1):
        x = b.block(f"{prefix}s{i}.c1", x, prev, w, norm_mode, "silu", stride=2,
                    rank=rank)
        x = b.block(f"{prefix}s{i}.c2", x, w, w, norm_mode, "silu", rank=rank)
        skips.append(x)
        prev = w
    return skips, x


def _decoder_level(b: _Builder, prefix: str, x: str, in_ch: int, skip: str,
                   skip_ch: int, out_ch: int, norm_mode: str, fn: str, rank=None):
    x = b.upsample(x, (2,) * (rank or b.rank))
    x = b.concat([x, skip])
    x = b.block(f"{prefix}.c1", x, in_ch + skip_ch, out_ch, norm_mode, fn, rank=rank)
    x = b.block(f"{prefix}.c2", x, out_ch, out_ch, norm_mode, fn, rank=rank)
    return x


def _head(b: _Builder, x: str, in_ch: int, n_classes: int, activation: str,
          rank=None):
    x = b.conv("head", x, in_ch, n_classes, k=1, bias=True, rank=rank)
    x = b.act(x, activation)
    return b.g.add(Node(id="out", kind="output", inputs=[x]))


def build_omnia_net(cfg: ArchConfig) -> NetworkGraph:
    """2D encoder-decoder with a full-scale stem skip.

    Stem: one 3x3 convolution block at full resolution whose output feeds
    both the encoder and a skip into the last decoder level. Decoder levels:
    nearest-neighbor upsampling, concatenation, two 3x3 convolution blocks
    with batch norm + ReLU.
    """
    if len(cfg.input_extents) != 2:
        raise ConfigError("Omnia-Net requires 2D input extents")
    cfg.require_divisible(cfg.input_extents)
    g = NetworkGraph()
    b = _Builder(g, rank=2, eps=cfg.norm_eps)
    g.entry = g.add(Node(id="in", kind="input"))
    stem = b.block("stem", g.entry, cfg.in_channels, cfg.stem_filters,
                   "batch", "relu")
    skips, x = _encoder(b, "enc.", stem, cfg.stem_filters, cfg.encoder_widths,
                        "batch")
    widths = cfg.encoder_widths
    prev = widths[-1]
    for j in range(len(widths) - 1, 0, -1):
        x = _decoder_level(b, f"dec.l{j}", x, prev, skips[j - 1], widths[j - 1],
                           widths[j - 1], "batch", "relu")
        prev = widths[j - 1]
    x = _decoder_level(b, "dec.l0", x, prev, stem, cfg.stem_filters,
                       cfg.stem_filters, "batch", "relu")
    g.exit = _head(b, x, cfg.stem_filters, cfg.n_classes, cfg.output_activation)
    g.validate()
    return g


def _ds_depth_stages(cfg: ArchConfig) -> tuple[int, tuple[int, ...]]:
    df = cfg.depth_fold
    if df < 2 or (df & (df - 1)) != 0:
        raise ConfigError(f"depth_fold must be a power of two >= 2, got {df}")
    m = df.bit_length() - 1
    widths = cfg.depth_widths or (8,) * (m - 1) + (3,)
    if len(widths) != m:
        raise ConfigError(
            f"depth_widths must have log2(depth_fold) = {m} entries, got {len(widths)}"
        )
    return m, tuple(widths)


def build_ds_net(cfg: ArchConfig) -> NetworkGraph:
    """Dimension-stacked 3D network with an embedded 2D core.

    A 3D intra-slice encoder compresses depth to a small channel budget,
    the residual depth slabs are folded into the batch axis, a 2D
    encoder-decoder (weight-transferable, batch norm + ReLU decoder)
    processes the slabs, and a 3D decoder with instance norm restores the
    volume. The 2D section's output is not activated.
    """
    if len(cfg.input_extents) != 3:
        raise ConfigError("DS-Net requires 3D input extents")
    d, h, w = cfg.input_extents
    cfg.require_divisible((h, w))
    m, dwidths = _ds_depth_stages(cfg)
    if d % cfg.depth_fold != 0:
        raise ConfigError(
            f"input depth {d} must be divisible by depth_fold {cfg.depth_fold}"
        )
    budget = dwidths[-1]
    residual_depth = d // cfg.depth_fold

    g = NetworkGraph()
    b = _Builder(g, rank=3, eps=cfg.norm_eps)
    g.entry = g.add(Node(id="in", kind="input"))

    # 3D intra-slice encoder: depth-strided convolution blocks
    x = g.entry
    prev = cfg.in_channels
    skips3d = []
    for i, wch in enumerate(dwidths, start=1):
        x = b.conv(f"enc3d.d{i}", x, prev, wch, k=3)
        x = b.norm(f"enc3d.d{i}.norm", x, wch, "instance")
        x = b.act(x, "silu")
        skips3d.append(x)
        x = g.add(Node(id=f"enc3d.pool{i}", kind="conv", inputs=[x],
                       attrs={"stride": (2, 1, 1), "padding": (1, 1, 1)},
                       params={"kernel": f"enc3d.pool{i}.kernel"}))
        g.declare_param(ParamSpec(f"enc3d.pool{i}.kernel", "conv-kernel",
                                  (wch, wch, 3, 3, 3), 3))
        prev = wch

    fold = g.add(Node(id="fold", kind="fold-depth", inputs=[x]))

    # embedded 2D section: transferable encoder + batch-norm/ReLU decoder
    skips2d, y = _encoder(b, "enc2d.", fold, budget, cfg.encoder_widths, "batch",
                          rank=2)
    widths = cfg.encoder_widths
    prev2 = widths[-1]
    for j in range(len(widths) - 1, 0, -1):
        y = _decoder_level(b, f"dec2d.l{j}", y, prev2, skips2d[j - 1],
                           widths[j - 1], widths[j - 1], "batch", "relu", rank=2)
        prev2 = widths[j - 1]
    y = _decoder_level(b, "dec2d.l0", y, prev2, fold, budget, widths[0],
                       "batch", "relu", rank=2)
    y = b.conv("dec2d.out", y, widths[0], budget, k=1, bias=True, rank=2)

    z = g.add(Node(id="unfold", kind="unfold-depth", inputs=[y],
                   attrs={"depth": residual_depth}))

    # 3D decoder: depth upsampling with instance norm + SiLU
    prev3 = budget
    for i in range(m, 0, -1):
        z = b.upsample(z, (2, 1, 1))
        z = b.concat([z, skips3d[i - 1]])
        wch = dwidths[i - 1] if i > 1 else dwidths[0]
        z = b.block(f"dec3d.l{i}.c1", z, prev3 + dwidths[i - 1], wch,
                    "instance", "silu")
        z = b.block(f"dec3d.l{i}.c2", z, wch, wch, "instance", "silu")
        prev3 = wch
    g.exit = _head(b, z, prev3, cfg.n_classes, cfg.output_activation)
    g.validate()
    return g


def build_dx_net(cfg: ArchConfig) -> NetworkGraph:
    """Fully-3D encoder-decoder whose encoder accepts depth-inflated 2D weights.

    Stem: full-resolution 3x3x3 convolution block (instance norm + SiLU)
    feeding a full-scale skip. Decoder levels: transposed 3D convolution,
    skip concatenation, then two 3x3x3 convolution blocks with instance
    norm + SiLU; sigmoid (or softmax) head.
    """
    if len(cfg.input_extents) != 3:
        raise ConfigError("DX-Net requires 3D input extents")
    cfg.require_divisible(cfg.input_extents)
    g = NetworkGraph()
    b = _Builder(g, rank=3, eps=cfg.norm_eps)
    g.entry = g.add(Node(id="in", kind="input"))
    stem = b.block("stem", g.entry, cfg.in_channels, cfg.stem_filters,
                   "instance", "silu")
    skips, x = _encoder(b, "enc.", stem, cfg.stem_filters, cfg.encoder_widths,
                        "instance")
    widths = cfg.encoder_widths
    prev = widths[-1]
    levels = [(widths[j - 1], skips[j - 1], widths[j - 1])
              for j in range(len(widths) - 1, 0, -1)]
    levels.append((cfg.stem_filters, stem, cfg.stem_filters))
    for idx, (out_ch, skip, skip_ch) in enumerate(levels):
        x = b.conv(f"dec.l{idx}.up", x, prev, out_ch, k=2, stride=2, pad=0,
                   transposed=True)
        x = b.concat([x, skip])
        x = b.block(f"dec.l{idx}.c1", x, out_ch + skip_ch, out_ch,
                    "instance", "silu")
        x = b.block(f"dec.l{idx}.c2", x, out_ch, out_ch, "instance", "silu")
        prev = out_ch
    g.exit = _head(b, x, prev, cfg.n_classes, cfg.output_activation)
    g.validate()
    return g


def build_encoder_2d(in_ch: int, widths, norm_mode: str = "batch",
                     eps: float = 1e-5) -> NetworkGraph:
    """Standalone 2D Eff-Mini encoder with unprefixed entry names.

    Its store transfers verbatim into DS-Net (prefix ``enc2d.``) or, after
    inflation, into DX-Net (prefix ``enc.``).
    """
    g = NetworkGraph()
    b = _Builder(g, rank=2, eps=eps)
    g.entry = g.add(Node(id="in", kind="input"))
    _, x = _encoder(b, "", g.entry, in_ch, widths, norm_mode)
    g.exit = g.add(Node(id="out", kind="output", inputs=[x]))
    g.validate()
    return g


def extract_substore(store: WeightStore, prefix: str) -> WeightStore:
    """Copy the entries under ``prefix`` into a new store, names stripped."""
    out = WeightStore(meta={**store.meta, "source": f"substore({prefix})"})
    for e in store.entries:
        if e.name.startswith(prefix):
            out.add(e.name[len(prefix):], e.role, store.blobs[e.name].copy(), e.rank)
    if not out.entries:
        raise ValidationError(f"no entries under prefix {prefix!r}")
    return out


def apply_weight_transfer(ds_store: WeightStore, encoder2d: WeightStore) -> list[str]:
    """Load a 2D encoder store into DS-Net's embedded 2D section, unaltered."""
    return transfer_weights(ds_store, encoder2d, prefix="enc2d.")


def apply_inflated_encoder(
    dx_store: WeightStore, encoder2d: WeightStore, mode: str = "replicate"
) -> list[str]:
    """Initialize DX-Net's 3D encoder from a 2D encoder store by inflation.

    Encoder kernels are all 3x3, so the target depth is 3 throughout. Batch
    norm affine parameters carry over to the instance-norm layers; running
    statistics are dropped.
    """
    plan = InflationPlan(kd=3, mode=mode, norm_transfer=True)
    inflated = inflate_store(encoder2d, plan)
    names = transfer_weights(dx_store, inflated, prefix="enc.")
    dx_store.meta["inflation"] = mode
    dx_store.meta["depth_used"] = 3
    return names


def count_params(graph: NetworkGraph) -> int:
    return int(sum(np.prod(s.shape) for s in graph.param_specs
                   if s.role in ("conv-kernel", "conv-bias", "norm-gamma",
                                 "norm-beta")))
