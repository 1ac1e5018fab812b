"""Directed acyclic layer graphs: construction, shape inference, execution.

A graph owns no parameter values; every parameterized node references
entries of a :class:`~xdseg.store.WeightStore` by name. Execution is a
topological walk; training mode records a tape so that
:func:`run_backward` can populate per-parameter gradients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import (
    ConfigError,
    DimensionError,
    NumericFault,
    ParamLookupError,
    ValidationError,
)
from .store import WeightStore
from .tensor import ConvParams, NormParams

KINDS = (
    "input",
    "output",
    "conv",
    "tconv",
    "norm",
    "act",
    "upsample",
    "concat",
    "fold-depth",
    "unfold-depth",
)


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict[str, str] = field(default_factory=dict)  # slot -> store entry name


@dataclass
class ParamSpec:
    name: str
    role: str
    shape: tuple[int, ...]
    rank: int
    init: str = "he"  # he | zeros | ones


class NetworkGraph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._index: dict[str, Node] = {}
        self.entry: str | None = None
        self.exit: str | None = None
        self.param_specs: list[ParamSpec] = []

    def add(self, node: Node) -> str:
        if node.kind not in KINDS:
            raise ConfigError(f"unknown node kind {node.kind!r}")
        if node.id in self._index:
            raise ValidationError(f"duplicate node id {node.id!r}")
        for pred in node.inputs:
            if pred not in self._index:
                raise ValidationError(
                    f"node {node.id!r} references unknown predecessor {pred!r}"
                )
        self.nodes.append(node)
        self._index[node.id] = node
        return node.id

    def node(self, node_id: str) -> Node:
        return self._index[node_id]

    def declare_param(self, spec: ParamSpec):
        if any(s.name == spec.name for s in self.param_specs):
            raise ValidationError(f"duplicate parameter name {spec.name!r}")
        self.param_specs.append(spec)

    def validate(self):
        if self.entry is None or self.exit is None:
            raise ValidationError("graph must declare entry and exit nodes")
        declared = {s.name for s in self.param_specs}
        for node in self.nodes:
            for slot, name in node.params.items():
                if name not in declared:
                    raise ValidationError(
                        f"node {node.id!r} slot {slot!r} references "
                        f"undeclared parameter {name!r}"
                    )

    def to_json(self) -> str:
        """Deterministic JSON description for diffing and docs."""
        doc = {
            "entry": self.entry,
            "exit": self.exit,
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "inputs": n.inputs,
                    "attrs": {k: n.attrs[k] for k in sorted(n.attrs)},
                    "params": {k: n.params[k] for k in sorted(n.params)},
                }
                for n in self.nodes
            ],
            "params": [
                {
                    "name": s.name,
                    "role": s.role,
                    "shape": list(s.shape),
                    "rank": s.rank,
                }
                for s in self.param_specs
            ],
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def init_store(graph: NetworkGraph, seed: int = 0, dtype=np.float32) -> WeightStore:
    """He-initialized weight store matching the graph's parameter manifest."""
    rng = np.random.default_rng(seed)
    store = WeightStore(meta={"source": f"random-init(seed={seed})"})
    for spec in graph.param_specs:
        if spec.init == "zeros":
            arr = np.zeros(spec.shape, dtype=dtype)
        elif spec.init == "ones":
            arr = np.ones(spec.shape, dtype=dtype)
        else:
            fan_in = int(np.prod(spec.shape[1:])) if len(spec.shape) > 1 else 1
            std = np.sqrt(2.0 / max(fan_in, 1))
            arr = (std * rng.standard_normal(spec.shape)).astype(dtype)
        store.add(spec.name, spec.role, arr, spec.rank)
    return store


def _conv_params(node: Node, store: WeightStore) -> ConvParams:
    try:
        kernel = store[node.params["kernel"]]
        bias = store[node.params["bias"]] if "bias" in node.params else None
    except KeyError as exc:
        raise ParamLookupError(
            f"node {node.id!r}: missing parameter {exc.args[0]!r}"
        ) from exc
    return ConvParams(
        kernel=kernel,
        bias=bias,
        stride=tuple(node.attrs["stride"]),
        padding=tuple(node.attrs["padding"]),
    )


def _norm_params(node: Node, store: WeightStore) -> NormParams:
    try:
        gamma = store[node.params["gamma"]]
        beta = store[node.params["beta"]]
        rm = store[node.params["running_mean"]] if "running_mean" in node.params else None
        rv = store[node.params["running_var"]] if "running_var" in node.params else None
    except KeyError as exc:
        raise ParamLookupError(
            f"node {node.id!r}: missing parameter {exc.args[0]!r}"
        ) from exc
    return NormParams(
        gamma=gamma,
        beta=beta,
        mode=node.attrs["mode"],
        epsilon=node.attrs.get("eps", 1e-5),
        running_mean=rm,
        running_var=rv,
    )


def infer_shapes(graph: NetworkGraph, entry_shape, store: WeightStore) -> dict:
    """Statically derive every node's output shape from the entry shape."""
    shapes: dict[str, tuple[int, ...]] = {}
    for node in graph.nodes:
        if node.kind == "input":
            shapes[node.id] = tuple(entry_shape)
            continue
        ins = [shapes[i] for i in node.inputs]
        if node.kind in ("output", "act"):
            shapes[node.id] = ins[0]
        elif node.kind == "conv":
            p = _conv_params(node, store)
            if ins[0][1] != p.in_channels:
                raise DimensionError(
                    f"node {node.id!r}: input channels {ins[0][1]} != {p.in_channels}"
                )
            shapes[node.id] = (ins[0][0], p.out_channels) + ops.conv_out_shape(
                ins[0][2:], p
            )
        elif node.kind == "tconv":
            p = _conv_params(node, store)
            shapes[node.id] = (ins[0][0], p.kernel.shape[1]) + ops.tconv_out_shape(
                ins[0][2:], p
            )
        elif node.kind == "norm":
            shapes[node.id] = ins[0]
        elif node.kind == "upsample":
            f = node.attrs["factor"]
            shapes[node.id] = ins[0][:2] + tuple(
                n * fi for n, fi in zip(ins[0][2:], f)
            )
        elif node.kind == "concat":
            base = ins[0]
            for s in ins[1:]:
                if s[0] != base[0] or s[2:] != base[2:]:
                    raise DimensionError(
                        f"node {node.id!r}: concat mismatch {base} vs {s}"
                    )
            shapes[node.id] = (base[0], sum(s[1] for s in ins)) + base[2:]
        elif node.kind == "fold-depth":
            b, c, d, h, w = ins[0]
            shapes[node.id] = (b * d, c, h, w)
        elif node.kind == "unfold-depth":
            bd, c, h, w = ins[0]
            d = node.attrs["depth"]
            shapes[node.id] = (bd // d, c, d, h, w)
        else:  # pragma: no cover
            raise ConfigError(f"unhandled kind {node.kind!r}")
    return shapes


class Tape:
    """Execution record for one training-mode forward pass."""

    def __init__(self, graph: NetworkGraph, store: WeightStore):
        self.graph = graph
        self.store = store
        self.ctx: dict[str, object] = {}
        self.outputs: dict[str, np.ndarray] = {}


def run_graph(
    graph: NetworkGraph,
    store: WeightStore,
    x: np.ndarray,
    mode: str = "infer",
    update_stats: bool = False,
    stats_momentum: float = 0.1,
    frozen_prefixes: tuple[str, ...] = (),
):
    """Execute the graph on ``x``. Returns ``(output, tape)``.

    ``mode='train'`` records a tape for :func:`run_backward` and uses batch
    statistics in batch-norm nodes; with ``update_stats`` the running buffers
    in the store are folded toward the batch statistics (entries under a
    frozen prefix are left untouched).
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown mode {mode!r}")
    training = mode == "train"
    tape = Tape(graph, store)
    values = tape.outputs
    for node in graph.nodes:
        if node.kind == "input":
            out = x
            ctx = None
        else:
            ins = [values[i] for i in node.inputs]
            if node.kind == "output":
                out, ctx = ins[0], None
            elif node.kind == "conv":
                out, ctx = ops.conv_forward(ins[0], _conv_params(node, store))
            elif node.kind == "tconv":
                out, ctx = ops.transposed_conv_forward(
                    ins[0], _conv_params(node, store)
                )
            elif node.kind == "norm":
                p = _norm_params(node, store)
                out, ctx = ops.normalize_forward(ins[0], p, training=training)
                if (
                    training
                    and update_stats
                    and p.mode == "batch"
                    and "running_mean" in node.params
                    and not any(
                        node.params["gamma"].startswith(pref)
                        for pref in frozen_prefixes
                    )
                ):
                    _, _, _, _, _, mean, var = ctx
                    m = stats_momentum
                    rm = store[node.params["running_mean"]]
                    rv = store[node.params["running_var"]]
                    store[node.params["running_mean"]] = (
                        (1 - m) * rm + m * mean.reshape(-1)
                    ).astype(rm.dtype)
                    store[node.params["running_var"]] = (
                        (1 - m) * rv + m * var.reshape(-1)
                    ).astype(rv.dtype)
            elif node.kind == "act":
                out, ctx = ops.activation_forward(ins[0], node.attrs["fn"])
            elif node.kind == "upsample":
                out, ctx = ops.nearest_upsample_forward(ins[0], node.attrs["factor"])
            elif node.kind == "concat":
                out, ctx = ops.concat_channels_forward(ins)
            elif node.kind == "fold-depth":
                out, ctx = ops.fold_depth_forward(ins[0])
            elif node.kind == "unfold-depth":
                out, ctx = ops.unfold_depth_forward(ins[0], node.attrs["depth"])
            else:  # pragma: no cover
                raise ConfigError(f"unhandled kind {node.kind!r}")
        if not np.all(np.isfinite(out)):
            raise NumericFault(f"non-finite values produced by node {node.id!r}")
        values[node.id] = out
        if training:
            tape.ctx[node.id] = ctx
    return values[graph.exit], tape


def run_backward(
    tape: Tape,
    grad_out: np.ndarray,
    frozen_prefixes: tuple[str, ...] = (),
):
    """Reverse pass over a recorded tape.

    Returns ``(param_grads, grad_x)`` where ``param_grads`` maps store entry
    names to gradient arrays (frozen prefixes omitted) and ``grad_x`` is the
    gradient with respect to the entry tensor.
    """
    graph, store = tape.graph, tape.store
    node_grads: dict[str, np.ndarray] = {graph.exit: grad_out}
    param_grads: dict[str, np.ndarray] = {}

    def accumulate_param(name: str, g: np.ndarray):
        if any(name.startswith(p) for p in frozen_prefixes):
            return
        if name in param_grads:
            param_grads[name] = param_grads[name] + g
        else:
            param_grads[name] = g

    def accumulate_node(node_id: str, g: np.ndarray):
        if node_id in node_grads:
            node_grads[node_id] = node_grads[node_id] + g
        else:
            node_grads[node_id] = g

    grad_x = None
    for node in reversed(graph.nodes):
        if node.id not in node_grads:
            continue
        g = node_grads[node.id]
        ctx = tape.ctx[node.id]
        if node.kind == "input":
            grad_x = g
        elif node.kind == "output":
            accumulate_node(node.inputs[0], g)
        elif node.kind == "conv":
            gx, gk, gb = ops.conv_backward(ctx, g)
            accumulate_node(node.inputs[0], gx)
            accumulate_param(node.params["kernel"], gk)
            if gb is not None:
                accumulate_param(node.params["bias"], gb)
        elif node.kind == "tconv":
            gx, gk, gb = ops.transposed_conv_backward(ctx, g)
            accumulate_node(node.inputs[0], gx)
            accumulate_param(node.params["kernel"], gk)
            if gb is not None:
                accumulate_param(node.params["bias"], gb)
        elif node.kind == "norm":
            gx, gg, gbeta = ops.normalize_backward(ctx, g)
            accumulate_node(node.inputs[0], gx)
            accumulate_param(node.params["gamma"], gg)
            accumulate_param(node.params["beta"], gbeta)
        elif node.kind == "act":
            accumulate_node(node.inputs[0], ops.activation_backward(ctx, g))
        elif node.kind == "upsample":
            accumulate_node(node.inputs[0], ops.nearest_upsample_backward(ctx, g))
        elif node.kind == "concat":
            for pred, gpart in zip(node.inputs, ops.concat_channels_backward(ctx, g)):
                accumulate_node(pred, gpart)
        elif node.kind == "fold-depth":
            accumulate_node(node.inputs[0], ops.fold_depth_backward(ctx, g))
        elif node.kind == "unfold-depth":
            accumulate_node(node.inputs[0], ops.unfold_depth_backward(ctx, g))
    return param_grads, grad_x
