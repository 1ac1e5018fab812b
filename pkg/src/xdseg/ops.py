"""Forward and reverse-mode implementations of the layer primitives.

Every forward function returns ``(out, ctx)`` where ``ctx`` carries exactly
what the matching backward function needs. Backwards take ``(ctx, grad_out)``
and return gradients in the order of the forward's differentiable inputs.
Convolution uses the cross-correlation convention (no kernel flip) with zero
padding, as in every mainstream deep-learning framework.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import ConvParams, NormParams


def _check_conv_input(x: np.ndarray, p: ConvParams):
    if x.ndim != 2 + p.rank:
        raise DimensionError(
            f"input rank {x.ndim} incompatible with spatial rank {p.rank}"
        )


def conv_out_shape(in_spatial, p: ConvParams) -> tuple[int, ...]:
    out = []
    for axis, (n, k, s, pad) in enumerate(
        zip(in_spatial, p.kernel_size, p.stride, p.padding)
    ):
        o = (n + 2 * pad - k) // s + 1
        if o < 1:
            raise ConfigError(
                f"non-positive output extent on spatial axis {axis}: "
                f"in={n} kernel={k} stride={s} pad={pad}"
            )
        out.append(o)
    return tuple(out)


def _pad_spatial(x: np.ndarray, padding) -> np.ndarray:
    if all(p == 0 for p in padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _tap_slices(tap, out_spatial, stride):
    return tuple(
        slice(t, t + (o - 1) * s + 1, s) for t, o, s in zip(tap, out_spatial, stride)
    )


def conv_forward(x: np.ndarray, p: ConvParams):
    """Strided zero-padded cross-correlation; bias added per output channel."""
    _check_conv_input(x, p)
    if x.shape[1] != p.in_channels:
        raise DimensionError(
            f"input channels {x.shape[1]} != kernel in_channels {p.in_channels} (axis 1)"
        )
    out_spatial = conv_out_shape(x.shape[2:], p)
    xp = _pad_spatial(x, p.padding)
    out = np.zeros((x.shape[0], p.out_channels) + out_spatial, dtype=x.dtype)
    full = (slice(None), slice(None))
    for tap in np.ndindex(*p.kernel_size):
        xs = xp[full + _tap_slices(tap, out_spatial, p.stride)]
        out += np.einsum("oc,bc...->bo...", p.kernel[full + tap], xs)
    if p.bias is not None:
        out += p.bias.reshape((1, -1) + (1,) * p.rank)
    return out, (xp, x.shape, p)


def conv_backward(ctx, grad_out: np.ndarray):
    """Returns (grad_x, grad_kernel, grad_bias); grad_bias is None when unbiased."""
    xp, x_shape, p = ctx
    out_spatial = grad_out.shape[2:]
    grad_kernel = np.zeros_like(p.kernel)
    grad_xp = np.zeros_like(xp)
    full = (slice(None), slice(None))
    sum_axes = (0,) + tuple(range(2, grad_out.ndim))
    for tap in np.ndindex(*p.kernel_size):
        sl = _tap_slices(tap, out_spatial, p.stride)
        xs = xp[full + sl]
        grad_kernel[full + tap] = np.tensordot(grad_out, xs,
                                               axes=(sum_axes, sum_axes))
        grad_xp[full + sl] += np.einsum("oc,bo...->bc...", p.kernel[full + tap], grad_out)
    crop = full + tuple(
        slice(pad, pad + n) for pad, n in zip(p.padding, x_shape[2:])
    )
    grad_x = grad_xp[crop]
    grad_bias = None
    if p.bias is not None:
        grad_bias = grad_out.sum(axis=(0,) + tuple(range(2, grad_out.ndim)))
    return grad_x, grad_kernel, grad_bias


def tconv_out_shape(in_spatial, p: ConvParams) -> tuple[int, ...]:
    out = []
    for axis, (n, k, s, pad) in enumerate(
        zip(in_spatial, p.kernel_size, p.stride, p.padding)
    ):
        o = (n - 1) * s - 2 * pad + k
        if o < 1:
            raise ConfigError(
                f"non-positive transposed-conv extent on spatial axis {axis}"
            )
        out.append(o)
    return tuple(out)


def transposed_conv_forward(x: np.ndarray, p: ConvParams):
    """Adjoint of :func:`conv_forward`.

    The kernel keeps its (first, second) = (conv-out, conv-in) channel axes,
    so here ``x`` must carry ``kernel.shape[0]`` channels and the output
    carries ``kernel.shape[1]``: transposed_conv(x, k) equals conv_backward's
    grad_x with grad_out = x.
    """
    _check_conv_input(x, p)
    if x.shape[1] != p.kernel.shape[0]:
        raise DimensionError(
            f"input channels {x.shape[1]} != kernel leading axis {p.kernel.shape[0]}"
        )
    out_spatial = tconv_out_shape(x.shape[2:], p)
    buf_spatial = tuple(o + 2 * pad for o, pad in zip(out_spatial, p.padding))
    buf = np.zeros((x.shape[0], p.kernel.shape[1]) + buf_spatial, dtype=x.dtype)
    full = (slice(None), slice(None))
    for tap in np.ndindex(*p.kernel_size):
        sl = _tap_slices(tap, x.shape[2:], p.stride)
        buf[full + sl] += np.einsum("oc,bo...->bc...", p.kernel[full + tap], x)
    crop = full + tuple(slice(pad, pad + n) for pad, n in zip(p.padding, out_spatial))
    out = buf[crop]
    if p.bias is not None:
        out = out + p.bias.reshape((1, -1) + (1,) * p.rank)
    return out, (x, p, out_spatial)


def transposed_conv_backward(ctx, grad_out: np.ndarray):
    """Returns (grad_x, grad_kernel, grad_bias)."""
    x, p, out_spatial = ctx
    gp = _pad_spatial(grad_out, p.padding)
    grad_x = np.zeros_like(x)
    grad_kernel = np.zeros_like(p.kernel)
    full = (slice(None), slice(None))
    sum_axes = (0,) + tuple(range(2, x.ndim))
    for tap in np.ndindex(*p.kernel_size):
        sl = _tap_slices(tap, x.shape[2:], p.stride)
        gs = gp[full + sl]
        grad_x += np.einsum("oc,bc...->bo...", p.kernel[full + tap], gs)
        grad_kernel[full + tap] = np.tensordot(x, gs, axes=(sum_axes, sum_axes))
    grad_bias = None
    if p.bias is not None:
        grad_bias = grad_out.sum(axis=(0,) + tuple(range(2, grad_out.ndim)))
    return grad_x, grad_kernel, grad_bias


def _norm_axes(x: np.ndarray, mode: str) -> tuple[int, ...]:
    spatial = tuple(range(2, x.ndim))
    return spatial if mode == "instance" else (0,) + spatial


def normalize_forward(x: np.ndarray, p: NormParams, training: bool = True):
    """Standardize over the mode's axes, then apply the channel affine.

    Batch mode in inference uses running statistics when available. Returns
    ``(out, ctx)``; in training batch mode the caller may fold the returned
    batch statistics (in ctx) into running buffers.
    """
    if x.shape[1] != p.channels:
        raise DimensionError(
            f"input channels {x.shape[1]} != norm channels {p.channels}"
        )
    axes = _norm_axes(x, p.mode)
    n_reduce = int(np.prod([x.shape[a] for a in axes]))
    if n_reduce < 2 and p.epsilon == 0:
        raise ConfigError(
            "single-element normalization set with epsilon 0 (division guard)"
        )
    gshape = (1, -1) + (1,) * (x.ndim - 2)
    use_running = (
        not training and p.mode == "batch" and p.running_mean is not None
    )
    if use_running:
        mean = p.running_mean.reshape(gshape)
        var = p.running_var.reshape(gshape)
    else:
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x - mean) * inv
    out = p.gamma.reshape(gshape) * xhat + p.beta.reshape(gshape)
    ctx = (xhat, inv, p, axes, use_running, mean, var)
    return out, ctx


def normalize_backward(ctx, grad_out: np.ndarray):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, inv, p, axes, use_running, _, _ = ctx
    gshape = (1, -1) + (1,) * (grad_out.ndim - 2)
    reduce_affine = (0,) + tuple(range(2, grad_out.ndim))
    grad_gamma = (grad_out * xhat).sum(axis=reduce_affine)
    grad_beta = grad_out.sum(axis=reduce_affine)
    g = grad_out * p.gamma.reshape(gshape)
    if use_running:
        return g * inv, grad_gamma, grad_beta
    gm = g.mean(axis=axes, keepdims=True)
    gxm = (g * xhat).mean(axis=axes, keepdims=True)
    grad_x = inv * (g - gm - xhat * gxm)
    return grad_x, grad_gamma, grad_beta


def sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-stable: never exponentiates a large positive argument
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_forward(x: np.ndarray, kind: str):
    if kind == "relu":
        out = np.maximum(x, 0)
        ctx = (kind, x)
    elif kind == "silu":
        s = sigmoid(x)
        out = x * s
        ctx = (kind, (x, s))
    elif kind == "sigmoid":
        out = sigmoid(x)
        ctx = (kind, out)
    elif kind == "softmax":
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=1, keepdims=True)
        ctx = (kind, out)
    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return out, ctx


def activation_backward(ctx, grad_out: np.ndarray) -> np.ndarray:
    kind, saved = ctx
    if kind == "relu":
        return grad_out * (saved > 0)
    if kind == "silu":
        x, s = saved
        return grad_out * (s + x * s * (1.0 - s))
    if kind == "sigmoid":
        y = saved
        return grad_out * y * (1.0 - y)
    # softmax: Jacobian-vector product along the channel axis
    y = saved
    dot = (grad_out * y).sum(axis=1, keepdims=True)
    return y * (grad_out - dot)


def nearest_upsample_forward(x: np.ndarray, factor):
    rank = x.ndim - 2
    if np.isscalar(factor):
        factor = (int(factor),) * rank
    factor = tuple(int(f) for f in factor)
    if len(factor) != rank:
        raise ConfigError(f"factor must have {rank} entries")
    if any(f < 1 for f in factor):
        raise ConfigError(f"upsample factor must be >= 1, got {factor}")
    out = x
    for axis, f in enumerate(factor):
        if f > 1:
            out = np.repeat(out, f, axis=axis + 2)
    return out, (x.shape, factor)


def nearest_upsample_backward(ctx, grad_out: np.ndarray) -> np.ndarray:
    x_shape, factor = ctx
    g = grad_out
    # sum gradients over each replication block, axis by axis
    for axis, f in enumerate(factor):
        if f > 1:
            n = x_shape[axis + 2]
            shape = g.shape[: axis + 2] + (n, f) + g.shape[axis + 3 :]
            g = g.reshape(shape).sum(axis=axis + 3)
    return g


def concat_channels_forward(xs: list[np.ndarray]):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise DimensionError(
                f"concat mismatch: {ref} vs {x.shape} (non-channel extents must agree)"
            )
    out = xs[0] if len(xs) == 1 else np.concatenate(xs, axis=1)
    return out, [x.shape[1] for x in xs]


def concat_channels_backward(ctx, grad_out: np.ndarray) -> list[np.ndarray]:
    widths = ctx
    if len(widths) == 1:
        return [grad_out]
    edges = np.cumsum(widths)[:-1]
    return np.split(grad_out, edges, axis=1)


def fold_depth_forward(x: np.ndarray):
    """(B, C, D, H, W) -> (B*D, C, H, W): each depth slab becomes a batch item."""
    if x.ndim != 5:
        raise DimensionError(f"fold_depth expects a 5D tensor, got rank {x.ndim}")
    b, c, d, h, w = x.shape
    out = np.ascontiguousarray(np.moveaxis(x, 2, 1)).reshape(b * d, c, h, w)
    return out, (b, c, d, h, w)


def fold_depth_backward(ctx, grad_out: np.ndarray) -> np.ndarray:
    b, c, d, h, w = ctx
    g = grad_out.reshape(b, d, grad_out.shape[1], h, w)
    return np.ascontiguousarray(np.moveaxis(g, 1, 2))


def unfold_depth_forward(x: np.ndarray, depth: int):
    """(B*D, C, H, W) -> (B, C, D, H, W), inverse of fold_depth."""
    if x.ndim != 4:
        raise DimensionError(f"unfold_depth expects a 4D tensor, got rank {x.ndim}")
    bd, c, h, w = x.shape
    if bd % depth != 0:
        raise DimensionError(f"batch {bd} not divisible by depth {depth}")
    out = np.ascontiguousarray(
        np.moveaxis(x.reshape(bd // depth, depth, c, h, w), 1, 2)
    )
    return out, None


def unfold_depth_backward(ctx, grad_out: np.ndarray) -> np.ndarray:
    b, c, d, h, w = grad_out.shape
    return np.ascontiguousarray(np.moveaxis(grad_out, 2, 1)).reshape(b * d, c, h, w)
