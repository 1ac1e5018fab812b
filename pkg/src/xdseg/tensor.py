"""Dense tensor value type and layer parameter containers.

Arrays follow the (batch, channel, *spatial) layout with 1-3 trailing
spatial axes, stored row-major. All layer math lives in :mod:`xdseg.ops`;
this module only defines the containers and their invariants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericFault

DEFAULT_DTYPE = np.float32


@dataclass
class Tensor:
    """A dense array with an optional gradient slot."""

    data: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.grad is not None and self.grad.shape != self.data.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != data shape {self.data.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def check_finite(self, context: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NumericFault(f"non-finite values in {context}")


def check_finite(a: np.ndarray, context: str):
    """Raise :class:`NumericFault` if ``a`` contains NaN or Inf."""
    if not np.all(np.isfinite(a)):
        raise NumericFault(f"non-finite values detected in {context}")


def _per_axis(value, rank: int, name: str) -> tuple[int, ...]:
    if np.isscalar(value):
        value = (int(value),) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ConfigError(f"{name} must have {rank} entries, got {len(value)}")
    return value


@dataclass
class ConvParams:
    """Convolution parameters for a 2D or 3D layer.

    ``kernel`` has shape (out_ch, in_ch, *k) for convolution. For the
    transposed convolution the same container is used but the first kernel
    axis is the operation's *input* channel count (adjoint convention).
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: int | tuple[int, ...] = 1
    padding: int | tuple[int, ...] = 0
    dilation: int | tuple[int, ...] = 1
    rank: int = field(default=0)

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        if self.rank == 0:
            self.rank = self.kernel.ndim - 2
        if self.rank not in (2, 3):
            raise DimensionError(f"spatial rank must be 2 or 3, got {self.rank}")
        if self.kernel.ndim != 2 + self.rank:
            raise DimensionError(
                f"kernel rank {self.kernel.ndim} inconsistent with spatial rank {self.rank}"
            )
        self.stride = _per_axis(self.stride, self.rank, "stride")
        self.padding = _per_axis(self.padding, self.rank, "padding")
        self.dilation = _per_axis(self.dilation, self.rank, "dilation")
        if any(s < 1 for s in self.stride):
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if any(p < 0 for p in self.padding):
            raise ConfigError(f"padding must be >= 0, got {self.padding}")
        if any(d != 1 for d in self.dilation):
            raise ConfigError("dilation is fixed to 1 in this version")
        if self.bias is not None:
            self.bias = np.asarray(self.bias)
            if self.bias.shape != (self.kernel.shape[0],):
                raise DimensionError(
                    f"bias shape {self.bias.shape} != ({self.kernel.shape[0]},)"
                )

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def kernel_size(self) -> tuple[int, ...]:
        return self.kernel.shape[2:]


@dataclass
class NormParams:
    """Affine normalization parameters (batch or instance mode)."""

    gamma: np.ndarray
    beta: np.ndarray
    mode: str = "instance"
    epsilon: float = 1e-5
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise DimensionError("gamma and beta must be equal-length vectors")
        if self.mode not in ("batch", "instance"):
            raise ConfigError(f"unknown normalization mode {self.mode!r}")
        if self.mode == "instance" and (
            self.running_mean is not None or self.running_var is not None
        ):
            raise ConfigError("instance normalization carries no running statistics")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]
