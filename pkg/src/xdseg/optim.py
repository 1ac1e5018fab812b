"""Nadam optimizer, LookAhead wrapper, and learning-rate schedules."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericFault


class Nadam:
    """Adam with Nesterov momentum (Dozat formulation, constant momentum).

    Update per parameter, with step counter t incremented before the update:
        m <- b1*m + (1-b1)*g
        v <- b2*v + (1-b2)*g^2
        mhat = m / (1 - b1^(t+1))
        direction = b1*mhat + (1-b1)*g / (1 - b1^t)
        theta <- theta - lr * direction / (sqrt(v / (1 - b2^t)) + eps)
    """

    def __init__(self, lr: float = 3e-4, betas: tuple[float, float] = (0.95, 0.99),
                 epsilon: float = 1e-8):
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {betas}")
        self.lr = lr
        self.betas = (b1, b2)
        self.epsilon = epsilon
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated parameters; moment buffers update in place."""
        b1, b2 = self.betas
        self.t += 1
        t = self.t
        out = {}
        for name, theta in params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise NumericFault(f"non-finite gradient for parameter {name!r}")
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(theta, dtype=np.float64)
                self.m[name] = m
                self.v[name] = np.zeros_like(theta, dtype=np.float64)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** (t + 1))
            direction = b1 * mhat + (1 - b1) * g / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            out[name] = (theta - self.lr * direction / (np.sqrt(vhat) + self.epsilon)
                         ).astype(theta.dtype)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {"t": np.array([self.t])}
        for name in self.m:
            state[f"m::{name}"] = self.m[name]
            state[f"v::{name}"] = self.v[name]
        return state

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        self.t = int(state["t"][0])
        for key, arr in state.items():
            if key.startswith("m::"):
                self.m[key[3:]] = arr.astype(np.float64)
            elif key.startswith("v::"):
                self.v[key[3:]] = arr.astype(np.float64)


class LookAhead:
    """Slow/fast weight interpolation every k inner optimizer steps."""

    def __init__(self, params: dict[str, np.ndarray], k: int = 6,
                 alpha: float = 0.5):
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        if not 0.0 < alpha <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.slow = {name: np.array(p, copy=True) for name, p in params.items()}

    def step(self, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Call after each fast step; commits every k-th call."""
        self.counter += 1
        if self.counter % self.k != 0:
            return params
        out = {}
        for name, fast in params.items():
            slow = self.slow[name]
            slow += self.alpha * (fast.astype(slow.dtype) - slow)
            out[name] = slow.astype(fast.dtype).copy()
        return out


@dataclass
class ExpDecaySchedule:
    """lr0 * factor^epoch, clamped at floor. One epoch = one decay step."""

    lr0: float = 3e-4
    factor: float = 0.95
    floor: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.factor <= 1.0:
            raise ConfigError("decay factor must lie in (0, 1]")
        if self.floor <= 0:
            raise ConfigError("floor must be positive")

    def lr_at(self, epoch: int, train_score: float | None = None) -> float:
        return max(self.lr0 * self.factor ** epoch, self.floor)


@dataclass
class CosineSchedule:
    """Constant lr until both trigger conditions hold, then cosine annealing.

    Activation requires the train score to exceed ``score_threshold`` AND the
    epoch to reach ``epoch_threshold``; annealing time is counted from the
    activation epoch. ``period`` defaults to (total_epochs - activation).
    """

    lr0: float = 1e-3
    lr_min: float = 1e-5
    score_threshold: float = 0.85
    epoch_threshold: int = 40
    total_epochs: int = 90
    period: int | None = None
    activation_epoch: int | None = field(default=None)

    def __post_init__(self):
        if self.lr_min <= 0:
            raise ConfigError("lr_min must be positive")

    def lr_at(self, epoch: int, train_score: float | None = None) -> float:
        if self.activation_epoch is None:
            score = -math.inf if train_score is None else train_score
            if score > self.score_threshold and epoch >= self.epoch_threshold:
                self.activation_epoch = epoch
        if self.activation_epoch is None or epoch < self.activation_epoch:
            return self.lr0
        period = self.period or max(self.total_epochs - self.activation_epoch, 1)
        tau = min(epoch - self.activation_epoch, period)
        return self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (
            1.0 + math.cos(math.pi * tau / period)
        )


def lr_at(schedule, epoch: int, train_score: float | None = None) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    return schedule.lr_at(epoch, train_score)
