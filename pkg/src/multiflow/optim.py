"""Adam with linear warmup followed by linear decay to zero."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-9
    peak_lr: float = 5e-5
    warmup_steps: int = 4000
    total_steps: int = 400_000

    def __post_init__(self):
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps={self.warmup_steps} must lie in [0, total_steps={self.total_steps}]")

    @classmethod
    def from_warmup_ratio(cls, ratio: float, total_steps: int, **kw) -> "OptimizerConfig":
        """Fine-tuning schedules are often quoted as a warmup fraction."""
        return cls(warmup_steps=int(round(ratio * total_steps)), total_steps=total_steps, **kw)


def learning_rate(config: OptimizerConfig, step: int) -> float:
    """Learning rate used for update number ``step`` (1-based)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    w, total = config.warmup_steps, config.total_steps
    if step <= w:
        return config.peak_lr * step / w
    if total == w:
        return 0.0
    return config.peak_lr * max(0.0, (total - step) / (total - w))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              config: OptimizerConfig, step: int) -> float:
    """Apply one bias-corrected Adam update in place; returns the lr used."""
    if step < 1:
        raise ValueError("step must be >= 1")
    lr = learning_rate(config, step)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", f"grad for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        if m.shape != p.data.shape or v.shape != p.data.shape:
            raise ShapeError("adam_step", f"moment buffers for {name!r} do not match {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    state.step = step
    return lr
