"""Shared test utilities: finite differences and a tiny model config."""

import numpy as np

from multiflow.model import ModelConfig


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=24, layers=2, hidden=8, heads=2, ffn=16, max_positions=40, init_std=0.5)
    base.update(kw)
    return ModelConfig(**base)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max over entries of |a - b| / max(|a|, |b|, 1e-6)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))
