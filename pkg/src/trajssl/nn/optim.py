"""Momentum SGD and LARS over a Params mapping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OPTIMIZER_KINDS = ("sgd_momentum", "lars")
LARS_EPS = 1e-9


@dataclass
class OptimizerState:
    kind: str = "sgd_momentum"
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZER_KINDS}")


def lars_trust_ratio(w: np.ndarray, g: np.ndarray, weight_decay: float) -> float:
    w_norm = float(np.linalg.norm(w))
    g_norm = float(np.linalg.norm(g))
    if w_norm == 0.0 or g_norm == 0.0:
        return 1.0
    return w_norm / (g_norm + weight_decay * w_norm + LARS_EPS)


def optimizer_step(state: OptimizerState, params, grads: dict | None = None):
    """Update ``params`` in place from ``grads`` (defaults to each ``.grad``).

    sgd_momentum: ``buf = m*buf + g``; ``w -= lr*buf + lr*wd*w``.
    lars: ``buf = m*buf + lr*trust*(g + wd*w)``; ``w -= buf``.
    Missing gradients count as zero.
    """
    lr, wd, m = state.learning_rate, state.weight_decay, state.momentum
    for name, p in params.items():
        w = p.data
        g = grads[name] if grads is not None else p.grad
        g = np.zeros_like(w) if g is None else np.asarray(g, dtype=w.dtype)
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        buf = state.buffers.get(name)
        if state.kind == "sgd_momentum":
            buf = g.copy() if buf is None else m * buf + g
            p.data = (w - lr * buf - (lr * wd) * w).astype(w.dtype)
        else:
            trust = lars_trust_ratio(w, g, wd)
            step = (lr * trust) * (g + wd * w)
            buf = step if buf is None else m * buf + step
            p.data = (w - buf).astype(w.dtype)
        state.buffers[name] = buf
