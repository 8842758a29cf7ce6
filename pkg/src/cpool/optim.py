"""Adam and SGD with momentum over named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

KINDS = ("adam", "sgd_momentum")


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """Apply one update, rebinding each parameter's data to a fresh array."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"optimizer_step[{name}]", p.shape, g.shape)
    state.step += 1
    t = state.step
    lr = state.learning_rate
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = g.astype(p.dtype, copy=False)
        if state.kind == "adam":
            m = state.m.get(name)
            v = state.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            new = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
            state.m[name], state.v[name] = m, v
        else:
            buf = state.m.get(name)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.m[name] = buf
            new = p.data - lr * buf
        new = np.ascontiguousarray(new, dtype=p.dtype)
        new.setflags(write=False)
        p.data = new
