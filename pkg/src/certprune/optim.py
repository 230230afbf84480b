"""SGD-with-momentum and Adam updates, plus global-norm gradient clipping."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimState:
    kind: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.01
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    refused: int = 0
    buffers: dict = field(default_factory=dict)

    def reset(self, lr=None):
        self.buffers.clear()
        self.step_count = 0
        if lr is not None:
            self.lr = lr


def optimizer_step(state, params, grads):
    """Update ``params`` (Tensors) in place; return False if the step was refused.

    Non-finite gradients leave parameters and buffers untouched and bump
    ``state.refused``.
    """
    if any(not np.all(np.isfinite(g)) for g in grads):
        state.refused += 1
        return False
    state.step_count += 1
    t = state.step_count
    for i, (p, g) in enumerate(zip(params, grads)):
        w = p.data
        if state.weight_decay:
            g = g + state.weight_decay * w
        if state.kind == "sgd":
            v = state.buffers.get(i)
            v = g.copy() if v is None else state.momentum * v + g
            state.buffers[i] = v
            p.data = (w - state.lr * v).astype(w.dtype)
        elif state.kind == "adam":
            m, v = state.buffers.get(i, (np.zeros_like(w), np.zeros_like(w)))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.buffers[i] = (m, v)
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            p.data = (w - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(w.dtype)
        else:
            raise ValueError(f"unknown optimizer kind {state.kind!r}")
    return True


def global_norm(grads):
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grad_norm(grads, max_norm):
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [(g * scale).astype(g.dtype) for g in grads]
