"""Adam with a linear learning-rate warmup.

The schedule ramps linearly from a floor rate to the base rate over a
configured number of updates, then stays flat. Moment buffers are keyed
by parameter name and updated in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import GraphNode, Tensor
from .errors import NonFiniteError

__all__ = ["OptimizerState", "adam_step", "warmup_lr"]


@dataclass
class OptimizerState:
    base_lr: float = 1e-3
    warmup_steps: int = 0
    floor_lr: float = 2e-7
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    step: int = 0
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)


def warmup_lr(step: int, state: OptimizerState) -> float:
    """Learning rate for update number ``step`` (0-based)."""
    if state.warmup_steps <= 0 or step >= state.warmup_steps:
        return state.base_lr
    frac = step / state.warmup_steps
    return state.floor_lr + (state.base_lr - state.floor_lr) * frac


def adam_step(state: OptimizerState, params: dict[str, GraphNode]) -> float:
    """Apply one Adam update from the gradients stored on ``params``.

    Returns the learning rate that was used. Gradients are left
    untouched; callers zero them between steps.
    """
    grads = {}
    for name, node in params.items():
        g = node.grad
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        grads[name] = g

    if state.clip_norm is not None:
        total = 0.0
        for g in grads.values():
            total += float(np.sum(g * g))
        norm = np.sqrt(total)
        if norm > state.clip_norm:
            factor = state.clip_norm / norm
            grads = {name: g * factor for name, g in grads.items()}

    lr = warmup_lr(state.step, state)
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, node in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(node.value)
            state.v[name] = np.zeros_like(node.value)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        node.value -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return lr
