"""Bias-corrected adaptive-moment optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import DimensionError
from .core import Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: dict[int, np.ndarray], state: OptimizerState) -> OptimizerState:
    """One Adam update of every tensor in ``params``; missing grads count as zero."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        g = grads.get(p.id)
        if g is None:
            g = np.zeros(p.shape)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} does not match parameter {p.name or p.id} shape {p.shape}")
        m = state.first_moment.get(p.id)
        v = state.second_moment.get(p.id)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[p.id] = m
        state.second_moment[p.id] = v
        p.assign(p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
    return state
