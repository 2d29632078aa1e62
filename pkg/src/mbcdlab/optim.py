"""Adam with bias correction over named parameter maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K


class NanGradientError(FloatingPointError):
    """A gradient contained NaN; carries the offending parameter name."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"NaN gradient for parameter {name!r}")


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr > 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1 and self.eps > 0):
            raise ValueError("AdamState: invalid hyperparameters")


def init_adam(params: dict[str, np.ndarray], lr: float = 1e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p)
        state.v[name] = np.zeros_like(p)
    return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected update; returns fresh params and mutated state."""
    t = state.step + 1
    new_params: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.ascontiguousarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        if np.isnan(g).any():
            raise NanGradientError(name)
        p_new, m_new, v_new = K.adam_update(
            p.ravel(), g.ravel(), state.m[name].ravel(), state.v[name].ravel(),
            t, state.lr, state.beta1, state.beta2, state.eps)
        new_params[name] = p_new.reshape(p.shape)
        state.m[name] = m_new.reshape(p.shape)
        state.v[name] = v_new.reshape(p.shape)
    state.step = t
    return new_params, state
