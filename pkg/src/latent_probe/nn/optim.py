"""Plain SGD (the literal update rule) and bias-corrected adaptive moments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import NonFiniteError


def _check_grads(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in parameter {name}")


@dataclass
class OptimizerState:
    kind: str = "adaptive_moments"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("plain_sgd", "adaptive_moments"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: OptimizerState) -> dict[str, np.ndarray]:
    """Update ``params`` in place (descending ``grads``) and return them."""
    _check_grads(grads)
    for name in grads:
        if params[name].shape != grads[name].shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, "
                             f"parameter has {params[name].shape}")
    if state.kind == "plain_sgd":
        for name, g in grads.items():
            params[name] -= np.asarray(state.lr * g, dtype=params[name].dtype)
        return params

    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        params[name] -= step.astype(params[name].dtype, copy=False)
    return params
