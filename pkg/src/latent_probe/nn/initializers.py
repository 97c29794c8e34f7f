"""Weight initializers: He normal, orthogonal and two raw Beta draws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEMES = ("he_normal", "orthogonal", "beta_1_3", "beta_0.5_0.5")

# CLI spellings -> canonical names
ALIASES = {
    "he": "he_normal",
    "he_normal": "he_normal",
    "orthogonal": "orthogonal",
    "beta-1-3": "beta_1_3",
    "beta_1_3": "beta_1_3",
    "beta-0.5-0.5": "beta_0.5_0.5",
    "beta_0.5_0.5": "beta_0.5_0.5",
}

BETA_PARAMS = {"beta_1_3": (1.0, 3.0), "beta_0.5_0.5": (0.5, 0.5)}


@dataclass(frozen=True)
class InitScheme:
    variant: str = "he_normal"
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "variant", ALIASES[self.variant])
        except KeyError:
            raise ValueError(f"unknown init scheme {self.variant!r}; choose from {sorted(ALIASES)}") from None


def orthogonal(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Semi-orthogonal matrix reshaped to ``shape`` (rows or columns orthonormal, whichever are fewer)."""
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q.reshape(shape)


def init_weights(shape: tuple[int, ...], fan_in: int, scheme: InitScheme | str,
                 rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    variant = scheme.variant if isinstance(scheme, InitScheme) else InitScheme(scheme).variant
    if variant == "he_normal":
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    elif variant == "orthogonal":
        w = orthogonal(shape, rng)
    else:
        a, b = BETA_PARAMS[variant]
        w = rng.beta(a, b, size=shape)
    return np.ascontiguousarray(w, dtype=dtype)


def initialize(model, scheme: InitScheme | str, rng: np.random.Generator | None = None) -> None:
    """Fill every weight tensor of ``model`` in layer order; biases are zeroed."""
    if not isinstance(scheme, InitScheme):
        scheme = InitScheme(scheme)
    if rng is None:
        rng = np.random.default_rng(scheme.seed)
    for _, layer in model.named_layers():
        W = layer.params["W"]
        layer.params["W"] = init_weights(W.shape, layer.fan_in, scheme, rng, W.dtype)
        layer.params["b"] = np.zeros_like(layer.params["b"])
