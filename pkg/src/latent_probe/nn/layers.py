"""Layers with hand-written backward passes.

Every layer works on a leading batch axis. ``forward`` caches what the
matching ``backward`` needs; ``backward`` accumulates parameter gradients
into ``layer.grads`` and returns the gradient with respect to the input.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32
KERNEL = 3


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardBeforeForward(RuntimeError):
    pass


def conv_output_size(n: int, kernel: int = KERNEL, stride: int = 2, padding: int = 0) -> int:
    out = (n + 2 * padding - kernel) // stride + 1
    if n + 2 * padding < kernel or out <= 0:
        raise ShapeError(f"input size {n} is smaller than the {kernel}x{kernel} kernel")
    return out


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values at {where}")


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None
        # set on a network's first layer when nothing upstream needs d(loss)/d(input)
        self.skip_input_grad = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise BackwardBeforeForward(f"{self.kind}: backward called before forward")
        return self._cache

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def __repr__(self):
        shapes = {k: v.shape for k, v in self.params.items()}
        return f"{type(self).__name__}({shapes})"


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, dtype=DTYPE):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params = {"W": np.zeros((n_out, n_in), dtype), "b": np.zeros(n_out, dtype)}
        self.zero_grad()

    @property
    def fan_in(self):
        return self.n_in

    @property
    def fan_out(self):
        return self.n_out

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense expects (batch, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, grad):
        x = self._cached()
        self.grads["W"] += grad.T @ x
        self.grads["b"] += grad.sum(axis=0)
        if self.skip_input_grad:
            return None
        return grad @ self.params["W"]


class Conv2d(Layer):
    """3x3 convolution. Defaults (stride 2, no padding) are the policy/encoder layer."""

    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, stride: int = 2, padding: int = 0, dtype=DTYPE):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.stride, self.padding = stride, padding
        self.params = {
            "W": np.zeros((c_out, c_in, KERNEL, KERNEL), dtype),
            "b": np.zeros(c_out, dtype),
        }
        self.zero_grad()

    @property
    def fan_in(self):
        return self.c_in * KERNEL * KERNEL

    @property
    def fan_out(self):
        return self.c_out * KERNEL * KERNEL

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        return (
            conv_output_size(h, KERNEL, self.stride, self.padding),
            conv_output_size(w, KERNEL, self.stride, self.padding),
        )

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv2d expects (batch, {self.c_in}, H, W), got {x.shape}")
        B, C, H, W = x.shape
        Ho, Wo = self.output_shape(H, W)
        p, s = self.padding, self.stride
        # channel-major layout keeps every patch copy and matmul contiguous
        xc = x.transpose(1, 0, 2, 3)
        if p:
            xc = np.pad(xc, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((C, KERNEL, KERNEL, B, Ho, Wo), dtype=x.dtype)
        for i in range(KERNEL):
            for j in range(KERNEL):
                cols[:, i, j] = xc[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
        cols = cols.reshape(C * KERNEL * KERNEL, B * Ho * Wo)
        out = self.params["W"].reshape(self.c_out, -1) @ cols + self.params["b"][:, None]
        self._cache = (cols, xc.shape, Ho, Wo)
        return out.reshape(self.c_out, B, Ho, Wo).transpose(1, 0, 2, 3)

    def backward(self, grad):
        cols, padded_shape, Ho, Wo = self._cached()
        C, B = padded_shape[0], padded_shape[1]
        g = np.ascontiguousarray(grad.transpose(1, 0, 2, 3)).reshape(self.c_out, B * Ho * Wo)
        self.grads["W"] += (g @ cols.T).reshape(self.params["W"].shape)
        self.grads["b"] += g.sum(axis=1)
        if self.skip_input_grad:
            return None
        dcols = (self.params["W"].reshape(self.c_out, -1).T @ g).reshape(C, KERNEL, KERNEL, B, Ho, Wo)
        dx = np.zeros(padded_shape, dtype=grad.dtype)
        s = self.stride
        for i in range(KERNEL):
            for j in range(KERNEL):
                dx[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += dcols[:, i, j]
        p = self.padding
        if p:
            dx = dx[:, :, p:-p, p:-p]
        return dx.transpose(1, 0, 2, 3)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        y = np.maximum(x, 0, dtype=x.dtype)
        self._cache = y
        return y

    def backward(self, grad):
        return grad * (self._cached() > 0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = 0.5 * (1 + np.tanh(0.5 * x))
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return grad * y * (1 - y)


class ConvTranspose2d(Layer):
    """3x3 transposed convolution, the adjoint of a strided ``Conv2d``.

    Output side is ``(n - 1) * stride + 3 + output_padding``. Weights are laid
    out (c_in, c_out, 3, 3).
    """

    kind = "conv_transpose2d"

    def __init__(self, c_in: int, c_out: int, stride: int = 2, output_padding: int = 0, dtype=DTYPE):
        super().__init__()
        if not 0 <= output_padding < stride:
            raise ValueError("output_padding must be in [0, stride)")
        self.c_in, self.c_out = c_in, c_out
        self.stride, self.output_padding = stride, output_padding
        self.params = {
            "W": np.zeros((c_in, c_out, KERNEL, KERNEL), dtype),
            "b": np.zeros(c_out, dtype),
        }
        self.zero_grad()

    @property
    def fan_in(self):
        # each output pixel sees about 9/stride^2 taps per input channel
        return max(1, self.c_in * KERNEL * KERNEL // self.stride ** 2)

    @property
    def fan_out(self):
        return self.c_out * KERNEL * KERNEL

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        extra = KERNEL + self.output_padding
        return (h - 1) * self.stride + extra, (w - 1) * self.stride + extra

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv_transpose2d expects (batch, {self.c_in}, H, W), got {x.shape}")
        B, C, H, W = x.shape
        Ho, Wo = self.output_shape(H, W)
        s = self.stride
        xc = np.ascontiguousarray(x.transpose(1, 0, 2, 3)).reshape(C, B * H * W)
        taps = (self.params["W"].reshape(C, -1).T @ xc).reshape(self.c_out, KERNEL, KERNEL, B, H, W)
        out = np.zeros((self.c_out, B, Ho, Wo), dtype=x.dtype)
        for i in range(KERNEL):
            for j in range(KERNEL):
                out[:, :, i:i + s * (H - 1) + 1:s, j:j + s * (W - 1) + 1:s] += taps[:, i, j]
        out += self.params["b"][:, None, None, None]
        self._cache = (xc, B, H, W)
        return out.transpose(1, 0, 2, 3)

    def backward(self, grad):
        xc, B, H, W = self._cached()
        s = self.stride
        gc = grad.transpose(1, 0, 2, 3)
        cols = np.empty((self.c_out, KERNEL, KERNEL, B, H, W), dtype=grad.dtype)
        for i in range(KERNEL):
            for j in range(KERNEL):
                cols[:, i, j] = gc[:, :, i:i + s * (H - 1) + 1:s, j:j + s * (W - 1) + 1:s]
        cols = cols.reshape(self.c_out * KERNEL * KERNEL, B * H * W)
        self.grads["W"] += (xc @ cols.T).reshape(self.params["W"].shape)
        self.grads["b"] += gc.sum(axis=(1, 2, 3))
        dx = self.params["W"].reshape(self.c_in, -1) @ cols
        return dx.reshape(self.c_in, B, H, W).transpose(1, 0, 2, 3)


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._cached())


class Flatten(Reshape):
    kind = "flatten"

    def __init__(self):
        super().__init__((-1,))


class Sequential:
    """Ordered stack of layers with named parameters (``"<index>.<param>"``)."""

    def __init__(self, layers: list[Layer], name: str = "seq"):
        self.layers = list(layers)
        self.name = name

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            check_finite(x, f"{self.name}.{i} ({layer.kind})")
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def named_layers(self):
        for i, layer in enumerate(self.layers):
            if layer.params:
                yield f"{self.name}.{i}", layer

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self.named_layers() for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{p}.{k}": v for p, layer in self.named_layers() for k, v in layer.grads.items()}

    def astype(self, dtype) -> "Sequential":
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
            layer.zero_grad()
        return self


def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = Wx + b for a single vector."""
    x, W, b = np.asarray(x), np.asarray(W), np.asarray(b)
    if W.ndim != 2 or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise ShapeError(f"dense_forward shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}")
    return W @ x + b


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single-sample 3x3, stride-2, unpadded convolution: (C,H,W) -> (F,H',W')."""
    if x.ndim != 3 or kernels.shape[1:] != (x.shape[0], KERNEL, KERNEL):
        raise ShapeError(f"conv2d_forward shape mismatch: x{x.shape}, kernels{kernels.shape}")
    layer = Conv2d(x.shape[0], kernels.shape[0], dtype=kernels.dtype)
    layer.params["W"][...] = kernels
    layer.params["b"][...] = b
    return layer.forward(x[None])[0]


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_logprob(logits: np.ndarray, a: int) -> tuple[np.ndarray, float]:
    logits = np.asarray(logits)
    k = logits.shape[-1]
    if logits.ndim != 1 or k < 2:
        raise ShapeError(f"softmax_logprob expects a vector of length >= 2, got {logits.shape}")
    check_finite(logits, "softmax_logprob input")
    if not 0 <= a < k:
        raise IndexError(f"action {a} out of range for {k} logits")
    logp = log_softmax(logits.astype(np.float64))
    probs = np.exp(logp)
    return probs.astype(logits.dtype), float(logp[a])
