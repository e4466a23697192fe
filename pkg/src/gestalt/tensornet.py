"""A small sequential network engine on numpy with hand-written backward passes.

Activations are NCHW arrays for spatial layers and ``(batch, dim)`` arrays for
dense layers. Every layer caches what its backward pass needs during
``forward``; ``backward`` consumes the upstream gradient, stores parameter
gradients in ``layer.grads`` and returns the gradient w.r.t. its input.
"""
from __future__ import annotations

import copy
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NoCachedForward, NonFiniteValue, ShapeMismatch, TooManyParameters


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """im2col: (B, C, H, W) padded input -> (B*out_h*out_w, C*k*k) patch matrix."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    b, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * out_h * out_w, c * k * k)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: scatter-add patch rows back into a padded image."""
    b, c, hp, wp = shape
    cols = cols.reshape(b, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += cols[:, :, i, j]
    return out


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise NoCachedForward(f"{self.kind}: backward called before forward")
        return self._cache

    def describe(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.describe().items() if k != "kind")
        return f"{type(self).__name__}({args})"


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel, self.stride, self.padding = in_ch, out_ch, kernel, stride, padding
        fan_in = in_ch * kernel * kernel
        self.params["W"] = _he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.params["b"] = np.zeros(out_ch)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"conv expects (B, {self.in_ch}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        oh, ow = self.out_size(h, w)
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"conv input {h}x{w} too small for kernel {self.kernel}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = _windows(xp, self.kernel, self.stride, oh, ow)
        W = self.params["W"].reshape(self.out_ch, -1)
        out = cols @ W.T + self.params["b"]
        self._cache = (cols, xp.shape, oh, ow)
        return out.reshape(b, oh, ow, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, xp_shape, oh, ow = self._cached()
        g = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_ch)
        W = self.params["W"].reshape(self.out_ch, -1)
        self.grads["W"] = (g.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] = g.sum(axis=0)
        dxp = _col2im(g @ W, xp_shape, self.kernel, self.stride, oh, ow)
        p = self.padding
        return dxp[:, :, p : xp_shape[2] - p, p : xp_shape[3] - p] if p else dxp

    def describe(self):
        return {"kind": self.kind, "in": self.in_ch, "out": self.out_ch, "k": self.kernel, "s": self.stride, "p": self.padding}


class ConvTranspose2D(Layer):
    """Transposed convolution; weight layout ``(in_ch, out_ch, k, k)``."""

    kind = "tconv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 4, stride: int = 2, padding: int = 1, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel, self.stride, self.padding = in_ch, out_ch, kernel, stride, padding
        # each output pixel receives about in_ch * (k/s)^2 contributions
        fan_in = max(1, in_ch * (kernel // stride) ** 2)
        self.params["W"] = _he_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in)
        self.params["b"] = np.zeros(out_ch)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.padding
        return (h - 1) * s - 2 * p + k, (w - 1) * s - 2 * p + k

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeMismatch(f"tconv expects (B, {self.in_ch}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        oh, ow = self.out_size(h, w)
        if oh < 1 or ow < 1:
            raise ShapeMismatch(f"tconv output would be empty for input {h}x{w}")
        xf = x.transpose(0, 2, 3, 1).reshape(-1, self.in_ch)
        W = self.params["W"].reshape(self.in_ch, -1)
        full_shape = (b, self.out_ch, oh + 2 * p, ow + 2 * p)
        full = _col2im(xf @ W, full_shape, k, s, h, w)
        self._cache = (xf, x.shape, full_shape)
        out = full[:, :, p : p + oh, p : p + ow] if p else full
        return out + self.params["b"][None, :, None, None]

    def backward(self, grad):
        xf, x_shape, full_shape = self._cached()
        b, _, h, w = x_shape
        p = self.padding
        gp = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p))) if p else grad
        cols = _windows(gp, self.kernel, self.stride, h, w)
        W = self.params["W"].reshape(self.in_ch, -1)
        self.grads["W"] = (xf.T @ cols).reshape(self.params["W"].shape)
        self.grads["b"] = grad.sum(axis=(0, 2, 3))
        dx = cols @ W.T
        return dx.reshape(b, h, w, self.in_ch).transpose(0, 3, 1, 2)

    def describe(self):
        return {"kind": self.kind, "in": self.in_ch, "out": self.out_ch, "k": self.kernel, "s": self.stride, "p": self.padding}


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["W"] = _he_uniform(rng, (n_in, n_out), n_in)
        self.params["b"] = np.zeros(n_out)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"dense expects (B, {self.n_in}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._cached()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T

    def describe(self):
        return {"kind": self.kind, "in": self.n_in, "out": self.n_out}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return grad * self._cached()


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, self.slope * x).astype(x.dtype, copy=False)

    def backward(self, grad):
        return np.where(self._cached(), grad, self.slope * grad)

    def describe(self):
        return {"kind": self.kind, "slope": self.slope}


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = sigmoid(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return grad * y * (1.0 - y)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, grad):
        y = self._cached()
        return grad * (1.0 - y * y)


class AvgPool(Layer):
    """Non-overlapping average pooling.

    With ``out_size`` set the kernel adapts to the input so that the output is
    always ``out_size x out_size``; input sides must be divisible by it.
    """

    kind = "avgpool"

    def __init__(self, kernel: int | None = 2, out_size: int | None = None):
        super().__init__()
        if (kernel is None) == (out_size is None):
            raise ValueError("give exactly one of kernel / out_size")
        self.kernel, self.out_size = kernel, out_size

    def forward(self, x):
        b, c, h, w = x.shape
        if self.out_size is not None:
            if h % self.out_size or w % self.out_size:
                raise ShapeMismatch(f"avgpool: {h}x{w} not divisible by out_size {self.out_size}")
            kh, kw = h // self.out_size, w // self.out_size
        else:
            kh = kw = self.kernel
            if h % kh or w % kw:
                raise ShapeMismatch(f"avgpool: {h}x{w} not divisible by kernel {kh}")
        self._cache = (kh, kw)
        return x.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def backward(self, grad):
        kh, kw = self._cached()
        g = grad / (kh * kw)
        return np.repeat(np.repeat(g, kh, axis=2), kw, axis=3)

    def describe(self):
        return {"kind": self.kind, "kernel": self.kernel, "out_size": self.out_size}


class Upsample(Layer):
    kind = "upsample"

    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        self._cache = True
        return np.repeat(np.repeat(x, self.factor, axis=2), self.factor, axis=3)

    def backward(self, grad):
        self._cached()
        b, c, h, w = grad.shape
        f = self.factor
        return grad.reshape(b, c, h // f, f, w // f, f).sum(axis=(3, 5))

    def describe(self):
        return {"kind": self.kind, "factor": self.factor}


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._cached())


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        self._cache = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        return grad.reshape(self._cached())

    def describe(self):
        return {"kind": self.kind, "shape": list(self.shape)}


class Network:
    """An ordered stack of layers."""

    def __init__(self, layers: Sequence[Layer], dtype=np.float32):
        self.layers = list(layers)
        self.dtype = np.dtype(dtype)
        self.astype(dtype)
        self._forwarded = False

    def astype(self, dtype) -> "Network":
        self.dtype = np.dtype(dtype)
        for layer in self.layers:
            for name, p in layer.params.items():
                layer.params[name] = p.astype(self.dtype)
        return self

    def copy(self) -> "Network":
        net = copy.deepcopy(self)
        net.clear_cache()
        return net

    def clear_cache(self):
        for layer in self.layers:
            layer._cache = None
            layer.grads = {}
        self._forwarded = False

    @property
    def parameters(self) -> list[np.ndarray]:
        return [layer.params[k] for layer in self.layers for k in sorted(layer.params)]

    @property
    def gradients(self) -> list[np.ndarray]:
        return [layer.grads[k] for layer in self.layers for k in sorted(layer.params)]

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters))

    def describe(self) -> list[dict]:
        return [layer.describe() for layer in self.layers]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if not np.all(np.isfinite(x)):
            raise NonFiniteValue("non-finite value in network input")
        for layer in self.layers:
            x = layer.forward(x)
            if not np.all(np.isfinite(x)):
                raise NonFiniteValue(f"non-finite value after {layer!r}")
        self._forwarded = True
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Backpropagate ``grad`` (d loss / d output); returns d loss / d input."""
        if not self._forwarded:
            raise NoCachedForward("backward called before forward")
        grad = np.asarray(grad, dtype=self.dtype)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class Adam:
    """Adaptive-moment optimiser updating a list of arrays in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeMismatch(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if p.shape != g.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.shape}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def adam_step(opt: Adam, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    opt.step(grads)
    return opt.params


def numeric_gradient(f: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (mutated and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(net: Network, x: np.ndarray, eps: float = 1e-5, seed: int = 0, include_input: bool = True,
               max_params: int = 10_000) -> float:
    """Max relative error between backprop and central-difference gradients.

    The scalar probed is ``sum(out * R)`` for a fixed random ``R``. The network
    is evaluated in float64 on a private copy.
    """
    if net.num_parameters > max_params:
        raise TooManyParameters(f"{net.num_parameters} parameters > {max_params}")
    net = net.copy().astype(np.float64)
    x = np.array(x, dtype=np.float64)
    out = net.forward(x)
    proj = np.random.default_rng(seed).standard_normal(out.shape)
    dx = net.backward(proj)
    analytic = [g.astype(np.float64).copy() for g in net.gradients]

    def f():
        return float(np.sum(net.forward(x) * proj))

    err = 0.0
    for p, a in zip(net.parameters, analytic):
        err = max(err, relative_error(a, numeric_gradient(f, p, eps), eps))
    if include_input:
        err = max(err, relative_error(dx, numeric_gradient(f, x, eps), eps))
    return err
