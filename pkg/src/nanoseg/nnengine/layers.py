"""Forward/backward layer implementations.

Every layer keeps its learnable arrays in ``self.params`` and writes matching
gradients into ``self.grads`` during backward. Forward caches whatever its own
backward needs, so a layer instance is single-owner while training.
"""
from __future__ import annotations

import numpy as np

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every layer output (off by default: it
    costs a full array scan per call)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _checked(arr: np.ndarray, where: str) -> np.ndarray:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values out of {where}")
    return arr


def _as_tensor(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected a (n, c, h, w) tensor, got shape {x.shape}")
    return x


class Layer:
    """Base layer: parameter/gradient dicts plus the forward/backward pair."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self) -> None:
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Conv2d(Layer):
    """2D convolution, stride 1, odd kernel, 'same' zero padding.

    Weights use Kaiming-uniform initialization (bound sqrt(6 / fan_in)),
    biases start at zero; both are drawn deterministically from ``rng``.
    """

    def __init__(self, in_c: int, out_c: int, k: int, rng: np.random.Generator):
        super().__init__()
        if k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {k}")
        self.in_c = in_c
        self.out_c = out_c
        self.k = k
        bound = np.sqrt(6.0 / (in_c * k * k))
        self.params = {
            "w": rng.uniform(-bound, bound, (out_c, in_c, k, k)),
            "b": np.zeros(out_c),
        }
        self._cols: np.ndarray | None = None
        self._shape: tuple[int, int, int] | None = None

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        p = self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        # (n, c, h, w, k, k) -> (n*h*w, c*k*k)
        return np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n * h * w, c * self.k * self.k
        )

    def forward(self, x, train: bool = False):
        x = _as_tensor(x)
        if x.shape[1] != self.in_c:
            raise ValueError(f"expected {self.in_c} input channels, got {x.shape[1]}")
        n, _, h, w = x.shape
        cols = self._im2col(x)
        wmat = self.params["w"].reshape(self.out_c, -1)
        out = cols @ wmat.T + self.params["b"]
        self._shape = (n, h, w)
        self._cols = cols
        out = out.reshape(n, h, w, self.out_c).transpose(0, 3, 1, 2)
        return _checked(np.ascontiguousarray(out), "Conv2d.forward")

    def backward(self, grad_out):
        grad_out = _as_tensor(grad_out)
        if self._cols is None:
            raise RuntimeError("Conv2d.backward before forward")
        n, h, w = self._shape
        c = self.in_c
        if grad_out.shape != (n, self.out_c, h, w):
            raise ValueError(
                f"grad shape {grad_out.shape} does not match forward output "
                f"{(n, self.out_c, h, w)}"
            )
        k = self.k
        p = k // 2
        g2 = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * h * w, self.out_c)
        self.grads["w"] = (g2.T @ self._cols).reshape(self.params["w"].shape)
        self.grads["b"] = g2.sum(axis=0)
        grad_cols = g2 @ self.params["w"].reshape(self.out_c, -1)
        grad_cols = grad_cols.reshape(n, h, w, c, k, k)
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki : ki + h, kj : kj + w] += np.moveaxis(
                    grad_cols[:, :, :, :, ki, kj], 3, 1)
        grad_x = gxp[:, :, p : p + h, p : p + w]
        return _checked(np.ascontiguousarray(grad_x), "Conv2d.backward")


class BatchNorm2d(Layer):
    """Per-channel batch normalization over the (batch, height, width) axes.

    Running statistics start uninitialized; the first training pass seeds them
    with that batch's statistics and later passes blend with ``momentum``.
    Evaluating before any training pass is an error. Variances are biased
    (population) everywhere for consistency.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        # None placeholders declare the buffer slots before the first training
        # pass fills them, so checkpoints can be loaded into a fresh net.
        self.buffers = {"running_mean": None, "running_var": None}
        self._cache = None

    @property
    def initialized(self) -> bool:
        return self.buffers["running_mean"] is not None

    def forward(self, x, train: bool = False):
        x = _as_tensor(x)
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        gamma = self.params["gamma"][:, None, None]
        beta = self.params["beta"][:, None, None]
        if train:
            n, _, h, w = x.shape
            m = n * h * w
            if m < 2:
                raise ValueError("training-mode batchnorm needs >= 2 values per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if not self.initialized:
                self.buffers["running_mean"] = mean.copy()
                self.buffers["running_var"] = var.copy()
            else:
                mom = self.momentum
                self.buffers["running_mean"] += mom * (mean - self.buffers["running_mean"])
                self.buffers["running_var"] += mom * (var - self.buffers["running_var"])
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
            self._cache = (xhat, inv_std, m)
        else:
            if not self.initialized:
                raise RuntimeError(
                    "batchnorm evaluated before any training pass initialized its running stats"
                )
            mean = self.buffers["running_mean"]
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
            self._cache = (xhat, inv_std, 0)
        return _checked(xhat * gamma + beta, "BatchNorm2d.forward")

    def backward(self, grad_out):
        grad_out = _as_tensor(grad_out)
        if self._cache is None:
            raise RuntimeError("BatchNorm2d.backward before forward")
        xhat, inv_std, m = self._cache
        gamma = self.params["gamma"][:, None, None]
        self.grads["gamma"] = (grad_out * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * gamma
        if m == 0:
            # Eval mode: running stats are constants.
            grad_x = dxhat * inv_std[:, None, None]
        else:
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            grad_x = (inv_std[:, None, None] / m) * (m * dxhat - sum_d - xhat * sum_dx)
        return _checked(grad_x, "BatchNorm2d.backward")


class ReLU(Layer):
    """max(0, x); the gradient at exactly 0 is 0."""

    def __init__(self):
        super().__init__()
        self._pos = None

    def forward(self, x, train: bool = False):
        x = _as_tensor(x)
        self._pos = x > 0
        # np.maximum (not where) so non-finite activations stay visible
        return np.maximum(x, 0.0)

    def backward(self, grad_out):
        return np.where(self._pos, _as_tensor(grad_out), 0.0)


class LeakyReLU(Layer):
    """x for x > 0, slope * x otherwise; the gradient at exactly 0 is slope."""

    def __init__(self, slope: float = 0.01):
        super().__init__()
        self.slope = slope
        self._pos = None

    def forward(self, x, train: bool = False):
        x = _as_tensor(x)
        self._pos = x > 0
        return np.where(self._pos, x, self.slope * x)

    def backward(self, grad_out):
        grad_out = _as_tensor(grad_out)
        return np.where(self._pos, grad_out, self.slope * grad_out)


class MaxPool2(Layer):
    """2x2 max pooling with stride 2; ties route gradient to the first window
    element in row-major order."""

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, train: bool = False):
        x = _as_tensor(x)
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"max pooling needs even spatial dims, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(n, c, h // 2, w // 2, 4)
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return out

    def backward(self, grad_out):
        grad_out = _as_tensor(grad_out)
        idx, (n, c, h, w) = self._cache
        scattered = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(scattered, idx[..., None], grad_out[..., None], axis=-1)
        grad_x = scattered.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(grad_x.reshape(n, c, h, w))


class Upsample2(Layer):
    """Nearest-neighbor 2x upsampling; backward sums the four child gradients."""

    def forward(self, x, train: bool = False):
        x = _as_tensor(x)
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, grad_out):
        grad_out = _as_tensor(grad_out)
        n, c, h, w = grad_out.shape
        if h % 2 or w % 2:
            raise ValueError(f"upsample gradient must have even dims, got {h}x{w}")
        return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


class Sequential(Layer):
    """Chains layers; prefixes child parameter names when collected."""

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers

    def forward(self, x, train: bool = False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stack two tensors along the channel axis."""
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concat shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels_grad(grad: np.ndarray, c_first: int):
    """Split a concat gradient back into the two addends' channel ranges."""
    grad = _as_tensor(grad)
    if not 0 < c_first < grad.shape[1]:
        raise ValueError(f"invalid split point {c_first} for {grad.shape[1]} channels")
    return grad[:, :c_first], grad[:, c_first:]


def softmax_channels(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax across channels, stabilized by max subtraction."""
    x = _as_tensor(x)
    if x.shape[1] < 2:
        raise ValueError(f"softmax needs >= 2 channels, got {x.shape[1]}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)
