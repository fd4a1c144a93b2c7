"""Neural-net layer kit: explicit forward/backward passes, Adam, gradient checking.

Every layer assigns (not accumulates) its parameter gradients during
``backward``; architectures here use each layer exactly once per step.
Training runs float32; gradient checks rebuild the same layers in float64.
"""

from __future__ import annotations

import numpy as np
import scipy.fft

DEBUG_CHECK_FINITE = False


class ShapeMismatch(Exception):
    """Input shape incompatible with the layer."""


class EvalBeforeTrain(Exception):
    """Eval-mode batchnorm with uninitialized running statistics."""


def _check_finite(x: np.ndarray) -> None:
    if DEBUG_CHECK_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite values in tensor")


class Param:
    """Named parameter tensor with a gradient slot."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str):
        self.value = value
        self.grad = np.zeros_like(value)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2d(Layer):
    """Cross-correlation with per-output-channel bias."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None,
                 dtype=np.float32, name: str = "conv"):
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.k, self.stride, self.pad = kernel, stride, pad
        fan = c_in * kernel * kernel
        self.weight = Param(
            _glorot(rng, (c_out, c_in, kernel, kernel), fan, c_out, dtype), f"{name}.weight"
        )
        self.bias = Param(np.zeros(c_out, dtype=dtype), f"{name}.bias")
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def _im2col(self, xp: np.ndarray):
        n, c, hp, wp = xp.shape
        k, s = self.k, self.stride
        ho = (hp - k) // s + 1
        wo = (wp - k) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]                      # (n, c, ho, wo, k, k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
        return np.ascontiguousarray(cols), ho, wo

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"expected (N,{self.c_in},H,W), got {x.shape}")
        n, _, h, w = x.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols, ho, wo = self._im2col(xp)
        wmat = self.weight.value.reshape(self.c_out, -1)
        out = cols @ wmat.T + self.bias.value
        out = out.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)
        self._cache = (cols, xp.shape, (ho, wo))
        _check_finite(out)
        return np.ascontiguousarray(out)

    def backward(self, g):
        cols, xp_shape, (ho, wo) = self._cache
        n, c, hp, wp = xp_shape
        k, s, p = self.k, self.stride, self.pad
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1).reshape(n, ho * wo, self.c_out))
        gflat = gmat.reshape(-1, self.c_out)
        self.weight.grad[...] = (gflat.T @ cols.reshape(gflat.shape[0], -1)).reshape(
            self.weight.value.shape
        )
        self.bias.grad[...] = g.sum(axis=(0, 2, 3))
        wmat = self.weight.value.reshape(self.c_out, -1)
        gcols = gmat @ wmat                             # (n, L, c*k*k)
        # scatter columns back onto the padded image
        ii = (np.arange(ho) * s)[:, None, None, None] + np.arange(k)[None, None, :, None]
        jj = (np.arange(wo) * s)[None, :, None, None] + np.arange(k)[None, None, None, :]
        flat = (np.arange(c)[None, None, :, None, None] * hp + ii[:, :, None, :, :]) * wp + jj[:, :, None, :, :]
        flat = flat.reshape(ho * wo, c * k * k).ravel()
        gx = np.empty(xp_shape, dtype=g.dtype)
        size = c * hp * wp
        for b in range(n):
            gx[b] = np.bincount(flat, weights=gcols[b].ravel(), minlength=size).reshape(c, hp, wp)
        if p:
            gx = gx[:, :, p:-p, p:-p]
        gx = gx.astype(g.dtype, copy=False)
        _check_finite(gx)
        return gx


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties route gradient to the first window entry."""

    def forward(self, x, train=True):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeMismatch(f"spatial dims must be even, got {x.shape}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        self._idx = win.argmax(axis=-1)
        self._shape = x.shape
        return np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, c, h, w = self._shape
        gw = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gw, self._idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return gw.reshape(n, c, h, w)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32, name: str = "bn"):
        self.gamma = Param(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Param(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.momentum, self.eps = momentum, eps
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None
        self.name = name

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        zero = np.zeros_like(self.gamma.value)
        return {
            f"{self.name}.running_mean": zero if self.running_mean is None else self.running_mean,
            f"{self.name}.running_var": zero + 1 if self.running_var is None else self.running_var,
        }

    def load_buffers(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = mean
        self.running_var = var

    def forward(self, x, train=True):
        if train:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.running_mean is None:
                self.running_mean = mu.copy()
                self.running_var = var.copy()
            else:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu
                self.running_var = (1 - m) * self.running_var + m * var
        else:
            if self.running_mean is None:
                raise EvalBeforeTrain("eval-mode batchnorm before any training batch")
            mu, var = self.running_mean, self.running_var
        invstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[:, None, None]) * invstd[:, None, None]
        self._cache = (xhat, invstd, train)
        return self.gamma.value[:, None, None] * xhat + self.beta.value[:, None, None]

    def backward(self, g):
        xhat, invstd, train = self._cache
        self.gamma.grad[...] = (g * xhat).sum(axis=(0, 2, 3))
        self.beta.grad[...] = g.sum(axis=(0, 2, 3))
        gy = g * self.gamma.value[:, None, None]
        if not train:
            return gy * invstd[:, None, None]
        m = g.shape[0] * g.shape[2] * g.shape[3]
        s1 = gy.sum(axis=(0, 2, 3))
        s2 = (gy * xhat).sum(axis=(0, 2, 3))
        return (invstd[:, None, None] / m) * (m * gy - s1[:, None, None] - xhat * s2[:, None, None])


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng=None, dtype=np.float32, name="fc"):
        rng = rng or np.random.default_rng(0)
        self.weight = Param(_glorot(rng, (d_out, d_in), d_in, d_out, dtype), f"{name}.weight")
        self.bias = Param(np.zeros(d_out, dtype=dtype), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=True):
        if x.ndim != 2 or x.shape[1] != self.weight.value.shape[1]:
            raise ShapeMismatch(f"expected (N,{self.weight.value.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, g):
        self.weight.grad[...] = g.T @ self._x
        self.bias.grad[...] = g.sum(axis=0)
        return g @ self.weight.value


class PixelLinear(Layer):
    """Affine map along the channel axis, applied independently at each pixel."""

    def __init__(self, c_in: int, c_out: int, rng=None, dtype=np.float32, name="pfc"):
        rng = rng or np.random.default_rng(0)
        self.weight = Param(_glorot(rng, (c_out, c_in), c_in, c_out, dtype), f"{name}.weight")
        self.bias = Param(np.zeros(c_out, dtype=dtype), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.weight.value.shape[1]:
            raise ShapeMismatch(f"expected (N,{self.weight.value.shape[1]},H,W), got {x.shape}")
        self._x = x
        n, c, h, w = x.shape
        flat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, c)
        out = flat @ self.weight.value.T + self.bias.value
        return np.ascontiguousarray(out.reshape(n, h, w, -1).transpose(0, 3, 1, 2))

    def backward(self, g):
        n, o, h, w = g.shape
        c = self.weight.value.shape[1]
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        xflat = np.ascontiguousarray(self._x.transpose(0, 2, 3, 1)).reshape(-1, c)
        self.weight.grad[...] = gflat.T @ xflat
        self.bias.grad[...] = g.sum(axis=(0, 2, 3))
        gx = gflat @ self.weight.value
        return np.ascontiguousarray(gx.reshape(n, h, w, c).transpose(0, 3, 1, 2))


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, g):
        return np.where(self._mask, g, 0)


# python float, not np.float64: keeps float32 tensors in float32 under NEP 50
_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh approximation: x * 0.5 * (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return x * 0.5 * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


class GeLU(Layer):
    def forward(self, x, train=True):
        x2 = x * x
        t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
        self._x, self._x2, self._t = x, x2, t
        return x * 0.5 * (1.0 + t)

    def backward(self, g):
        x, x2, t = self._x, self._x2, self._t
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def fft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT over the trailing two axes (e^{-2 pi i ...})."""
    return scipy.fft.fft2(x, axes=(-2, -1))


def ifft2(spectrum: np.ndarray) -> np.ndarray:
    """Exact inverse of fft2 (1/d^2 normalization)."""
    return scipy.fft.ifft2(spectrum, axes=(-2, -1))


def _mode_counts(d: int, modes: int) -> tuple[int, int]:
    # low block [0:lo], high block [d-hi:]; clipped so the two never overlap
    lo = min(modes, (d + 1) // 2)
    hi = min(modes, d // 2)
    return lo, hi


class SpectralConv2d(Layer):
    """Per-mode channel mixing of the four low-frequency corner blocks."""

    def __init__(self, c_in: int, c_out: int, modes1: int = 16, modes2: int = 16,
                 rng=None, dtype=np.float32, name="spectral"):
        rng = rng or np.random.default_rng(0)
        self.c_in, self.c_out = c_in, c_out
        self.modes1, self.modes2 = modes1, modes2
        self.dtype = dtype
        bound = 1.0 / (c_in * c_out)
        self._weights: list[tuple[Param, Param]] = []
        for corner in range(4):
            shape = (c_in, c_out, modes1, modes2)
            re = Param(rng.uniform(-bound, bound, shape).astype(dtype), f"{name}.w{corner}_re")
            im = Param(rng.uniform(-bound, bound, shape).astype(dtype), f"{name}.w{corner}_im")
            self._weights.append((re, im))

    def params(self):
        return [p for pair in self._weights for p in pair]

    def _corners(self, d1: int, d2: int):
        lo1, hi1 = _mode_counts(d1, self.modes1)
        lo2, hi2 = _mode_counts(d2, self.modes2)
        return [
            (slice(0, lo1), slice(0, lo2), lo1, lo2),
            (slice(0, lo1), slice(d2 - hi2, d2), lo1, hi2),
            (slice(d1 - hi1, d1), slice(0, lo2), hi1, lo2),
            (slice(d1 - hi1, d1), slice(d2 - hi2, d2), hi1, hi2),
        ]

    def forward(self, x, train=True):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"expected (N,{self.c_in},H,W), got {x.shape}")
        n, _, d1, d2 = x.shape
        spectrum = fft2(x)
        out_spec = np.zeros((n, self.c_out, d1, d2), dtype=spectrum.dtype)
        self._slices = []
        for (s1, s2, m1, m2), (re, im) in zip(self._corners(d1, d2), self._weights):
            r = re.value[:, :, :m1, :m2] + 1j * im.value[:, :, :m1, :m2]
            rm = np.ascontiguousarray(r.transpose(2, 3, 0, 1))          # (m, c_in, c_out)
            tm = np.ascontiguousarray(
                spectrum[:, :, s1, s2].transpose(2, 3, 0, 1)
            ).reshape(m1 * m2, n, self.c_in)
            mixed = tm @ rm.reshape(m1 * m2, self.c_in, self.c_out)
            out_spec[:, :, s1, s2] = mixed.reshape(m1, m2, n, self.c_out).transpose(2, 3, 0, 1)
            self._slices.append((s1, s2, m1, m2, tm))
        self._shape = x.shape
        out = ifft2(out_spec).real.astype(x.dtype, copy=False)
        _check_finite(out)
        return out

    def backward(self, g):
        n, _, d1, d2 = self._shape
        gz = fft2(g) / (d1 * d2)
        gf = np.zeros((n, self.c_in, d1, d2), dtype=gz.dtype)
        for (s1, s2, m1, m2, tm), (re, im) in zip(self._slices, self._weights):
            r = re.value[:, :, :m1, :m2] + 1j * im.value[:, :, :m1, :m2]
            rm = r.transpose(2, 3, 0, 1).reshape(m1 * m2, self.c_in, self.c_out)
            hm = np.ascontiguousarray(
                gz[:, :, s1, s2].transpose(2, 3, 0, 1)
            ).reshape(m1 * m2, n, self.c_out)
            gfm = hm @ np.conj(rm.transpose(0, 2, 1))                   # (m, n, c_in)
            gf[:, :, s1, s2] = gfm.reshape(m1, m2, n, self.c_in).transpose(2, 3, 0, 1)
            drm = np.conj(tm.transpose(0, 2, 1)) @ hm                   # (m, c_in, c_out)
            dr = drm.reshape(m1, m2, self.c_in, self.c_out).transpose(2, 3, 0, 1)
            re.grad[...] = 0
            im.grad[...] = 0
            re.grad[:, :, :m1, :m2] = dr.real.astype(re.value.dtype)
            im.grad[:, :, :m1, :m2] = dr.imag.astype(im.value.dtype)
        gx = (ifft2(gf).real * (d1 * d2)).astype(g.dtype, copy=False)
        _check_finite(gx)
        return gx


class Adam:
    """Standard Adam with bias correction; zeroes gradients after each step."""

    def __init__(self, params: list[Param], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            p.value -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)
            p.zero_grad()


def grad_check(loss_fn, arrays, eps: float = 1e-5, max_entries: int | None = None,
               machine_eps: float = 2.3e-16) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` runs forward and backward, returning the scalar loss and
    overwriting the ``grad`` of every (value, grad) pair in ``arrays``. Large
    arrays are subsampled deterministically when ``max_entries`` is set.
    Differences below the central-difference roundoff floor (machine eps times
    loss scale over eps) count as exact agreement: a dead unit's true-zero
    gradient is unresolvable by finite differences.
    """
    base = loss_fn()
    atol = 100.0 * machine_eps * max(1.0, abs(base)) / eps
    analytic = [np.array(g, copy=True) for _, g in arrays]
    worst = 0.0
    for (value, _), ga in zip(arrays, analytic):
        flat = value.ravel()
        gflat = ga.ravel()
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = np.linspace(0, n - 1, max_entries).astype(int)
        else:
            idxs = np.arange(n)
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn()
            flat[i] = old - eps
            lm = loss_fn()
            flat[i] = old
            numeric = (lp - lm) / (2 * eps)
            a = float(gflat[i])
            if abs(a - numeric) <= atol:
                continue
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    loss_fn()  # restore caches/grads for the unperturbed point
    return worst
