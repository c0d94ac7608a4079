"""Dense NCHW tensors and the differentiable primitives built on them.

Tensors are plain numpy arrays of shape (n, c, h, w) in float32 or
float64. Every convolution here is stride-1 with "same" zero padding, so
spatial dimensions never change; that is what lets the network subtract
its output from its input at the end.

Each forward primitive has a matching backward that returns exact
gradients of the forward map. Nothing in this module keeps global state
apart from the optional debug validation switch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

SUPPORTED_DTYPES = (np.float32, np.float64)

_debug_validate = False


def set_debug_validation(enabled: bool) -> None:
    """Toggle finite-value checks after every primitive (off by default)."""
    global _debug_validate
    _debug_validate = bool(enabled)


def debug_validation_enabled() -> bool:
    return _debug_validate


def _checked(out: np.ndarray, op: str) -> np.ndarray:
    if _debug_validate and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return out


def check_nchw(x: np.ndarray, name: str = "input") -> np.ndarray:
    """Validate that ``x`` is a 4-D float array in a supported dtype."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must have shape (n, c, h, w), got {x.shape}")
    if x.dtype.type not in SUPPORTED_DTYPES:
        raise ValueError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


@dataclass
class ConvParams:
    """Weights (c_out, c_in, k, k) and bias (c_out,) of one convolution."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 4:
            raise ValueError(f"conv weights must be 4-D, got shape {w.shape}")
        co, ci, kh, kw = w.shape
        if kh != kw or kh not in (1, 3, 5):
            raise ValueError(f"kernel must be square with size 1, 3 or 5, got {kh}x{kw}")
        if co < 1 or ci < 1:
            raise ValueError("channel counts must be at least 1")
        b = np.asarray(self.bias)
        if b.shape != (co,):
            raise ValueError(f"bias must have shape ({co},), got {b.shape}")


@dataclass
class BnParams:
    """Per-channel batch normalization parameters and running statistics.

    ``running_mean``/``running_var`` may be None for a freshly created
    instance; train-mode forward initializes them to (0, 1) before the
    first update, while inference requires them to be present.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        c = np.asarray(self.gamma).shape[0]
        if np.asarray(self.beta).shape != (c,):
            raise ValueError("gamma and beta must have equal length")
        for stat in (self.running_mean, self.running_var):
            if stat is not None and np.asarray(stat).shape != (c,):
                raise ValueError("running statistics must match channel count")
        if self.running_var is not None and np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class BnCache:
    """Intermediate values of a train-mode batchnorm forward pass."""

    __slots__ = ("xhat", "inv_std", "gamma")

    def __init__(self, xhat, inv_std, gamma):
        self.xhat = xhat
        self.inv_std = inv_std
        self.gamma = gamma


# -- convolution -----------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Lower the padded input to a (c*kh*kw, n*h*w) patch matrix."""
    n, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    sn, sc, sh, sw = xp.strides
    win = as_strided(xp, (c, kh, kw, n, h, w), (sc, sh, sw, sn, sh, sw))
    return win.reshape(c * kh * kw, n * h * w)


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int) -> np.ndarray:
    """Scatter-add a (c*kh*kw, n*h*w) gradient matrix back to input shape."""
    n, c, h, w = x_shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    # accumulate channel-major so both sides of += share memory layout
    dpad = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
    d6 = dcols.reshape(c, kh, kw, n, h, w)
    for dy in range(kh):
        for dx in range(kw):
            dpad[:, :, dy:dy + h, dx:dx + w] += d6[:, dy, dx]
    core = dpad[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dpad
    return np.ascontiguousarray(core.transpose(1, 0, 2, 3))


def _forward_impl(x: np.ndarray, p: ConvParams, keep_cols: bool):
    x = check_nchw(x)
    co, ci, kh, kw = p.weights.shape
    n, c, h, w = x.shape
    if c != ci:
        raise ValueError(f"input has {c} channels but weights expect {ci}")
    if h == 0 or w == 0:
        raise ValueError("spatial dimensions must be non-zero")
    cols = None
    if kh == 1:
        out = np.tensordot(p.weights[:, :, 0, 0], x, axes=([1], [1]))
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    else:
        cols = _im2col(x, kh, kw)
        out = (p.weights.reshape(co, -1) @ cols).reshape(co, n, h, w)
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        if not keep_cols:
            cols = None
    out += p.bias.reshape(1, co, 1, 1)
    return _checked(out, "conv2d_forward"), cols


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Same-padded stride-1 convolution of an NCHW batch.

    out[b, o, y, x] = bias[o] + sum_{i, dy, dx} w[o, i, dy, dx] *
    padded(x)[b, i, y + dy, x + dx].
    """
    return _forward_impl(x, p, keep_cols=False)[0]


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, p: ConvParams,
                    cols: np.ndarray | None = None):
    """Gradients of conv2d_forward w.r.t. input, weights and bias.

    ``cols`` optionally reuses the lowered patch matrix of the forward
    pass; when absent it is recomputed from ``x``.
    """
    grad_out = check_nchw(grad_out, "grad_out")
    x = check_nchw(x)
    co, ci, kh, kw = p.weights.shape
    n, c, h, w = x.shape
    if grad_out.shape != (n, co, h, w):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match output shape {(n, co, h, w)}")
    grad_b = grad_out.sum(axis=(0, 2, 3))
    gflat = grad_out.transpose(1, 0, 2, 3).reshape(co, -1)
    if kh == 1:
        xflat = x.transpose(1, 0, 2, 3).reshape(ci, -1)
        grad_w = (gflat @ xflat.T).reshape(co, ci, 1, 1)
        grad_in = np.tensordot(p.weights[:, :, 0, 0].T, grad_out, axes=([1], [1]))
        grad_in = np.ascontiguousarray(grad_in.transpose(1, 0, 2, 3))
    else:
        if cols is None:
            cols = _im2col(x, kh, kw)
        grad_w = (gflat @ cols.T).reshape(co, ci, kh, kw)
        dcols = p.weights.reshape(co, -1).T @ gflat
        grad_in = _col2im(dcols, x.shape, kh, kw)
    return _checked(grad_in, "conv2d_backward"), grad_w, grad_b


# -- batch normalization ----------------------------------------------------

def batchnorm_forward(x: np.ndarray, p: BnParams, mode: str = "train"):
    """Per-channel batch normalization.

    Train mode standardizes with batch statistics over (n, h, w), applies
    the affine (gamma, beta), and updates the caller-owned running stats
    as running <- (1 - momentum) * running + momentum * batch_stat.
    Inference standardizes with the running statistics and returns an
    empty cache.
    """
    x = check_nchw(x)
    c = x.shape[1]
    if p.channels != c:
        raise ValueError(f"input has {c} channels but batchnorm expects {p.channels}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    gamma = p.gamma.reshape(1, c, 1, 1)
    beta = p.beta.reshape(1, c, 1, 1)
    if mode == "infer":
        if p.running_mean is None or p.running_var is None:
            raise ValueError("inference requires initialized running statistics")
        inv_std = 1.0 / np.sqrt(p.running_var + p.epsilon)
        out = gamma * ((x - p.running_mean.reshape(1, c, 1, 1))
                       * inv_std.reshape(1, c, 1, 1)) + beta
        return _checked(out.astype(x.dtype, copy=False), "batchnorm_forward"), None

    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + np.asarray(p.epsilon, dtype=x.dtype))
    xhat = (x - mu.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = gamma * xhat + beta
    if p.running_mean is None:
        p.running_mean = np.zeros(c, dtype=x.dtype)
    if p.running_var is None:
        p.running_var = np.ones(c, dtype=x.dtype)
    p.running_mean *= 1.0 - p.momentum
    p.running_mean += p.momentum * mu
    p.running_var *= 1.0 - p.momentum
    p.running_var += p.momentum * var
    cache = BnCache(xhat, inv_std, p.gamma)
    return _checked(out, "batchnorm_forward"), cache


def batchnorm_backward(grad_out: np.ndarray, cache: BnCache | None):
    """Gradients of the train-mode map, including the mean/variance terms."""
    if cache is None:
        raise ValueError("batchnorm_backward requires a train-mode cache")
    grad_out = check_nchw(grad_out, "grad_out")
    xhat, inv_std, gamma = cache.xhat, cache.inv_std, cache.gamma
    if grad_out.shape != xhat.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match cache {xhat.shape}")
    n, c, h, w = grad_out.shape
    m = n * h * w
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    # gamma factors out of dL/dxhat, and the two per-channel sums it needs
    # are exactly grad_beta and grad_gamma
    scale = (gamma * inv_std / m).reshape(1, c, 1, 1)
    grad_in = scale * (m * grad_out
                       - grad_beta.reshape(1, c, 1, 1)
                       - xhat * grad_gamma.reshape(1, c, 1, 1))
    return _checked(grad_in, "batchnorm_backward"), grad_gamma, grad_beta


# -- pointwise ops ----------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0)


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    """Stack tensors along the channel axis, preserving list order."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    first = check_nchw(inputs[0])
    for i, t in enumerate(inputs[1:], start=1):
        t = check_nchw(t, f"input {i}")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ValueError(
                f"input {i} has shape {t.shape}, incompatible with {first.shape}")
    if len(inputs) == 1:
        return first
    return np.concatenate(inputs, axis=1)


def concat_backward(grad_out: np.ndarray, channel_splits: list[int]) -> list[np.ndarray]:
    """Slice the cotangent back into per-input pieces of the given widths."""
    grad_out = check_nchw(grad_out, "grad_out")
    if sum(channel_splits) != grad_out.shape[1]:
        raise ValueError(
            f"splits {channel_splits} do not sum to {grad_out.shape[1]} channels")
    pieces = []
    start = 0
    for width in channel_splits:
        pieces.append(np.ascontiguousarray(grad_out[:, start:start + width]))
        start += width
    return pieces


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a + b with strict shape equality; the backward map is the identity
    into both operands."""
    a = check_nchw(a, "a")
    b = check_nchw(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b
