"""Shared fixtures and independent oracles for the test suite.

The oracles here deliberately avoid the library's own vectorized code
paths: convolution is a quadruple loop, losses are python-level sums, and
Adam is a scalar re-implementation, so they can catch bugs in the fast
implementations.
"""

import numpy as np
import pytest

from flcnn.imageio import GrayImage, write_pgm


def conv2d_direct(x, weights, bias):
    """Direct same-padded convolution via explicit loops (f64)."""
    n, c, h, w = x.shape
    co, ci, kh, kw = weights.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(np.asarray(x, dtype=np.float64),
                ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, co, h, w), dtype=np.float64)
    for b in range(n):
        for o in range(co):
            for y in range(h):
                for xcol in range(w):
                    acc = float(bias[o])
                    for i in range(ci):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += float(weights[o, i, dy, dx]) \
                                    * float(xp[b, i, y + dy, xcol + dx])
                    out[b, o, y, xcol] = acc
    return out


def finite_difference(loss_fn, array, eps=1e-4):
    """Central finite differences of a scalar function w.r.t. one array."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        lp = loss_fn()
        flat[i] = orig - eps
        lm = loss_fn()
        flat[i] = orig
        gflat[i] = (lp - lm) / (2.0 * eps)
    return grad


def max_rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def scalar_adam_reference(grad_fn, x0, lr, steps,
                          beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain-python Adam on one scalar; returns the iterate trajectory."""
    x, m, v = float(x0), 0.0, 0.0
    xs = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (v_hat ** 0.5 + eps)
        xs.append(x)
    return xs


def synthetic_image(rng, h, w, lo=0.1, hi=0.9):
    """Piecewise-smooth grayscale test image in [lo, hi], unit scale.

    Mixes a gradient background, Gaussian blobs, constant rectangles and a
    faint sinusoid: enough structure for denoising to be learnable while
    staying away from the 0/255 clip boundaries.
    """
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = rng.uniform(-1, 1) * xx / w + rng.uniform(-1, 1) * yy / h
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(h / 8, h / 3)
        img += rng.uniform(-0.8, 0.8) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    for _ in range(int(rng.integers(2, 6))):
        y0 = int(rng.integers(0, max(h - 4, 1)))
        x0 = int(rng.integers(0, max(w - 4, 1)))
        y1 = int(rng.integers(y0 + 2, min(h, y0 + h // 2) + 1))
        x1 = int(rng.integers(x0 + 2, min(w, x0 + w // 2) + 1))
        img[y0:y1, x0:x1] += rng.uniform(-0.5, 0.5)
    fy, fx = rng.uniform(2, 6, 2)
    img += 0.08 * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w))
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return lo + (hi - lo) * img


def synthetic_bytes(rng, h, w, lo=0.1, hi=0.9):
    unit = synthetic_image(rng, h, w, lo, hi)
    return np.floor(unit * 255.0 + 0.5).astype(np.uint8)


def textured_image(rng, h, w):
    """Photograph-like image: cartoon base plus fine correlated texture,
    so that every local window carries structure (0-255 float)."""
    base = synthetic_bytes(rng, h, w).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    noise = rng.standard_normal((h, w))
    k = np.ones(5) / 5
    smooth = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 0, noise)
    smooth = np.apply_along_axis(lambda r: np.convolve(r, k, "same"), 1, smooth)
    return np.clip(base + 25 * smooth + 12 * np.sin(xx / 2.1) * np.sin(yy / 3.3),
                   0, 255)


def make_pgm_dir(path, count, h, w, seed=0):
    """Write ``count`` synthetic PGMs into ``path`` and return their names."""
    path.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(count):
        pixels = synthetic_bytes(rng, h, w)
        name = f"img_{i:02d}.pgm"
        write_pgm(GrayImage(w, h, pixels), path / name)
        names.append(name)
    return names


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
