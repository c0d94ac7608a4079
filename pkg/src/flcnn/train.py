"""Noise corruption, patch sampling, Adam, and the training loop.

Training follows the residual recipe: sample clean patches, corrupt them
with additive white Gaussian noise, run the network in train mode, and
regress the estimate against the clean patch with MSE. Noise and patch
positions are resampled every batch. Everything is reproducible from the
config seed when run single-threaded.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (ArchConfig, ModelGraph, ParamStore, backward,
                    build_flashlight, count_params, forward, resolve_dtype,
                    save_checkpoint)


@dataclass
class TrainConfig:
    arch: ArchConfig = ArchConfig()
    sigma: float = 25.0          # noise std on the 0-255 scale
    epochs: int = 55
    epoch_length: int = 4096     # optimizer batches per epoch
    batch_size: int = 64
    patch_size: int = 64
    lr_initial: float = 1e-3
    lr_drop_epoch: int = 30
    lr_after: float = 1e-4
    seed: int = 0
    augment: bool = False
    dtype: str = "f32"

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for name in ("epoch_length", "batch_size", "lr_drop_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.patch_size < 16:
            raise ValueError("patch_size must be at least 16")
        resolve_dtype(self.dtype)


@dataclass
class AdamState:
    """First/second moment estimates mirroring the trainable entries."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: ParamStore, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    m = {e.name: np.zeros_like(e.array) for e in params.trainable_entries()}
    v = {e.name: np.zeros_like(e.array) for e in params.trainable_entries()}
    return AdamState(m=m, v=v, beta1=beta1, beta2=beta2, eps=eps)


@dataclass
class EpochRow:
    epoch: int
    mean_loss: float
    lr: float
    val_psnr: float | None
    wall_seconds: float


@dataclass
class TrainLog:
    rows: list[EpochRow] = field(default_factory=list)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


TRAIN_LOG_HEADER = "epoch,mean_loss,lr,val_psnr,wall_seconds"


def write_train_log_csv(log: TrainLog, path) -> None:
    """One row per epoch; val_psnr stays empty when validation is off."""
    lines = [TRAIN_LOG_HEADER]
    for r in log.rows:
        val = "" if r.val_psnr is None else repr(float(r.val_psnr))
        lines.append(f"{r.epoch},{float(r.mean_loss)!r},{float(r.lr)!r},"
                     f"{val},{r.wall_seconds:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def add_awgn(clean: np.ndarray, sigma_255: float, rng) -> np.ndarray:
    """clean + i.i.d. Gaussian noise with std sigma_255/255; no clipping."""
    if sigma_255 < 0:
        raise ValueError("sigma must be non-negative")
    clean = np.asarray(clean)
    if sigma_255 == 0:
        return clean.copy()
    rng = np.random.default_rng(rng)
    noise = rng.standard_normal(clean.shape, dtype=clean.dtype)
    return clean + noise * (sigma_255 / 255.0)


_DIHEDRAL = (
    lambda p: p,
    lambda p: np.rot90(p, 1),
    lambda p: np.rot90(p, 2),
    lambda p: np.rot90(p, 3),
    lambda p: np.flipud(p),
    lambda p: np.flipud(np.rot90(p, 1)),
    lambda p: np.flipud(np.rot90(p, 2)),
    lambda p: np.flipud(np.rot90(p, 3)),
)


def sample_patches(corpus: list[np.ndarray], patch: int, count: int, rng,
                   augment: bool = False) -> np.ndarray:
    """Random crops, uniform over images then positions, as (count,1,p,p)."""
    if not corpus:
        raise ValueError("corpus is empty")
    for i, img in enumerate(corpus):
        if img.ndim != 2:
            raise ValueError(f"corpus image {i} must be 2-D, got shape {img.shape}")
        if img.shape[0] < patch or img.shape[1] < patch:
            raise ValueError(
                f"corpus image {i} is {img.shape}, smaller than patch {patch}")
    rng = np.random.default_rng(rng)
    batch = np.empty((count, 1, patch, patch), dtype=corpus[0].dtype)
    for i in range(count):
        img = corpus[rng.integers(len(corpus))]
        y = rng.integers(img.shape[0] - patch + 1)
        x = rng.integers(img.shape[1] - patch + 1)
        crop = img[y:y + patch, x:x + patch]
        if augment:
            crop = _DIHEDRAL[rng.integers(8)](crop)
        batch[i, 0] = crop
    return batch


def mse_loss(yhat: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. yhat."""
    yhat = np.asarray(yhat)
    y = np.asarray(y)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    diff = yhat - y
    loss = float(np.mean(diff * diff))
    grad = diff * (2.0 / diff.size)
    return loss, grad


def adam_step(params: ParamStore, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the trainable entries."""
    entries = params.trainable_entries()
    names = {e.name for e in entries}
    if set(grads) != names:
        missing = names - set(grads)
        extra = set(grads) - names
        raise ValueError(f"gradients misaligned with parameters "
                         f"(missing {sorted(missing)}, extra {sorted(extra)})")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for e in entries:
        g = grads[e.name]
        if g.shape != e.array.shape:
            raise ValueError(f"gradient shape mismatch for {e.name!r}")
        m = state.m[e.name]
        v = state.v[e.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        e.array -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def lr_for_epoch(epoch: int, cfg: TrainConfig) -> float:
    """Two-level step schedule: lr_initial until lr_drop_epoch, then lr_after."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} out of range [0, {cfg.epochs})")
    return cfg.lr_initial if epoch < cfg.lr_drop_epoch else cfg.lr_after


def _validation_psnr(g: ModelGraph, val_corpus, sigma, seed, epoch) -> float:
    from .evaluate import psnr  # local import, avoids a cycle at module load

    rng = np.random.default_rng((seed, 0x5A1, epoch))
    scores = []
    for img in val_corpus:
        z = add_awgn(img[None, None].astype(g.dtype), sigma, rng)
        yhat, _ = forward(g, z, "infer")
        den = np.clip(yhat[0, 0].astype(np.float64) * 255.0, 0.0, 255.0)
        scores.append(psnr(img.astype(np.float64) * 255.0, den))
    return float(np.mean(scores))


def train(cfg: TrainConfig, train_corpus: list[np.ndarray],
          val_corpus: list[np.ndarray] | None = None,
          checkpoint_dir=None) -> tuple[ModelGraph, TrainLog]:
    """Run the full loop and return the trained model plus per-epoch log.

    ``train_corpus``/``val_corpus`` are 2-D arrays in [0, 1]. Each batch
    draws fresh patches and fresh noise. When ``checkpoint_dir`` is given,
    a checkpoint and an updated ``log.csv`` are written after every epoch.
    """
    if not train_corpus:
        raise ValueError("training corpus is empty")
    dtype = resolve_dtype(cfg.dtype)
    corpus = [np.ascontiguousarray(img, dtype=dtype) for img in train_corpus]
    val = None
    if val_corpus:
        val = [np.ascontiguousarray(img, dtype=dtype) for img in val_corpus]

    init_seed, data_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    g = build_flashlight(cfg.arch, dtype=cfg.dtype,
                         seed=np.random.default_rng(init_seed))
    g.sigma = cfg.sigma
    state = init_adam(g.params)
    log = TrainLog(adam_beta1=state.beta1, adam_beta2=state.beta2,
                   adam_eps=state.eps)
    rng = np.random.default_rng(data_seed)

    out_dir = None
    if checkpoint_dir is not None:
        out_dir = Path(checkpoint_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_for_epoch(epoch, cfg)
        losses = np.empty(cfg.epoch_length, dtype=np.float64)
        for step in range(cfg.epoch_length):
            clean = sample_patches(corpus, cfg.patch_size, cfg.batch_size,
                                   rng, cfg.augment)
            noisy = add_awgn(clean, cfg.sigma, rng)
            yhat, fwd_cache = forward(g, noisy, "train")
            loss, grad_y = mse_loss(yhat, clean)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss} at epoch {epoch} step {step}; "
                    f"lr={lr}, sigma={cfg.sigma}")
            grads = backward(g, fwd_cache, grad_y)
            adam_step(g.params, grads, state, lr)
            losses[step] = loss
        val_psnr = None
        if val is not None:
            val_psnr = _validation_psnr(g, val, cfg.sigma, cfg.seed, epoch)
        log.rows.append(EpochRow(epoch, float(losses.mean()), lr, val_psnr,
                                 time.perf_counter() - t0))
        if out_dir is not None:
            save_checkpoint(g, out_dir / f"epoch_{epoch:03d}.flcn")
            write_train_log_csv(log, out_dir / "log.csv")
    return g, log


def gradient_check(arch: ArchConfig, input_size=(10, 10), eps: float | None = None,
                   dtype: str = "f64", n_samples: int = 200, seed: int = 0,
                   zero_tol: float | None = None) -> float:
    """Compare whole-model backward with central finite differences.

    Uses the scalar loss 0.5 * sum(yhat**2) on a fixed random input and
    perturbs a random subsample of trainable parameters. Returns the
    maximum relative error |a - b| / max(|a|, |b|, 1e-12) over the
    accepted samples. ``eps`` defaults to 1e-4 in f64 and 2e-2 in f32,
    where forward rounding noise forces a larger step.

    Two kinds of uninformative samples are handled specially, since a
    genuine backward bug would show up on every sample rather than on
    these: a perturbation that flips any relu mask bit between the two
    probe points is redrawn (the centered difference does not estimate a
    derivative across a kink), and a sample where both estimates fall
    below ``zero_tol`` counts as an agreeing zero (conv biases feeding a
    train-mode batchnorm are exactly cancelled by the mean subtraction,
    leaving pure roundoff on both sides). ``zero_tol`` defaults to the
    finite-difference resolution of the dtype: 1e-10 in f64, 1e-2 in f32.
    """
    if eps is None:
        eps = 1e-4 if dtype == "f64" else 2e-2
    if zero_tol is None:
        zero_tol = 1e-10 if dtype == "f64" else 1e-2
    g = build_flashlight(arch, dtype=dtype, seed=seed)
    rng = np.random.default_rng(seed + 1)
    h, w = input_size
    z = rng.random((1, 1, h, w), dtype=resolve_dtype(dtype))
    relu_srcs = [n.inputs[0] for n in g.nodes if n.op == "relu"]

    def probe():
        yhat, fwd_cache = forward(g, z, "train")
        masks = [fwd_cache.outputs[i] > 0 for i in relu_srcs]
        return yhat.astype(np.float64), masks

    yhat, cache = forward(g, z, "train")
    grads = backward(g, cache, yhat.copy())

    entries = g.params.trainable_entries()
    sizes = np.array([e.array.size for e in entries])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    worst = 0.0
    accepted = 0
    for flat in rng.permutation(total):
        if accepted >= n_samples:
            break
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        entry = entries[which]
        idx = int(flat - offsets[which])
        original = entry.array.flat[idx]
        entry.array.flat[idx] = original + eps
        y_plus, masks_plus = probe()
        entry.array.flat[idx] = original - eps
        y_minus, masks_minus = probe()
        entry.array.flat[idx] = original
        if any(not np.array_equal(a, b) for a, b in zip(masks_plus, masks_minus)):
            continue
        # (L+ - L-)/(2 eps) for L = 0.5*sum(y^2), expanded pixelwise so the
        # two nearly equal loss sums are never subtracted from each other
        fd = float(np.sum((y_plus - y_minus) * (y_plus + y_minus))) / (4.0 * eps)
        an = float(grads[entry.name].flat[idx])
        if abs(an) >= zero_tol or abs(fd) >= zero_tol:
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-12))
        accepted += 1
    if accepted < min(n_samples, total):
        raise RuntimeError(
            f"only {accepted} of {n_samples} samples avoided relu kinks; "
            f"use a smaller eps")
    return worst
