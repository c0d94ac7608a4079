"""PSNR/SSIM metrics and seeded dataset-level evaluation reports.

Metrics operate on float images on the 0-255 scale. The test image is
clipped into range before comparison, with no 8-bit re-quantization.
SSIM is the single-scale variant with an 11x11 Gaussian window
(sigma 1.5), K1=0.01, K2=0.03, L=255, averaged over the valid region.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imageio import read_pgm, to_unit
from .model import ModelGraph, forward
from .train import add_awgn

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_L = 255.0
SSIM_PARAMS = (f"gaussian{SSIM_WINDOW},sigma={SSIM_SIGMA},K1={SSIM_K1},"
               f"K2={SSIM_K2},L={SSIM_L:g}")

REPORT_HEADER = "dataset,sigma,image,psnr_noisy,psnr,ssim"
AGGREGATE_IMAGE_NAME = "__mean__"


@dataclass
class EvalRow:
    dataset: str
    sigma: float
    image: str
    psnr_noisy: float
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    dataset: str
    sigma: float
    rows: list[EvalRow] = field(default_factory=list)
    mean_psnr_noisy: float = 0.0
    mean_psnr: float = 0.0
    mean_ssim: float = 0.0
    ssim_params: str = SSIM_PARAMS

    def recompute_aggregates(self) -> None:
        self.mean_psnr_noisy = float(np.mean([r.psnr_noisy for r in self.rows]))
        self.mean_psnr = float(np.mean([r.psnr for r in self.rows]))
        self.mean_ssim = float(np.mean([r.ssim for r in self.rows]))


def psnr(ref: np.ndarray, test: np.ndarray) -> float:
    """10*log10(255^2 / MSE) after clipping ``test`` to [0, 255]."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    diff = ref - np.clip(test, 0.0, 255.0)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(255.0 ** 2 / mse)


def _gaussian_kernel_1d(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (offsets / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable correlation, no padding; shrinks each axis by len(k)-1
    out = sliding_window_view(img, k.size, axis=0) @ k
    return sliding_window_view(out, k.size, axis=1) @ k


def ssim(ref: np.ndarray, test: np.ndarray) -> float:
    """Mean structural similarity of two same-shape 0-255 images."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {test.shape}")
    if ref.ndim != 2 or min(ref.shape) < SSIM_WINDOW:
        raise ValueError(
            f"images must be 2-D and at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {ref.shape}")
    k = _gaussian_kernel_1d(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu1 = _filter_valid(ref, k)
    mu2 = _filter_valid(test, k)
    var1 = _filter_valid(ref * ref, k) - mu1 * mu1
    var2 = _filter_valid(test * test, k) - mu2 * mu2
    cov = _filter_valid(ref * test, k) - mu1 * mu2
    ssim_map = (((2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2))
                / ((mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2)))
    return float(ssim_map.mean())


def image_noise_rng(seed: int, image_name: str) -> np.random.Generator:
    """Per-image generator derived from (seed, name); stable under parallelism."""
    digest = hashlib.sha256(image_name.encode("utf-8")).digest()
    return np.random.default_rng((seed, int.from_bytes(digest[:8], "little")))


def evaluate_dataset(model: ModelGraph, image_dir, sigma: float, seed: int = 0,
                     dataset_name: str | None = None,
                     save_images_dir=None) -> EvalReport:
    """Corrupt, denoise, and score every PGM image in a directory.

    Images are processed whole (no tiling) in lexicographic filename
    order. The unclipped noisy image feeds the network; clipping happens
    only for metric computation. ``save_images_dir`` optionally receives
    the denoised PGMs.
    """
    image_dir = Path(image_dir)
    paths = sorted(image_dir.glob("*.pgm"))
    if not paths:
        raise ValueError(f"no .pgm images found in {image_dir}")
    name = dataset_name if dataset_name is not None else image_dir.name

    out_dir = None
    if save_images_dir is not None:
        out_dir = Path(save_images_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    report = EvalReport(dataset=name, sigma=float(sigma))
    for path in paths:
        img = read_pgm(path)
        ref = img.pixels.astype(np.float64)
        unit = to_unit(img, dtype=model.dtype)
        rng = image_noise_rng(seed, path.name)
        noisy = add_awgn(unit, sigma, rng)
        yhat, _ = forward(model, noisy, "infer")
        denoised = np.clip(yhat[0, 0].astype(np.float64) * 255.0, 0.0, 255.0)
        noisy255 = np.clip(noisy[0, 0].astype(np.float64) * 255.0, 0.0, 255.0)
        report.rows.append(EvalRow(
            dataset=name, sigma=float(sigma), image=path.name,
            psnr_noisy=psnr(ref, noisy255),
            psnr=psnr(ref, denoised),
            ssim=ssim(ref, denoised)))
        if out_dir is not None:
            from .imageio import GrayImage, write_pgm
            pixels = np.floor(denoised + 0.5).astype(np.uint8)
            write_pgm(GrayImage(img.width, img.height, pixels),
                      out_dir / path.name)
    report.recompute_aggregates()
    return report


def write_report_csv(report: EvalReport, path) -> None:
    """Rows then a `__mean__` aggregate; PSNR to 2 decimals, SSIM to 4."""
    lines = [REPORT_HEADER]
    for r in report.rows:
        lines.append(f"{r.dataset},{r.sigma:g},{r.image},"
                     f"{r.psnr_noisy:.2f},{r.psnr:.2f},{r.ssim:.4f}")
    if report.rows:
        lines.append(f"{report.dataset},{report.sigma:g},{AGGREGATE_IMAGE_NAME},"
                     f"{report.mean_psnr_noisy:.2f},{report.mean_psnr:.2f},"
                     f"{report.mean_ssim:.4f}")
    Path(path).write_text("\n".join(lines) + "\n")
