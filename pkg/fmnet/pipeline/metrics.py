"""
Reconstruction quality metrics
RMSE, PSNR, SAM and SSIM on [0, 1] spectral images rescaled to an 8-bit
range, per-pixel spectral error maps and per-image reports
"""
import csv
import math
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import structlog
from skimage.metrics import structural_similarity

from fmnet.models import ImageMetrics, MetricsReport
from fmnet.utils.errors import InputError

logger = structlog.get_logger()

DEFAULT_SCALE = 255.0
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

REPORT_COLUMNS = ["image_id", "rmse", "psnr", "sam", "ssim"]


def _pair(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise InputError(f"expected B×H×W images, got shape {a.shape}")
    return a, b


def mse(a: np.ndarray, b: np.ndarray, scale: float = DEFAULT_SCALE) -> float:
    a, b = _pair(a, b)
    return float(np.mean(((a - b) * scale) ** 2))


def rmse(a: np.ndarray, b: np.ndarray, scale: float = DEFAULT_SCALE) -> float:
    return math.sqrt(mse(a, b, scale))


def psnr(a: np.ndarray, b: np.ndarray, scale: float = DEFAULT_SCALE) -> float:
    """10·log10(scale²/MSE); +inf for identical images"""
    error = mse(a, b, scale)
    if error == 0.0:
        return math.inf
    return 10.0 * math.log10(scale ** 2 / error)


def sam(a: np.ndarray, b: np.ndarray) -> float:
    """Mean spectral angle in degrees; pixels where either spectrum is zero count as 0"""
    a, b = _pair(a, b)
    dot = np.einsum("bhw,bhw->hw", a, b)
    norms = np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0)
    valid = norms > 0
    cosine = np.ones_like(dot)
    cosine[valid] = dot[valid] / norms[valid]
    angles = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    return float(np.mean(angles))


def ssim(a: np.ndarray, b: np.ndarray, scale: float = DEFAULT_SCALE) -> float:
    """
    Single-scale SSIM per band (11×11 Gaussian window, σ=1.5, population
    statistics) averaged over valid window positions and then over bands
    """
    a, b = _pair(a, b)
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise InputError(f"SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {a.shape[1:]}")
    scores = [
        structural_similarity(
            x * scale, y * scale,
            data_range=scale,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
        )
        for x, y in zip(a, b)
    ]
    return float(np.mean(scores))


def spectral_error_map(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel mean squared error across bands, H×W"""
    pred, gt = _pair(pred, gt)
    return np.mean((pred - gt) ** 2, axis=0)


def image_metrics(image_id: str, pred: np.ndarray, gt: np.ndarray, scale: float = DEFAULT_SCALE) -> ImageMetrics:
    return ImageMetrics(
        image_id=image_id,
        rmse=rmse(pred, gt, scale),
        psnr=min(psnr(pred, gt, scale), PSNR_CAP),
        sam=sam(pred, gt),
        ssim=ssim(pred, gt, scale),
    )


def summarize(per_image: Sequence[ImageMetrics]) -> MetricsReport:
    if not per_image:
        raise InputError("no images to summarize")
    return MetricsReport(
        rmse=float(np.mean([m.rmse for m in per_image])),
        psnr=float(np.mean([m.psnr for m in per_image])),
        sam=float(np.mean([m.sam for m in per_image])),
        ssim=float(np.mean([m.ssim for m in per_image])),
        per_image=list(per_image),
    )


def evaluate_pairs(
    preds: Sequence[np.ndarray],
    gts: Sequence[np.ndarray],
    ids: Sequence[str],
    scale: float = DEFAULT_SCALE,
) -> MetricsReport:
    """Metrics per image, then their means"""
    if not (len(preds) == len(gts) == len(ids)):
        raise InputError(f"got {len(preds)} predictions, {len(gts)} references and {len(ids)} ids")
    report = summarize([image_metrics(i, p, g, scale) for i, p, g in zip(ids, preds, gts)])
    logger.debug("Evaluated images", count=len(ids), rmse=report.rmse, psnr=report.psnr)
    return report


def write_report_csv(report: MetricsReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_COLUMNS)
        for m in report.per_image:
            writer.writerow([m.image_id, repr(m.rmse), repr(m.psnr), repr(m.sam), repr(m.ssim)])
        writer.writerow(["MEAN", repr(report.rmse), repr(report.psnr), repr(report.sam), repr(report.ssim)])
    logger.info("Wrote metrics report", path=str(path), images=len(report.per_image))
    return path
