"""Image-fidelity metrics computable without pretrained networks: PSNR and
SSIM. CLIP score and LPIPS are reported as unavailable rather than
approximated."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_LUMA = np.array([0.299, 0.587, 0.114])  # Rec. 601


class MetricError(ValueError):
    pass


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"resolution mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for images in [0, 1]; identical images
    report the 99 dB cap."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP_DB)


def _luma(img):
    if img.ndim == 3:
        return img @ _LUMA
    return img


def _gaussian_taps(width, sigma):
    half = (width - 1) / 2.0
    x = np.arange(width) - half
    taps = np.exp(-(x**2) / (2.0 * sigma**2))
    return taps / taps.sum()


def ssim(a, b):
    """Mean local SSIM on luma with an 11x11 Gaussian window (sigma 1.5),
    K1 = 0.01, K2 = 0.03, dynamic range 1. Windows are fully interior, as in
    the original formulation."""
    a, b = _check_pair(a, b)
    x = _luma(a)
    y = _luma(b)
    h, w = x.shape
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise MetricError(f"image {w}x{h} is smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    taps = _gaussian_taps(_SSIM_WINDOW, _SSIM_SIGMA)

    def filt(img):
        tmp = correlate1d(img, taps, axis=0, mode="nearest")
        return correlate1d(tmp, taps, axis=1, mode="nearest")

    margin = _SSIM_WINDOW // 2
    crop = (slice(margin, h - margin), slice(margin, w - margin))
    mu_x = filt(x)[crop]
    mu_y = filt(y)[crop]
    xx = filt(x * x)[crop] - mu_x**2
    yy = filt(y * y)[crop] - mu_y**2
    xy = filt(x * y)[crop] - mu_x * mu_y
    c1 = (_SSIM_K1 * 1.0) ** 2
    c2 = (_SSIM_K2 * 1.0) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """PSNR/SSIM summary; per_view carries the per-image breakdown when
    several views are evaluated."""

    psnr_db: float
    ssim: float
    per_view: list = field(default_factory=list)
    clip_score: str = "unavailable"
    lpips: str = "unavailable"

    def to_dict(self):
        doc = {
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "clip_score": self.clip_score,
            "lpips": self.lpips,
        }
        if self.per_view:
            doc["per_view"] = [dict(v) for v in self.per_view]
        return doc


def metric_report(images_a, images_b):
    """Build a MetricReport for one image pair or parallel lists of views."""
    single = hasattr(images_a, "ndim") or (
        isinstance(images_a, (list, tuple)) and np.asarray(images_a[0]).ndim == 1
    )
    if single:
        images_a = [images_a]
        images_b = [images_b]
    if len(images_a) != len(images_b):
        raise MetricError("view counts differ")
    views = []
    for i, (a, b) in enumerate(zip(images_a, images_b)):
        views.append({"view": i, "psnr_db": psnr(a, b), "ssim": ssim(a, b)})
    report = MetricReport(
        psnr_db=float(np.mean([v["psnr_db"] for v in views])),
        ssim=float(np.mean([v["ssim"] for v in views])),
        per_view=views if len(views) > 1 else [],
    )
    return report
