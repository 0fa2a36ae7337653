"""PSNR with quartile aggregation and Gaussian-window SSIM."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.ndimage import correlate1d

from .image import Image

PSNR_CAP = 100.0
COLUMNS = ("sRGB → XYZ", "Rec. XYZ → sRGB", "GT XYZ → sRGB")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Image) else np.asarray(x, dtype=float)


def psnr(image, reference, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over all pixels and channels; inf for identical inputs."""
    a, b = _as_array(image), _as_array(reference)
    if isinstance(image, Image) and isinstance(reference, Image) and image.state is not reference.state:
        raise ValueError(f"color state mismatch: {image.state.value} vs {reference.state.value}")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def linear_percentile(values, q: float) -> float:
    """Linear interpolation between closest ranks (index q*(n-1))."""
    s = np.sort(np.asarray(values, dtype=float))
    pos = q * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return float(s[lo] + (pos - lo) * (s[hi] - s[lo]))


@dataclass
class PsnrReport:
    per_image: list[float]
    avg: float
    q1: float
    q2: float
    q3: float


def psnr_stats(values: Iterable[float]) -> PsnrReport:
    """Mean and quartiles. Values above the cap (including inf) count as the cap."""
    per_image = [float(v) for v in values]
    if not per_image:
        raise ValueError("psnr_stats needs at least one value")
    capped = np.minimum(np.array(per_image), PSNR_CAP)
    return PsnrReport(
        per_image,
        float(np.mean(capped)),
        linear_percentile(capped, 0.25),
        linear_percentile(capped, 0.5),
        linear_percentile(capped, 0.75),
    )


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only positions where the window fits
    half = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[half : img.shape[0] - half, half : img.shape[1] - half]


def ssim(image, reference, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> float:
    """Mean SSIM over all valid window positions, averaged over channels."""
    a, b = _as_array(image), _as_array(reference)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[1:]) < window:
        raise ValueError(f"image {a.shape[1:]} smaller than the {window}x{window} SSIM window")
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    w = gaussian_window(window, sigma)
    scores = []
    for x, y in zip(a, b):
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        scores.append(float(smap.mean()))
    return float(np.mean(scores))


@dataclass
class ProtocolReport:
    columns: dict[str, PsnrReport]  # keyed by COLUMNS, in that order
    ssim_per_image: list[float]

    @property
    def ssim_avg(self) -> float:
        return float(np.mean(self.ssim_per_image))


def evaluate_protocol(model_f, model_g, pairs) -> ProtocolReport:
    """Three PSNR columns plus SSIM of the sRGB -> XYZ reconstruction.

    ``pairs`` yields (srgb Image, xyz Image).
    """
    from .mapping import apply

    cols: dict[str, list[float]] = {c: [] for c in COLUMNS}
    ssims = []
    for srgb, xyz in pairs:
        rec_xyz = apply(model_f, srgb)
        cols[COLUMNS[0]].append(psnr(rec_xyz, xyz))
        cols[COLUMNS[1]].append(psnr(apply(model_g, rec_xyz), srgb))
        cols[COLUMNS[2]].append(psnr(apply(model_g, xyz), srgb))
        ssims.append(ssim(rec_xyz, xyz))
    if not ssims:
        raise ValueError("evaluation set is empty")
    return ProtocolReport({c: psnr_stats(v) for c, v in cols.items()}, ssims)


def format_report(report: ProtocolReport, method: str = "model") -> str:
    """Table-style text: one row per method, Avg/Q1/Q2/Q3 per column group, then SSIM."""
    head = ["method"]
    row = [method]
    for col in COLUMNS:
        r = report.columns[col]
        head += [f"{col} {k}" for k in ("Avg", "Q1", "Q2", "Q3")]
        row += [f"{v:.4f}" for v in (r.avg, r.q1, r.q2, r.q3)]
    lines = ["\t".join(head), "\t".join(row), f"Average SSIM\t{report.ssim_avg:.6f}"]
    return "\n".join(lines) + "\n"
