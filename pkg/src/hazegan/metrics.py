"""Full-reference image quality metrics: PSNR, SSIM and CIEDE2000.

All functions take 8-bit H x W x 3 RGB rasters unless noted otherwise.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import list_images, read_rgb

log = logging.getLogger(__name__)

# BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# sRGB (D65) linear RGB -> XYZ
SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
XYZ_TO_SRGB = np.linalg.inv(SRGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b, data_range: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_shape(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - size // 2
    k = np.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def _filter_valid(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation: no border extrapolation
    n = k.size
    out = sliding_window_view(img, n, axis=0) @ k
    return sliding_window_view(out, n, axis=1) @ k


def ssim_map(x: np.ndarray, y: np.ndarray, data_range: float = 255.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(x, k)
    mu_y = _filter_valid(y, k)
    sxx = _filter_valid(x * x, k) - mu_x * mu_x
    syy = _filter_valid(y * y, k) - mu_y * mu_y
    sxy = _filter_valid(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return num / den


def to_luma(raster) -> np.ndarray:
    return np.asarray(raster, dtype=np.float64) @ LUMA_WEIGHTS


def ssim(a, b, mode: str = "luma") -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, L=255).

    ``mode="luma"`` scores the BT.601 luma plane; ``mode="rgb"`` averages the
    three per-channel scores.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    _check_same_shape(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    if mode == "luma":
        return float(ssim_map(to_luma(a), to_luma(b)).mean())
    if mode == "rgb":
        return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[-1])]))
    raise ValueError(f"unknown SSIM mode {mode!r}")


# ---------------------------------------------------------------------------
# colour
# ---------------------------------------------------------------------------

_LAB_EPS = (6 / 29) ** 3
_LAB_KAPPA = 3 * (6 / 29) ** 2


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.abs(c) ** (1 / 2.4) - 0.055)


def rgb_to_lab(raster) -> np.ndarray:
    """8-bit sRGB -> CIELAB (D65)."""
    rgb = srgb_to_linear(np.asarray(raster, dtype=np.float64) / 255.0)
    xyz = rgb @ SRGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), xyz / _LAB_KAPPA + 4 / 29)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def lab_to_rgb(lab) -> np.ndarray:
    """CIELAB (D65) -> sRGB on the [0, 255] scale, unrounded and unclipped."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16) / 116
    fx = fy + lab[..., 1] / 500
    fz = fy - lab[..., 2] / 200
    f = np.stack([fx, fy, fz], axis=-1)
    xyz = np.where(f > 6 / 29, f**3, _LAB_KAPPA * (f - 4 / 29)) * D65_WHITE
    return linear_to_srgb(xyz @ XYZ_TO_SRGB.T) * 255.0


def ciede2000(lab1, lab2) -> np.ndarray | float:
    """CIEDE2000 colour difference with kL = kC = kH = 1.

    Accepts single Lab triples or arrays of shape (..., 3).
    """
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = np.moveaxis(lab1, -1, 0)
    L2, a2, b2 = np.moveaxis(lab2, -1, 0)

    c_bar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2
    c7 = c_bar**7
    g = 0.5 * (1 - np.sqrt(c7 / (c7 + 25.0**7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, np.degrees(np.arctan2(b1, a1p)) % 360)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, np.degrees(np.arctan2(b2, a2p)) % 360)

    dL = L2 - L1
    dC = c2p - c1p
    chroma_prod = c1p * c2p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(chroma_prod == 0, 0.0, dh)
    dH = 2 * np.sqrt(chroma_prod) * np.sin(np.radians(dh) / 2)

    L_bar = (L1 + L2) / 2
    cp_bar = (c1p + c2p) / 2
    h_sum = h1p + h2p
    h_bar = np.where(
        np.abs(h1p - h2p) <= 180,
        h_sum / 2,
        np.where(h_sum < 360, (h_sum + 360) / 2, (h_sum - 360) / 2),
    )
    h_bar = np.where(chroma_prod == 0, h_sum, h_bar)

    t = (
        1
        - 0.17 * np.cos(np.radians(h_bar - 30))
        + 0.24 * np.cos(np.radians(2 * h_bar))
        + 0.32 * np.cos(np.radians(3 * h_bar + 6))
        - 0.20 * np.cos(np.radians(4 * h_bar - 63))
    )
    d_theta = 30 * np.exp(-(((h_bar - 275) / 25) ** 2))
    cp7 = cp_bar**7
    r_c = 2 * np.sqrt(cp7 / (cp7 + 25.0**7))
    s_l = 1 + 0.015 * (L_bar - 50) ** 2 / np.sqrt(20 + (L_bar - 50) ** 2)
    s_c = 1 + 0.045 * cp_bar
    s_h = 1 + 0.015 * cp_bar * t
    r_t = -np.sin(np.radians(2 * d_theta)) * r_c

    tl, tc, th = dL / s_l, dC / s_c, dH / s_h
    de = np.sqrt(tl**2 + tc**2 + th**2 + r_t * tc * th)
    return float(de) if de.ndim == 0 else de


def ciede2000_image(a, b) -> float:
    """Mean per-pixel CIEDE2000 between two 8-bit sRGB rasters."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_same_shape(a, b)
    return float(np.mean(ciede2000(rgb_to_lab(a), rgb_to_lab(b))))


# ---------------------------------------------------------------------------
# folder evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    records: list[dict] = field(default_factory=list)
    unmatched: list[str] = field(default_factory=list)

    @property
    def psnr(self) -> float:
        values = [r["psnr"] for r in self.records]
        finite = [v for v in values if math.isfinite(v)]
        if len(finite) < len(values):
            log.info("%d identical image(s) have infinite PSNR; excluded from the mean", len(values) - len(finite))
        if not finite:
            return math.inf if values else math.nan
        return float(np.mean(finite))

    @property
    def ssim(self) -> float:
        return float(np.mean([r["ssim"] for r in self.records])) if self.records else math.nan

    @property
    def ciede2000(self) -> float:
        return float(np.mean([r["ciede2000"] for r in self.records])) if self.records else math.nan

    def summary(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "ciede2000": self.ciede2000, "n": len(self.records)}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"image": r["image"], "psnr": r["psnr"], "ssim": r["ssim"], "ciede2000": r["ciede2000"]}) for r in self.records]
        lines.append(json.dumps({"aggregate": self.summary(), "unmatched": self.unmatched}))
        return "\n".join(lines) + "\n"


def score_pair(pred, gt, ssim_mode: str = "luma") -> dict:
    return {
        "psnr": psnr(pred, gt),
        "ssim": ssim(pred, gt, mode=ssim_mode),
        "ciede2000": ciede2000_image(pred, gt),
    }


def evaluate_folder(pred_dir, gt_dir, ssim_mode: str = "luma") -> MetricReport:
    """Score every prediction against the ground truth with the same file stem."""
    pred = {p.stem: p for p in list_images(pred_dir)}
    gt = {p.stem: p for p in list_images(gt_dir)}
    common = sorted(pred.keys() & gt.keys())
    if not common:
        raise ValueError(f"no matching filenames between {pred_dir} and {gt_dir}")
    report = MetricReport(unmatched=sorted(pred.keys() ^ gt.keys()))
    for stem in common:
        scores = score_pair(read_rgb(pred[stem]), read_rgb(gt[stem]), ssim_mode)
        report.records.append({"image": stem, **scores})
    return report


TABLE_COLUMNS = ("PSNR↑", "SSIM↑", "CIEDE2000↓")


def format_table(rows: list[tuple[str, dict | None]]) -> str:
    """Render (setting, summary) rows; a None summary marks a failed row."""
    width = max([len("Setting")] + [len(name) for name, _ in rows])
    out = [f"{'Setting':<{width}}  " + "  ".join(f"{c:>11}" for c in TABLE_COLUMNS)]
    for name, s in rows:
        if s is None:
            out.append(f"{name:<{width}}  " + "  ".join(f"{'FAILED':>11}" for _ in TABLE_COLUMNS))
        else:
            out.append(f"{name:<{width}}  {s['psnr']:>11.4f}  {s['ssim']:>11.4f}  {s['ciede2000']:>11.4f}")
    return "\n".join(out)
