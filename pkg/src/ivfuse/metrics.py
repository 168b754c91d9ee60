"""Fusion-quality metric battery on (infrared, visible, fused) triples.

All metrics run on the 8-bit-quantized luminance plane (0..255 scale):
entropy and mutual information use 256-bin histograms with base-2 logs,
spatial frequency and standard deviation use first differences and the
population std, the edge-preservation score uses the classic Sobel
strength/orientation sigmoids, and visual-information fidelity uses a
4-scale Gaussian-window ratio with noise variance 2, summed per source.
Degenerate (constant) inputs return 0 instead of NaN.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np
import torch
from scipy.signal import convolve2d

from . import losses
from .data import worker_count
from .errors import DimensionError, ValidationError

METRIC_COLUMNS = ("en", "sd", "sf", "mi", "scd", "vif", "qabf", "ssim")
METRIC_LABELS = ("EN", "SD", "SF", "MI", "SCD", "VIF", "Qabf", "SSIM")


@dataclass
class MetricReport:
    en: float
    sd: float
    sf: float
    mi: float
    scd: float
    vif: float
    qabf: float
    ssim: float

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


def _check_gray(img: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name}: expected a (H, W) grayscale array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name}: non-finite values")
    return arr


def _levels(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Quantize a [0, 1] image to float intensity levels 0..255."""
    return np.round(np.clip(_check_gray(img, name), 0.0, 1.0) * 255.0)


def entropy(img: np.ndarray) -> float:
    """Shannon entropy of the 256-bin intensity histogram, in bits."""
    levels = _levels(img).astype(np.int64).ravel()
    counts = np.bincount(levels, minlength=256)
    p = counts[counts > 0] / levels.size
    return float(-(p * np.log2(p)).sum())


def std_dev(img: np.ndarray) -> float:
    """Population standard deviation on the 0..255 scale."""
    return float(np.std(_levels(img)))


def spatial_frequency(img: np.ndarray) -> float:
    """sqrt(RF^2 + CF^2) with RMS horizontal/vertical first differences."""
    levels = _levels(img)
    rf_sq = np.mean((levels[:, 1:] - levels[:, :-1]) ** 2)
    cf_sq = np.mean((levels[1:, :] - levels[:-1, :]) ** 2)
    return float(math.sqrt(rf_sq + cf_sq))


def _mutual_information_pair(a: np.ndarray, b: np.ndarray) -> float:
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=256, range=[[0, 256], [0, 256]])
    p_xy = joint / joint.sum()
    p_x = p_xy.sum(axis=1, keepdims=True)
    p_y = p_xy.sum(axis=0, keepdims=True)
    mask = p_xy > 0
    return float((p_xy[mask] * np.log2(p_xy[mask] / (p_x @ p_y)[mask])).sum())


def mutual_information(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """MI(fused, ir) + MI(fused, vis) from 256-bin joint histograms, in bits."""
    f, a, b = _levels(fused, "fused"), _levels(ir, "ir"), _levels(vis, "vis")
    return _mutual_information_pair(f, a) + _mutual_information_pair(f, b)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    ac = a - a.mean()
    bc = b - b.mean()
    denom = math.sqrt(float((ac * ac).sum()) * float((bc * bc).sum()))
    if denom == 0.0:
        return 0.0
    return float((ac * bc).sum() / denom)


def scd(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Sum of correlations of differences: cc(F - B, A) + cc(F - A, B)."""
    f, a, b = _levels(fused, "fused"), _levels(ir, "ir"), _levels(vis, "vis")
    return _pearson(f - b, a) + _pearson(f - a, b)


def _gaussian_window(n: int) -> np.ndarray:
    sd = n / 5.0
    half = (n - 1) / 2.0
    y, x = np.ogrid[-half:half + 1, -half:half + 1]
    h = np.exp(-(x * x + y * y) / (2.0 * sd * sd))
    h[h < np.finfo(h.dtype).eps * h.max()] = 0
    return h / h.sum()


def _vif_pair(ref: np.ndarray, dist: np.ndarray) -> float:
    sigma_nsq = 2.0
    eps = 1e-10
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = _gaussian_window(n)
        if scale > 1:
            if min(ref.shape) < n:
                break
            ref = convolve2d(ref, win, mode="valid")[::2, ::2]
            dist = convolve2d(dist, win, mode="valid")[::2, ::2]
        if min(ref.shape) < n:
            break
        mu1 = convolve2d(ref, win, mode="valid")
        mu2 = convolve2d(dist, win, mode="valid")
        sigma1_sq = convolve2d(ref * ref, win, mode="valid") - mu1 * mu1
        sigma2_sq = convolve2d(dist * dist, win, mode="valid") - mu2 * mu2
        sigma12 = convolve2d(ref * dist, win, mode="valid") - mu1 * mu2
        sigma1_sq[sigma1_sq < 0] = 0
        sigma2_sq[sigma2_sq < 0] = 0

        g = sigma12 / (sigma1_sq + eps)
        sv_sq = sigma2_sq - g * sigma12
        g[sigma1_sq < eps] = 0
        sv_sq[sigma1_sq < eps] = sigma2_sq[sigma1_sq < eps]
        sigma1_sq[sigma1_sq < eps] = 0
        g[sigma2_sq < eps] = 0
        sv_sq[sigma2_sq < eps] = 0
        sv_sq[g < 0] = sigma2_sq[g < 0]
        g[g < 0] = 0
        sv_sq[sv_sq <= eps] = eps

        num += np.sum(np.log10(1 + g * g * sigma1_sq / (sv_sq + sigma_nsq)))
        den += np.sum(np.log10(1 + sigma1_sq / sigma_nsq))
    if den == 0.0:
        return 0.0
    return float(num / den)


def vif_fusion(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Per-source visual-information-fidelity ratios against the fused image, summed."""
    f, a, b = _levels(fused, "fused"), _levels(ir, "ir"), _levels(vis, "vis")
    return _vif_pair(a, f) + _vif_pair(b, f)


_QABF_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_QABF_SOBEL_Y = np.array([[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]])


def _edge_strength_orientation(img: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # symmetric boundary: a constant image has zero response everywhere
    sx = convolve2d(img, _QABF_SOBEL_X, mode="same", boundary="symm")
    sy = convolve2d(img, _QABF_SOBEL_Y, mode="same", boundary="symm")
    g = np.sqrt(sx * sx + sy * sy)
    alpha = np.full_like(img, math.pi / 2)
    nz = sx != 0
    alpha[nz] = np.arctan(sy[nz] / sx[nz])
    return g, alpha


def _edge_preservation(g_src, a_src, g_f, a_f) -> np.ndarray:
    gamma_g, kappa_g, sigma_g = 0.9994, -15.0, 0.5
    gamma_a, kappa_a, sigma_a = 0.9879, -22.0, 0.8
    g_max = np.maximum(g_src, g_f)
    ratio = np.zeros_like(g_src)
    nz = g_max > 0
    ratio[nz] = np.minimum(g_src, g_f)[nz] / g_max[nz]
    a_sim = 1.0 - np.abs(a_src - a_f) / (math.pi / 2)
    q_g = gamma_g / (1.0 + np.exp(kappa_g * (ratio - sigma_g)))
    q_a = gamma_a / (1.0 + np.exp(kappa_a * (a_sim - sigma_a)))
    return q_g * q_a


def qabf(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Edge strength/orientation preservation, weighted by source edge strength."""
    f, a, b = _levels(fused, "fused"), _levels(ir, "ir"), _levels(vis, "vis")
    g_a, alpha_a = _edge_strength_orientation(a)
    g_b, alpha_b = _edge_strength_orientation(b)
    g_f, alpha_f = _edge_strength_orientation(f)
    q_af = _edge_preservation(g_a, alpha_a, g_f, alpha_f)
    q_bf = _edge_preservation(g_b, alpha_b, g_f, alpha_f)
    denom = float(np.sum(g_a + g_b))
    if denom == 0.0:
        return 0.0
    return float(np.sum(q_af * g_a + q_bf * g_b) / denom)


def ssim_fusion(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> float:
    """Mean structural similarity of the fused image against each source."""
    def _t(img, name):
        return torch.from_numpy(_check_gray(img, name))[None, None]
    f = _t(fused, "fused")
    return float((losses.ssim_index(f, _t(ir, "ir"))
                  + losses.ssim_index(f, _t(vis, "vis"))) / 2)


def evaluate_triple(fused: np.ndarray, ir: np.ndarray, vis: np.ndarray) -> MetricReport:
    if np.asarray(fused).shape != np.asarray(ir).shape or np.asarray(fused).shape != np.asarray(vis).shape:
        raise DimensionError(
            f"triple shapes differ: fused {np.asarray(fused).shape}, "
            f"ir {np.asarray(ir).shape}, vis {np.asarray(vis).shape}"
        )
    return MetricReport(
        en=entropy(fused),
        sd=std_dev(fused),
        sf=spatial_frequency(fused),
        mi=mutual_information(fused, ir, vis),
        scd=scd(fused, ir, vis),
        vif=vif_fusion(fused, ir, vis),
        qabf=qabf(fused, ir, vis),
        ssim=ssim_fusion(fused, ir, vis),
    )


def evaluate_many(
    triples: Iterable[Tuple[str, np.ndarray, np.ndarray, np.ndarray]],
) -> Tuple[List[Tuple[str, MetricReport]], MetricReport]:
    """Per-image reports plus the dataset mean, merged in identifier order."""
    items = sorted(triples, key=lambda t: t[0])
    if not items:
        raise ValidationError("no triples to evaluate")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(lambda t: evaluate_triple(t[1], t[2], t[3]), items))
    rows = [(name, report) for (name, *_), report in zip(items, reports)]
    stacked = np.array([r.values() for r in reports])
    mean = MetricReport(*[float(v) for v in stacked.mean(axis=0)])
    return rows, mean


def write_metrics_csv(rows: Sequence[Tuple[str, MetricReport]], mean: MetricReport,
                      path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("filename",) + METRIC_COLUMNS)
        for name, report in rows:
            writer.writerow((name,) + tuple(f"{v:.6f}" for v in report.values()))
        writer.writerow(("mean",) + tuple(f"{v:.6f}" for v in mean.values()))


def format_metrics_table(rows: Sequence[Tuple[str, MetricReport]], mean: MetricReport) -> str:
    name_width = max(len("mean"), *(len(name) for name, _ in rows))
    header = " ".join(["image".ljust(name_width)] + [lbl.rjust(8) for lbl in METRIC_LABELS])
    lines = [header, "-" * len(header)]
    for name, report in rows:
        lines.append(" ".join([name.ljust(name_width)]
                              + [f"{v:8.4f}" for v in report.values()]))
    lines.append("-" * len(header))
    lines.append(" ".join(["mean".ljust(name_width)] + [f"{v:8.4f}" for v in mean.values()]))
    return "\n".join(lines)
