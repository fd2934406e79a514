"""Saliency scores (MAE, max F-measure, S-measure) and image quality (SSIM, PSNR, L2).

Maps are accepted as ``(H, W)`` or any shape that squeezes to it; images as
``(C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BETA2 = 0.3
THRESHOLDS = np.arange(1, 256) / 255.0
S_ALPHA = 0.5
EPS = np.finfo(np.float64).eps
PSNR_CAP = 99.0


@dataclass
class SodScores:
    mae: float
    f_beta: float
    s_measure: float


@dataclass
class QualityScores:
    ssim: float
    psnr: float
    l2: float


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def _binary_gt(gt):
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary")
    return gt.astype(bool)


def mae(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def f_measure(pred, gt, beta2: float = BETA2) -> float:
    """Max over 255 thresholds ``k/255`` (k=1..255) of the F-score of ``pred >= t``."""
    pred, gt = _pair(pred, gt)
    fg = _binary_gt(gt)
    n_pos = fg.sum()
    if n_pos == 0:
        return 1.0 if not np.any(pred) else 0.0
    # number of thresholds each pixel passes
    level = np.searchsorted(THRESHOLDS, pred.ravel(), side="right")
    hist_all = np.bincount(level, minlength=256)
    hist_fg = np.bincount(level[fg.ravel()], minlength=256)
    # predicted positives at threshold k: pixels with level >= k
    pp = np.cumsum(hist_all[::-1])[::-1][1:]
    tp = np.cumsum(hist_fg[::-1])[::-1][1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pp > 0, tp / np.maximum(pp, 1), 0.0)
        recall = tp / n_pos
        denom = beta2 * precision + recall
        f = np.where(denom > 0, (1 + beta2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return float(f.max())


# --- S-measure ---------------------------------------------------------------

def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _s_object(pred, fg) -> float:
    u = fg.mean()
    o_fg = _object_score(pred[fg])
    o_bg = _object_score(1.0 - pred[~fg])
    return u * o_fg + (1 - u) * o_bg


def _region_ssim(pred, gt) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    if n > 1:
        sx = ((pred - x) ** 2).sum() / (n - 1)
        sy = ((gt - y) ** 2).sum() / (n - 1)
        sxy = ((pred - x) * (gt - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / (b + EPS)
    return 1.0 if b == 0 else 0.0


def _centroid(fg) -> tuple[int, int]:
    h, w = fg.shape
    if not fg.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(fg)
    return int(round(xs.mean())) + 1, int(round(ys.mean())) + 1


def _s_region(pred, gt, fg) -> float:
    h, w = gt.shape
    x, y = _centroid(fg)
    area = h * w
    total = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        p, g = pred[rs, cs], gt[rs, cs]
        total += p.size / area * _region_ssim(p, g)
    return total


def s_measure(pred, gt, alpha: float = S_ALPHA) -> float:
    """Structure measure ``alpha*S_object + (1-alpha)*S_region``, floored at 0."""
    pred, gt = _pair(pred, gt)
    pred, gt = np.squeeze(pred), np.squeeze(gt)
    fg = _binary_gt(gt)
    u = fg.mean()
    if u == 0:
        q = 1.0 - pred.mean()
    elif u == 1:
        q = pred.mean()
    else:
        q = alpha * _s_object(pred, fg) + (1 - alpha) * _s_region(pred, gt, fg)
    return float(max(q, 0.0))


def sod_scores(pred, gt) -> SodScores:
    return SodScores(mae(pred, gt), f_measure(pred, gt), s_measure(pred, gt))


# --- image quality -----------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    tmp = sliding_window_view(img, k, axis=-1) @ g
    return sliding_window_view(tmp, k, axis=-2) @ g


def _as_chw(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def ssim(x, y, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Gaussian-window (11x11, sigma 1.5) SSIM over the valid region, averaged over channels."""
    x, y = _pair(_as_chw(x), _as_chw(y))
    if min(x.shape[-2:]) < 11:
        raise ValueError(f"ssim needs images of at least 11x11, got {x.shape}")
    g = gaussian_window()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean(axis=(-2, -1)).mean())


def psnr(x, y) -> float:
    x, y = _pair(x, y)
    mse = float(((x - y) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def l2(x, y) -> float:
    """Mean squared difference on the 0-255 scale."""
    x, y = _pair(x, y)
    return float((((x - y) * 255.0) ** 2).mean())


def quality_scores(x, y) -> QualityScores:
    return QualityScores(ssim(x, y), psnr(x, y), l2(x, y))
