"""Photometric, structural, depth-correlation, and warp-consistency losses.

Every loss returns (value, gradient) with the gradient taken w.r.t. the first
image argument, using mean-style normalization so weights are resolution
independent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyMask, ImageTooSmall, ZeroVariance

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    ssim: float
    depth: float
    geo: float
    score_guided: float
    total: float


def l1_loss(
    rendered: np.ndarray,
    target: np.ndarray,
    band_mask: tuple[float, float] | None = None,
) -> tuple[float, np.ndarray]:
    """Mean absolute error; an optional intensity band drops target values
    below/above the (low, high) thresholds from the mean."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionMismatch("l1 inputs must have the same shape")
    if band_mask is not None:
        low, high = band_mask
        keep = (target >= low) & (target <= high)
    else:
        keep = np.ones_like(target, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise EmptyMask("intensity band excluded every pixel")
    diff = rendered - target
    value = float(np.abs(diff[keep]).sum() / count)
    grad = np.where(keep, np.sign(diff), 0.0) / count
    return value, grad


def _gauss_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


_WINDOW = _gauss_window()


def _corr_valid(img: np.ndarray) -> np.ndarray:
    """2D correlation with the SSIM window, valid region only."""
    h, w = img.shape
    k = SSIM_WINDOW
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        for j in range(k):
            out += _WINDOW[i, j] * img[i : i + h - k + 1, j : j + w - k + 1]
    return out


def _corr_valid_adjoint(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _corr_valid: scatter per-patch gradients back to pixels."""
    h, w = shape
    k = SSIM_WINDOW
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[i : i + h - k + 1, j : j + w - k + 1] += _WINDOW[i, j] * grad
    return out


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Mean local SSIM over the valid (fully-windowed) region.

    Returns (ssim_value, loss = 1 - ssim, d(loss)/d(img_a)).
    """
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch("ssim inputs must have the same shape")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    h, w, ch = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ImageTooSmall(f"ssim needs at least {SSIM_WINDOW} px per side, got {h}x{w}")
    grad = np.zeros((h, w, ch))
    total = 0.0
    n_valid = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    for c in range(ch):
        ac, bc = a[:, :, c], b[:, :, c]
        mu_a = _corr_valid(ac)
        mu_b = _corr_valid(bc)
        e_a2 = _corr_valid(ac * ac)
        e_ab = _corr_valid(ac * bc)
        e_b2 = _corr_valid(bc * bc)
        var_a = e_a2 - mu_a**2
        var_b = e_b2 - mu_b**2
        cov = e_ab - mu_a * mu_b
        n1 = 2 * mu_a * mu_b + SSIM_C1
        n2 = 2 * cov + SSIM_C2
        d1 = mu_a**2 + mu_b**2 + SSIM_C1
        d2 = var_a + var_b + SSIM_C2
        smap = (n1 * n2) / (d1 * d2)
        total += float(smap.mean())
        # d(mean ssim)/d(stat maps), then adjoint back through the window
        dm = np.full_like(smap, 1.0 / (n_valid * ch))
        dmu_a = dm * (2 * mu_b * n2 / (d1 * d2) - smap * 2 * mu_a / d1)
        dvar_a = dm * (-smap / d2)
        dcov = dm * (2 * n1 / (d1 * d2))
        g_mu = dmu_a + dvar_a * (-2 * mu_a) + dcov * (-mu_b)
        g_ea2 = dvar_a
        g_eab = dcov
        grad[:, :, c] = (
            _corr_valid_adjoint(g_mu, (h, w))
            + 2 * ac * _corr_valid_adjoint(g_ea2, (h, w))
            + bc * _corr_valid_adjoint(g_eab, (h, w))
        )
    value = total / ch
    return value, 1.0 - value, -grad.reshape(img_a.shape) if np.asarray(img_a).ndim == 2 else -grad


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two flattened maps."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise DimensionMismatch("pearson inputs must have equal length")
    if a.size < 2:
        raise ValueError("pearson needs at least two samples")
    ac = a - a.mean()
    bc = b - b.mean()
    sa = np.sqrt(np.sum(ac * ac))
    sb = np.sqrt(np.sum(bc * bc))
    if sa == 0.0 or sb == 0.0:
        raise ZeroVariance("constant input to pearson")
    return float(np.clip(ac @ bc / (sa * sb), -1.0, 1.0))


def _pearson_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """(corr, d corr / d a) over flattened inputs."""
    af = np.asarray(a, dtype=np.float64).ravel()
    bf = np.asarray(b, dtype=np.float64).ravel()
    ac = af - af.mean()
    bc = bf - bf.mean()
    sa = np.sqrt(np.sum(ac * ac))
    sb = np.sqrt(np.sum(bc * bc))
    if sa == 0.0 or sb == 0.0:
        raise ZeroVariance("constant input to pearson")
    r = float(ac @ bc / (sa * sb))
    grad = bc / (sa * sb) - r * ac / (sa * sa)
    return r, grad


def depth_loss(
    rendered_seen: np.ndarray,
    oracle_seen: np.ndarray,
    rendered_pseudo: np.ndarray | None,
    oracle_pseudo: np.ndarray | None,
    eta_d: float,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Correlation-based depth alignment, eta_d-weighted on the seen pair.

    Implemented as (1 - corr) per pair so the loss rewards positive correlation;
    pixels with invalid rendered depth (reported as 0) are excluded. Constant
    pairs contribute zero and are logged.
    """

    def term(rendered, oracle):
        rendered = np.asarray(rendered, dtype=np.float64)
        oracle = np.asarray(oracle, dtype=np.float64)
        if rendered.shape != oracle.shape:
            raise DimensionMismatch("depth maps must share dimensions")
        valid = rendered > 0
        grad = np.zeros_like(rendered)
        if valid.sum() < 2:
            return 0.0, grad
        try:
            r, g = _pearson_with_grad(rendered[valid], oracle[valid])
        except ZeroVariance:
            log.info("constant depth pair; dropping its loss contribution")
            return 0.0, grad
        grad[valid] = -g
        return 1.0 - r, grad

    seen_val, seen_grad = term(rendered_seen, oracle_seen)
    if rendered_pseudo is None:
        return eta_d * seen_val, eta_d * seen_grad, None
    pseudo_val, pseudo_grad = term(rendered_pseudo, oracle_pseudo)
    return eta_d * seen_val + pseudo_val, eta_d * seen_grad, pseudo_grad


def geo_loss(rendered: np.ndarray, warped: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Masked L1 between the rendered pseudo image and the warped seen image,
    normalized by 3x the masked pixel count."""
    rendered = np.asarray(rendered, dtype=np.float64)
    warped = np.asarray(warped, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if rendered.shape != warped.shape or mask.shape != rendered.shape[:2]:
        raise DimensionMismatch("geo loss inputs must share dimensions")
    count = int(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(rendered)
    diff = (rendered - warped) * mask[:, :, None]
    value = float(np.abs(diff).sum() / (3 * count))
    grad = np.sign(diff) / (3 * count)
    return value, grad


def total_loss(
    l1: float,
    ssim_loss: float,
    depth: float,
    geo: float,
    score_guided: float,
    lambda_l1: float,
    lambda_ssim: float,
    lambda_depth: float,
    lambda_geo: float,
    lambda_guided: float,
) -> LossBreakdown:
    total = (
        lambda_l1 * l1
        + lambda_ssim * ssim_loss
        + lambda_depth * depth
        + lambda_geo * geo
        + lambda_guided * score_guided
    )
    return LossBreakdown(l1, ssim_loss, depth, geo, score_guided, total)
