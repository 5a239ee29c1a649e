"""Reconstruction-quality metrics and held-out evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyMask, InvalidRange
from .losses import ssim as ssim_loss

PSNR_CAP = 99.0


def psnr(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) over unmasked pixels; identical images report the cap."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise DimensionMismatch("psnr inputs must have the same shape")
    err = (rendered - target) ** 2
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != rendered.shape[:2]:
            raise DimensionMismatch("psnr mask must be HxW")
        if not keep.any():
            raise EmptyMask("psnr mask excluded every pixel")
        err = err[keep]
    mse = float(err.mean())
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(1.0 / mse), cap)


def avge(ssim_value: float, psnr_db: float, perceptual: float | None = None) -> float:
    """Geometric-mean aggregate of sqrt(1-SSIM), MSE, and optionally a perceptual score.

    Without the perceptual score this is the two-term variant (reported as
    `avge2`), which is not comparable to three-term numbers.
    """
    if ssim_value >= 1.0:
        raise InvalidRange("avge needs ssim < 1")
    if not np.isfinite(psnr_db):
        raise InvalidRange("avge needs finite psnr")
    terms = [np.sqrt(1.0 - ssim_value), 10.0 ** (-psnr_db / 10.0)]
    if perceptual is not None:
        if perceptual < 0:
            raise InvalidRange("perceptual score must be >= 0")
        terms.append(perceptual)
    prod = float(np.prod(terms))
    return prod ** (1.0 / len(terms))


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, view: str, psnr_db: float, ssim_value: float, perceptual: float | None = None) -> None:
        row = {
            "view": view,
            "psnr": psnr_db,
            "ssim": ssim_value,
            "avge2": avge(ssim_value, psnr_db),
        }
        if perceptual is not None:
            row["avge3"] = avge(ssim_value, psnr_db, perceptual)
        self.rows.append(row)

    def mean(self, key: str) -> float:
        vals = [r[key] for r in self.rows if key in r]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        out = {k: self.mean(k) for k in ("psnr", "ssim", "avge2")}
        if any("avge3" in r for r in self.rows):
            out["avge3"] = self.mean("avge3")
        return out


def evaluate(cloud, views, background, perceptual_scores: dict[str, float] | None = None) -> MetricReport:
    """Render each held-out view and aggregate metrics.

    `views` is a sequence of (name, camera, pose, target_image).
    """
    from .rasterizer import render

    if not views:
        raise ValueError("evaluate needs at least one view")
    report = MetricReport()
    for name, cam, pose, target in views:
        out = render(cloud, cam, pose, background)
        s, _, _ = ssim_loss(out.color, target)
        p = psnr(out.color, target)
        perc = perceptual_scores.get(name) if perceptual_scores else None
        report.add(name, p, s, perc)
    return report
