"""Inverse warping of seen-view images to pseudo views via rendered depth.

A pixel p in the target (pseudo) view with rendered depth D is lifted to 3D,
moved through the relative transform into the source (seen) camera, and
projected there; the source image and depth are then sampled with nearest
(round-half-up) lookup. The consistency mask keeps a pixel only when the
target depth and the sampled source depth agree within `tau`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DimensionMismatch, InvalidDepth
from .geometry import CameraIntrinsics, Pose


@dataclass(frozen=True)
class WarpResult:
    warped_image: np.ndarray
    warped_depth: np.ndarray
    mask: np.ndarray
    valid_fraction: float


def warp_pixel(
    pixel: np.ndarray, depth: float, rel: Pose, cam: CameraIntrinsics
) -> tuple[np.ndarray, float]:
    """Map one target-view pixel at a given depth into the source view.

    Returns the continuous source pixel and the source-camera depth of the
    transported point.
    """
    if depth <= 0:
        raise InvalidDepth(f"depth {depth} must be positive")
    px, py = float(pixel[0]), float(pixel[1])
    x = depth * (px - cam.cx) / cam.fx
    y = depth * (py - cam.cy) / cam.fy
    p_src = rel.rotation @ np.array([x, y, depth]) + rel.translation
    z = float(p_src[2])
    if z <= 0:
        raise BehindCamera(f"warped point behind source camera (z={z})")
    return np.array([cam.fx * p_src[0] / z + cam.cx, cam.fy * p_src[1] / z + cam.cy]), z


@dataclass(frozen=True)
class WarpFields:
    """Raw warp products before mask thresholding (shared by several taus)."""

    warped_image: np.ndarray
    warped_depth: np.ndarray
    depth_error: np.ndarray
    usable: np.ndarray       # in-bounds, both depths valid


def warp_fields(
    src_image: np.ndarray,
    src_depth: np.ndarray,
    target_depth: np.ndarray,
    rel: Pose,
    cam: CameraIntrinsics,
) -> WarpFields:
    src_image = np.asarray(src_image, dtype=np.float64)
    src_depth = np.asarray(src_depth, dtype=np.float64)
    target_depth = np.asarray(target_depth, dtype=np.float64)
    h, w = target_depth.shape
    if src_depth.shape != (h, w) or src_image.shape != (h, w, 3):
        raise DimensionMismatch("warp inputs must share the same image dimensions")

    ys, xs = np.mgrid[0:h, 0:w]
    d = target_depth
    has_depth = d > 0
    dsafe = np.where(has_depth, d, 1.0)

    x = dsafe * (xs - cam.cx) / cam.fx
    y = dsafe * (ys - cam.cy) / cam.fy
    r = rel.rotation
    px = r[0, 0] * x + r[0, 1] * y + r[0, 2] * dsafe + rel.translation[0]
    py = r[1, 0] * x + r[1, 1] * y + r[1, 2] * dsafe + rel.translation[1]
    pz = r[2, 0] * x + r[2, 1] * y + r[2, 2] * dsafe + rel.translation[2]
    in_front = pz > 0
    pz_safe = np.where(in_front, pz, 1.0)
    u = cam.fx * px / pz_safe + cam.cx
    v = cam.fy * py / pz_safe + cam.cy

    ui = np.floor(u + 0.5).astype(np.int64)
    vi = np.floor(v + 0.5).astype(np.int64)
    in_bounds = (ui >= 0) & (ui <= w - 1) & (vi >= 0) & (vi <= h - 1)
    usable = has_depth & in_front & in_bounds

    ui_safe = np.clip(ui, 0, w - 1)
    vi_safe = np.clip(vi, 0, h - 1)
    warped_image = np.where(usable[:, :, None], src_image[vi_safe, ui_safe], 0.0)
    sampled_depth = src_depth[vi_safe, ui_safe]
    usable = usable & (sampled_depth > 0)
    warped_depth = np.where(usable, sampled_depth, 0.0)
    warped_image = np.where(usable[:, :, None], warped_image, 0.0)
    depth_error = np.where(usable, np.abs(d - warped_depth), np.inf)
    return WarpFields(warped_image, warped_depth, depth_error, usable)


def mask_from_fields(fields: WarpFields, tau: float) -> np.ndarray:
    return (fields.depth_error < tau) & fields.usable


def inverse_warp(
    src_image: np.ndarray,
    src_depth: np.ndarray,
    target_depth: np.ndarray,
    rel: Pose,
    cam: CameraIntrinsics,
    tau: float,
) -> WarpResult:
    """Warp a seen-view image/depth to the target view and build the consistency mask."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    fields = warp_fields(src_image, src_depth, target_depth, rel, cam)
    mask = mask_from_fields(fields, tau)
    return WarpResult(
        warped_image=fields.warped_image,
        warped_depth=fields.warped_depth,
        mask=mask,
        valid_fraction=float(mask.mean()) if mask.size else 0.0,
    )
