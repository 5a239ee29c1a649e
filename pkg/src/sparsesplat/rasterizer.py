"""Differentiable forward rendering of color and depth with an analytic backward pass.

Forward model per pixel (front-to-back alpha compositing):
    color = sum_n c_n * a_n * T_n + background * T_end
    depth = sum_n z_n * a_n * T_n                       (no background term)
with T_n the transmittance before fragment n, a_n = opacity * exp(-0.5 d^T conic d)
clamped to [0, 0.99], fragments below 1/255 skipped.

2D footprints come from the EWA affine approximation
    cov2d = J W Sigma W^T J^T + 0.3 I
and every fragment quantity is cached in a workspace so the backward pass can
chain pixel gradients to all Gaussian parameters without re-rendering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StaleWorkspace
from .geometry import CameraIntrinsics, Pose
from .scene import GaussianCloud, sh_basis, sh_basis_grad, sh_band_count

ALPHA_SKIP = 1.0 / 255.0
ALPHA_CLAMP = 0.99
COV2D_DILATION = 0.3
DEPTH_VALID_MIN_ALPHA = 1e-3


@dataclass(frozen=True)
class Projected2DGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    base_opacity: float


@dataclass
class _Fragments:
    """Per-gaussian fragment record kept for the backward pass."""

    pix: np.ndarray          # flat pixel indices
    alpha: np.ndarray        # clamped alpha
    t_before: np.ndarray     # transmittance before this fragment
    gval: np.ndarray         # raw exp(-0.5 d^T conic d)
    clamped: np.ndarray      # alpha hit the 0.99 clamp
    dx: np.ndarray
    dy: np.ndarray


@dataclass
class RenderWorkspace:
    cloud_id: int
    cloud_version: int
    width: int
    height: int
    background: np.ndarray
    normalize_depth_by_alpha: bool
    order: np.ndarray                    # visible gaussian indices in composite order
    frags: list[_Fragments]
    t_cam: np.ndarray                    # (V, 3) camera-frame centers, composite order
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    colors: np.ndarray
    color_preclamp: np.ndarray
    view_dirs: np.ndarray
    view_dist: np.ndarray
    alphas: np.ndarray
    t_final: np.ndarray                  # (H*W,) remaining transmittance
    raw_depth: np.ndarray                # (H*W,) composited depth before masking
    accum: np.ndarray                    # (H*W,)
    radii: np.ndarray                    # (N,) 3-sigma screen radius, 0 when culled


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    accum_alpha: np.ndarray
    workspace: RenderWorkspace


@dataclass
class RenderGrads:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    mean2d_norms: np.ndarray             # (N,) screen-space positional gradient norms


def _batch_quat_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def _rot_grad_wrt_quat(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """Chain dL/dR into dL/dq for a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    dw = np.array([[0, -2 * z, 2 * y], [2 * z, 0, -2 * x], [-2 * y, 2 * x, 0]])
    dx = np.array([[0, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dy = np.array([[-4 * y, 2 * x, 2 * w], [2 * x, 0, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dz = np.array([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, 0]])
    return np.array([np.sum(d_rot * g) for g in (dw, dx, dy, dz)])


def _project_batch(cloud: GaussianCloud, cam: CameraIntrinsics, pose: Pose, near: float):
    """Camera-frame centers, screen means, EWA covariances and colors for all gaussians."""
    n = cloud.n
    w_rot = pose.rotation
    t_cam = cloud.positions @ w_rot.T + pose.translation
    in_front = t_cam[:, 2] > near

    qn = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    rot = _batch_quat_to_rot(qn)
    s2 = np.exp(2.0 * cloud.log_scales)
    sigma = np.einsum("nij,nj,nkj->nik", rot, s2, rot)

    tz = np.where(in_front, t_cam[:, 2], 1.0)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * t_cam[:, 0] / tz**2
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * t_cam[:, 1] / tz**2
    m = jac @ w_rot[None, :, :]
    cov2d = np.einsum("nij,njk,nlk->nil", m, sigma, m)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    mean2d = np.stack(
        [cam.fx * t_cam[:, 0] / tz + cam.cx, cam.fy * t_cam[:, 1] / tz + cam.cy], axis=1
    )

    cam_center = pose.camera_center
    delta = cloud.positions - cam_center
    dist = np.linalg.norm(delta, axis=1)
    dirs = delta / np.maximum(dist, 1e-12)[:, None]
    basis = sh_basis(dirs, cloud.active_sh_degree)
    bands = basis.shape[1]
    preclamp = np.einsum("nb,nbc->nc", basis, cloud.sh_coeffs[:, :bands, :]) + 0.5
    colors = np.maximum(preclamp, 0.0)

    return t_cam, in_front, sigma, rot, qn, jac, m, cov2d, mean2d, dirs, dist, preclamp, colors


def project_gaussian(
    cloud: GaussianCloud, index: int, cam: CameraIntrinsics, pose: Pose, near: float = 1e-4
) -> Projected2DGaussian | None:
    """Project one gaussian; None means culled (behind near plane or 3-sigma off image)."""
    sub = GaussianCloud(
        cloud.positions[index : index + 1],
        cloud.rotations[index : index + 1],
        cloud.log_scales[index : index + 1],
        cloud.opacity_logits[index : index + 1],
        cloud.sh_coeffs[index : index + 1],
        cloud.active_sh_degree,
    )
    t_cam, in_front, _, _, _, _, _, cov2d, mean2d, _, _, _, colors = _project_batch(sub, cam, pose, near)
    if not in_front[0]:
        return None
    r3 = 3.0 * np.sqrt(_max_eig2x2(cov2d[0]))
    mx, my = mean2d[0]
    if mx + r3 < 0 or mx - r3 > cam.width - 1 or my + r3 < 0 or my - r3 > cam.height - 1:
        return None
    return Projected2DGaussian(
        mean2d=mean2d[0],
        cov2d=cov2d[0],
        depth=float(t_cam[0, 2]),
        color=colors[0],
        base_opacity=float(sub.opacities[0]),
    )


def _max_eig2x2(c: np.ndarray) -> float:
    mid = 0.5 * (c[0, 0] + c[1, 1])
    disc = np.sqrt(max(0.25 * (c[0, 0] - c[1, 1]) ** 2 + c[0, 1] ** 2, 0.0))
    return float(mid + disc)


def render(
    cloud: GaussianCloud,
    cam: CameraIntrinsics,
    pose: Pose,
    background: np.ndarray,
    near: float = 1e-4,
    normalize_depth_by_alpha: bool = False,
) -> RenderOutput:
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    color = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    accum = np.zeros(h * w)
    trans = np.ones(h * w)
    radii = np.zeros(cloud.n)

    if cloud.n == 0:
        ws = RenderWorkspace(
            id(cloud), cloud.version, w, h, bg, normalize_depth_by_alpha,
            np.zeros(0, dtype=np.int64), [], np.zeros((0, 3)), np.zeros((0, 2)),
            np.zeros((0, 2, 2)), np.zeros((0, 2, 2)), np.zeros((0, 3)), np.zeros((0, 3)),
            np.zeros((0, 3)), np.zeros(0), np.zeros(0), trans, depth.copy(), accum, radii,
        )
        out_color = np.tile(bg, (h * w, 1)).reshape(h, w, 3)
        return RenderOutput(out_color, np.zeros((h, w)), np.zeros((h, w)), ws)

    t_cam, in_front, _, _, _, _, _, cov2d, mean2d, dirs, dist, preclamp, colors = _project_batch(
        cloud, cam, pose, near
    )
    alphas = cloud.opacities

    visible = []
    for i in np.flatnonzero(in_front):
        r3 = 3.0 * np.sqrt(_max_eig2x2(cov2d[i]))
        mx, my = mean2d[i]
        if mx + r3 < 0 or mx - r3 > w - 1 or my + r3 < 0 or my - r3 > h - 1:
            continue
        radii[i] = r3
        visible.append(i)
    visible = np.asarray(visible, dtype=np.int64)

    order = visible[np.argsort(t_cam[visible, 2], kind="stable")]
    frags: list[_Fragments] = []
    empty = np.zeros(0)
    for i in order:
        a_base = alphas[i]
        if 255.0 * a_base <= 1.0:
            frags.append(_Fragments(np.zeros(0, np.int64), empty, empty, empty, np.zeros(0, bool), empty, empty))
            continue
        k = np.sqrt(2.0 * np.log(255.0 * a_base))
        c = cov2d[i]
        det = c[0, 0] * c[1, 1] - c[0, 1] ** 2
        conic = np.array([[c[1, 1], -c[0, 1]], [-c[0, 1], c[0, 0]]]) / det
        mx, my = mean2d[i]
        rx, ry = k * np.sqrt(c[0, 0]), k * np.sqrt(c[1, 1])
        xlo, xhi = max(int(np.ceil(mx - rx)), 0), min(int(np.floor(mx + rx)), w - 1)
        ylo, yhi = max(int(np.ceil(my - ry)), 0), min(int(np.floor(my + ry)), h - 1)
        if xlo > xhi or ylo > yhi:
            frags.append(_Fragments(np.zeros(0, np.int64), empty, empty, empty, np.zeros(0, bool), empty, empty))
            continue
        xs = np.arange(xlo, xhi + 1, dtype=np.float64)
        ys = np.arange(ylo, yhi + 1, dtype=np.float64)
        dx = (xs - mx)[None, :]
        dy = (ys - my)[:, None]
        expo = -0.5 * (conic[0, 0] * dx * dx + 2.0 * conic[0, 1] * dx * dy + conic[1, 1] * dy * dy)
        gval = np.exp(expo)
        araw = a_base * gval
        keep = araw >= ALPHA_SKIP
        if not keep.any():
            frags.append(_Fragments(np.zeros(0, np.int64), empty, empty, empty, np.zeros(0, bool), empty, empty))
            continue
        iy, ix = np.nonzero(keep)
        pix = (iy + ylo) * w + (ix + xlo)
        araw_k = araw[keep]
        clamped = araw_k > ALPHA_CLAMP
        a = np.minimum(araw_k, ALPHA_CLAMP)
        tb = trans[pix]
        wgt = a * tb
        color[pix] += wgt[:, None] * colors[i]
        depth[pix] += wgt * t_cam[i, 2]
        accum[pix] += wgt
        trans[pix] = tb * (1.0 - a)
        frags.append(
            _Fragments(pix, a, tb, gval[keep], clamped, (dx + np.zeros_like(dy))[keep], (dy + np.zeros_like(dx))[keep])
        )

    raw_depth = depth.copy()
    out_depth = raw_depth.copy()
    if normalize_depth_by_alpha:
        valid = accum >= DEPTH_VALID_MIN_ALPHA
        out_depth = np.where(valid, raw_depth / np.maximum(accum, 1e-12), 0.0)
    else:
        out_depth[accum < DEPTH_VALID_MIN_ALPHA] = 0.0
    color += trans[:, None] * bg[None, :]

    ws = RenderWorkspace(
        id(cloud), cloud.version, w, h, bg, normalize_depth_by_alpha,
        order, frags, t_cam[order], mean2d[order], cov2d[order],
        np.stack([np.linalg.inv(cov2d[i]) for i in order]) if len(order) else np.zeros((0, 2, 2)),
        colors[order], preclamp[order], dirs[order], dist[order], alphas[order],
        trans, raw_depth, accum, radii,
    )
    return RenderOutput(color.reshape(h, w, 3), out_depth.reshape(h, w), accum.reshape(h, w), ws)


def render_backward(
    cloud: GaussianCloud,
    cam: CameraIntrinsics,
    pose: Pose,
    workspace: RenderWorkspace,
    d_color: np.ndarray,
    d_depth: np.ndarray,
) -> RenderGrads:
    """Chain per-pixel color/depth gradients to all cloud parameters.

    Gradients are exactly zero for culled gaussians. Depth gradients at pixels
    reported invalid (accum < 1e-3) are ignored, matching the forward masking.
    """
    if workspace.cloud_id != id(cloud) or workspace.cloud_version != cloud.version:
        raise StaleWorkspace("cloud mutated since the forward pass")
    h, w = workspace.height, workspace.width
    n = cloud.n
    bands_total = cloud.sh_coeffs.shape[1]
    grads = RenderGrads(
        np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
        np.zeros(n), np.zeros((n, bands_total, 3)), np.zeros(n),
    )
    if len(workspace.order) == 0:
        return grads

    d_color_flat = np.asarray(d_color, dtype=np.float64).reshape(h * w, 3)
    d_depth_in = np.asarray(d_depth, dtype=np.float64).reshape(h * w).copy()
    valid = workspace.accum >= DEPTH_VALID_MIN_ALPHA
    d_depth_in[~valid] = 0.0
    d_accum = np.zeros(h * w)
    if workspace.normalize_depth_by_alpha:
        acc = np.maximum(workspace.accum, 1e-12)
        d_accum = np.where(valid, -d_depth_in * workspace.raw_depth / acc**2, 0.0)
        d_depth_flat = np.where(valid, d_depth_in / acc, 0.0)
    else:
        d_depth_flat = d_depth_in

    suffix_c = workspace.t_final[:, None] * workspace.background[None, :]
    suffix_d = np.zeros(h * w)
    suffix_a = np.zeros(h * w)
    use_accum = bool(np.any(d_accum))

    w_rot = pose.rotation
    cam_center = pose.camera_center
    active_bands = sh_band_count(cloud.active_sh_degree)
    basis_all = sh_basis(workspace.view_dirs, cloud.active_sh_degree)
    basis_grad_all = sh_basis_grad(workspace.view_dirs, cloud.active_sh_degree)
    qn_all = cloud.rotations[workspace.order]
    qn_all = qn_all / np.linalg.norm(qn_all, axis=1, keepdims=True)
    rot_all = _batch_quat_to_rot(qn_all)

    for v in range(len(workspace.order) - 1, -1, -1):
        gi = int(workspace.order[v])
        fr = workspace.frags[v]
        col = workspace.colors[v]
        z = workspace.t_cam[v, 2]
        a_base = workspace.alphas[v]
        d_mean2d = np.zeros(2)
        d_cov2d = np.zeros((2, 2))
        d_col = np.zeros(3)
        d_z = 0.0
        d_alpha_base = 0.0
        if fr.pix.size:
            dc = d_color_flat[fr.pix]
            dd = d_depth_flat[fr.pix]
            one_minus = 1.0 - fr.alpha
            wgt = fr.alpha * fr.t_before
            d_a = (dc @ col + dd * z) * fr.t_before
            d_a -= (np.einsum("fc,fc->f", dc, suffix_c[fr.pix]) + dd * suffix_d[fr.pix]) / one_minus
            if use_accum:
                da_pix = d_accum[fr.pix]
                d_a += da_pix * fr.t_before - da_pix * suffix_a[fr.pix] / one_minus
                suffix_a[fr.pix] += wgt
            d_col = dc.T @ wgt
            d_z = float(dd @ wgt)
            live = ~fr.clamped
            d_alpha_base = float(np.sum(d_a[live] * fr.gval[live]))
            d_g = np.where(live, d_a * a_base, 0.0)
            d_e = d_g * fr.gval
            conic = workspace.conic[v]
            lx = conic[0, 0] * fr.dx + conic[0, 1] * fr.dy
            ly = conic[0, 1] * fr.dx + conic[1, 1] * fr.dy
            d_mean2d = np.array([np.sum(d_e * lx), np.sum(d_e * ly)])
            d_cov2d = 0.5 * np.array(
                [
                    [np.sum(d_e * lx * lx), np.sum(d_e * lx * ly)],
                    [np.sum(d_e * lx * ly), np.sum(d_e * ly * ly)],
                ]
            )
            suffix_c[fr.pix] += wgt[:, None] * col
            suffix_d[fr.pix] += wgt * z

        grads.mean2d_norms[gi] = float(np.linalg.norm(d_mean2d))

        # chain into camera-frame center t
        t = workspace.t_cam[v]
        tz = t[2]
        jac = np.array(
            [
                [cam.fx / tz, 0.0, -cam.fx * t[0] / tz**2],
                [0.0, cam.fy / tz, -cam.fy * t[1] / tz**2],
            ]
        )
        d_t = jac.T @ d_mean2d
        d_t[2] += d_z

        # cov2d = M Sigma M^T with M = J W
        qn = qn_all[v]
        rot = rot_all[v]
        s2 = np.exp(2.0 * cloud.log_scales[gi])
        sigma = (rot * s2[None, :]) @ rot.T
        m = jac @ w_rot
        d_sigma = m.T @ d_cov2d @ m
        d_m = 2.0 * d_cov2d @ m @ sigma
        d_jac = d_m @ w_rot.T
        d_t[0] += d_jac[0, 2] * (-cam.fx / tz**2)
        d_t[1] += d_jac[1, 2] * (-cam.fy / tz**2)
        d_t[2] += (
            d_jac[0, 0] * (-cam.fx / tz**2)
            + d_jac[1, 1] * (-cam.fy / tz**2)
            + d_jac[0, 2] * (2.0 * cam.fx * t[0] / tz**3)
            + d_jac[1, 2] * (2.0 * cam.fy * t[1] / tz**3)
        )
        d_pos = w_rot.T @ d_t

        # sigma = R diag(s^2) R^T
        d_rot_mat = 2.0 * d_sigma @ rot * s2[None, :]
        d_log_scale = 2.0 * s2 * np.diag(rot.T @ d_sigma @ rot)
        d_q_unit = _rot_grad_wrt_quat(qn, d_rot_mat)
        q_raw = cloud.rotations[gi]
        q_norm = np.linalg.norm(q_raw)
        d_q = (d_q_unit - qn * float(qn @ d_q_unit)) / q_norm

        # color = clamp(basis @ sh + 0.5)
        live_ch = workspace.color_preclamp[v] > 0.0
        d_pre = np.where(live_ch, d_col, 0.0)
        grads.sh_coeffs[gi, :active_bands, :] += np.outer(basis_all[v], d_pre)
        d_dir = np.einsum("bk,bc,c->k", basis_grad_all[v], cloud.sh_coeffs[gi, :active_bands, :], d_pre)
        dirv = workspace.view_dirs[v]
        d_pos += (d_dir - dirv * float(dirv @ d_dir)) / workspace.view_dist[v]

        grads.positions[gi] = d_pos
        grads.rotations[gi] = d_q
        grads.log_scales[gi] = d_log_scale
        grads.opacity_logits[gi] = d_alpha_base * a_base * (1.0 - a_base)

    return grads


@dataclass
class DensifyStats:
    """Accumulated screen-space gradient norms and radii feeding densification."""

    grad_accum: np.ndarray
    count: np.ndarray
    max_radius: np.ndarray

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(np.zeros(n), np.zeros(n), np.zeros(n))

    def update(self, grads: RenderGrads, workspace: RenderWorkspace) -> None:
        seen = workspace.radii > 0
        self.grad_accum[seen] += grads.mean2d_norms[seen]
        self.count[seen] += 1
        self.max_radius = np.maximum(self.max_radius, workspace.radii)

    def mean_grad(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.count, 1.0)

    def reset(self) -> None:
        self.grad_accum[:] = 0.0
        self.count[:] = 0.0
        self.max_radius[:] = 0.0
