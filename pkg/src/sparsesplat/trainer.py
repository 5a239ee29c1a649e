"""Optimization loop: adaptive steps, densification, pruning, and loss orchestration.

Iteration schedule anchors (prior window, warm-up, densify/prune cadence, SH
level-up, opacity resets) are stored as fractions of the total iteration count
so shorter desk-scale runs keep the reference profile's relative timing
(10K total / prior [2K, 9.5K] / warm-up 500 / densify 100 / prune 500 / SH 500).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergedLoss
from .geometry import CameraIntrinsics, Pose, PseudoViewSampler, pose_distance, relative_pose
from .losses import depth_loss, geo_loss, l1_loss, ssim, total_loss
from .rasterizer import DensifyStats, RenderGrads, render, render_backward
from .scene import GaussianCloud, SceneBounds
from .score import DenoiserOracle, NoiseSchedule, guided_score_grad, make_schedule
from .warp import WarpResult, mask_from_fields, warp_fields

log = logging.getLogger(__name__)

PARAM_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class TrainConfig:
    total_iters: int = 2000
    seed: int = 0
    # schedule anchors, fractions of total_iters; non-positive intervals disable the op
    prior_start_frac: float = 0.2
    prior_end_frac: float = 0.95
    warmup_frac: float = 0.05
    densify_start_frac: float = 0.05
    densify_end_frac: float = 0.95
    densify_interval_frac: float = 0.01
    prune_interval_frac: float = 0.05
    sh_interval_frac: float = 0.05
    opacity_reset_fracs: tuple = (0.2,)
    # loss weights
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_depth: float = 0.5
    lambda_geo: float = 2.0
    lambda_guided: float = 2.0
    eta_r: float = 0.1
    eta_d: float = 0.1
    seen_depth_weight_after_prior: float = 0.001
    tau_guided: float = 0.3
    tau_geo: float = 0.1
    guidance: float = 7.5
    literal_split_weighting: bool = False
    share_draw: bool = True
    pseudo_views_per_iter: int = 1
    # pseudo-view sampling
    pseudo_interpolate: bool = True
    pseudo_rotation_jitter: float = 0.05
    pseudo_translation_jitter: float = 0.02
    # per-group learning rates (position lr scales with scene extent, decays exponentially)
    lr_position_init: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 0.05
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    # densification / pruning
    densify_grad_threshold: float = 2e-4
    densify_percent_dense: float = 0.01
    prune_opacity_floor: float = 0.005
    opacity_reset_value: float = 0.01
    unpool_k: int = 3
    max_gaussians: int = 200_000
    max_sh_degree: int = 3
    # photometric supervision
    background: tuple = (0.0, 0.0, 0.0)
    l1_band_mask: bool = False
    band_low: float = 30.0 / 255.0
    band_high: float = 0.99
    # diffusion-style schedule
    schedule_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_range_low: float = 0.02
    t_range_high: float = 0.98
    # guards
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if not 0.0 <= self.prior_start_frac < self.prior_end_frac <= 1.0:
            raise ValueError("need 0 <= prior_start < prior_end <= total_iters")
        for name in ("lambda_l1", "lambda_ssim", "lambda_depth", "lambda_geo", "lambda_guided",
                     "eta_r", "eta_d", "tau_guided", "tau_geo"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.unpool_k < 1:
            raise ValueError("unpool_k must be >= 1")

    def _at(self, frac: float) -> int:
        return int(round(frac * self.total_iters))

    @property
    def prior_start(self) -> int:
        return self._at(self.prior_start_frac)

    @property
    def prior_end(self) -> int:
        return self._at(self.prior_end_frac)

    @property
    def warmup_iters(self) -> int:
        return self._at(self.warmup_frac)

    @property
    def densify_interval(self) -> int:
        return self._at(self.densify_interval_frac)

    @property
    def prune_interval(self) -> int:
        return self._at(self.prune_interval_frac)

    @property
    def sh_interval(self) -> int:
        return self._at(self.sh_interval_frac)

    @property
    def opacity_reset_iters(self) -> tuple:
        return tuple(self._at(f) for f in self.opacity_reset_fracs)

    def warmup_weight(self, iteration: int) -> float:
        """Linear ramp of prior-driven weights after the window opens."""
        if iteration < self.prior_start or iteration > self.prior_end:
            return 0.0
        if self.warmup_iters <= 0:
            return 1.0
        return float(min((iteration - self.prior_start) / self.warmup_iters, 1.0))


@dataclass
class SeenView:
    name: str
    cam: CameraIntrinsics
    pose: Pose
    image: np.ndarray
    depth: np.ndarray | None = None


@dataclass
class AdamGroups:
    """Per-parameter-group Adam with moment arrays tracking the cloud size."""

    config: TrainConfig
    extent: float
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    @staticmethod
    def for_cloud(cloud: GaussianCloud, config: TrainConfig, extent: float) -> "AdamGroups":
        opt = AdamGroups(config, extent)
        for name in PARAM_FIELDS:
            arr = getattr(cloud, name)
            opt.m[name] = np.zeros_like(arr)
            opt.v[name] = np.zeros_like(arr)
        return opt

    def lr(self, name: str, iteration: int) -> float:
        c = self.config
        if name == "positions":
            frac = iteration / max(c.total_iters, 1)
            return self.extent * c.lr_position_init * (c.lr_position_final / c.lr_position_init) ** frac
        return {
            "rotations": c.lr_rotation,
            "log_scales": c.lr_scale,
            "opacity_logits": c.lr_opacity,
            "sh_coeffs": c.lr_sh,
        }[name]

    def step(self, cloud: GaussianCloud, grads: RenderGrads, iteration: int) -> None:
        c = self.config
        self.step_count += 1
        correct1 = 1.0 - c.adam_beta1**self.step_count
        correct2 = 1.0 - c.adam_beta2**self.step_count
        for name in PARAM_FIELDS:
            g = getattr(grads, name)
            self.m[name] = c.adam_beta1 * self.m[name] + (1 - c.adam_beta1) * g
            self.v[name] = c.adam_beta2 * self.v[name] + (1 - c.adam_beta2) * g * g
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            getattr(cloud, name)[...] -= self.lr(name, iteration) * m_hat / (np.sqrt(v_hat) + c.adam_eps)
        cloud.renormalize_rotations()
        cloud.mark_mutated()

    def resize(self, keep: np.ndarray, n_new: int) -> None:
        for name in PARAM_FIELDS:
            for store in (self.m, self.v):
                kept = store[name][keep]
                pad = np.zeros((n_new,) + kept.shape[1:])
                store[name] = np.concatenate([kept, pad], axis=0)

    def zero_moments(self, name: str) -> None:
        self.m[name][...] = 0.0
        self.v[name][...] = 0.0

    def congruent_with(self, cloud: GaussianCloud) -> bool:
        return all(self.m[n].shape == getattr(cloud, n).shape for n in PARAM_FIELDS)


def _zero_grads(cloud: GaussianCloud) -> RenderGrads:
    return RenderGrads(
        np.zeros((cloud.n, 3)), np.zeros((cloud.n, 4)), np.zeros((cloud.n, 3)),
        np.zeros(cloud.n), np.zeros_like(cloud.sh_coeffs), np.zeros(cloud.n),
    )


def _accumulate(into: RenderGrads, other: RenderGrads) -> None:
    for name in PARAM_FIELDS:
        getattr(into, name)[...] += getattr(other, name)
    into.mean2d_norms[...] += other.mean2d_norms


def _knn(positions: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force k-nearest neighbours; returns (indices (N,k), distances (N,k))."""
    n = positions.shape[0]
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    np.fill_diagonal(dist, np.inf)
    k = min(k, n - 1)
    idx = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(dist, idx, axis=1)


def densify_and_unpool(
    cloud: GaussianCloud,
    stats: DensifyStats,
    grad_threshold: float,
    k_neighbors: int,
    extent: float,
    rng: np.random.Generator,
    percent_dense: float = 0.01,
    max_gaussians: int = 200_000,
) -> tuple[GaussianCloud, np.ndarray, int]:
    """Clone/split over-threshold gaussians and unpool into sparse neighbourhoods.

    Returns (new cloud, keep mask over old rows, number of appended rows);
    new rows carry zero optimizer state. Split children replace their source;
    unpooled points sit at the centroid of the source and its K nearest
    neighbours with zero SH and the source's opacity logit.
    """
    n = cloud.n
    keep = np.ones(n, dtype=bool)
    if n == 0:
        return cloud, keep, 0
    over = stats.mean_grad() > grad_threshold
    if not over.any():
        return cloud, keep, 0

    max_scale = np.exp(cloud.log_scales).max(axis=1)
    small = max_scale < percent_dense * extent
    clone_idx = np.flatnonzero(over & small)
    split_idx = np.flatnonzero(over & ~small)

    unpool_idx = np.zeros(0, dtype=np.int64)
    neighbor_idx = None
    if n > 1:
        neighbor_idx, neighbor_dist = _knn(cloud.positions, k_neighbors)
        nn = neighbor_dist[:, 0]
        median_nn = float(np.median(nn))
        unpool_idx = np.flatnonzero(over & (nn > median_nn))

    added = len(clone_idx) + 2 * len(split_idx) + len(unpool_idx)
    if n - len(split_idx) + added > max_gaussians:
        log.info("densification skipped: would exceed max_gaussians")
        return cloud, keep, 0

    parts = {name: [getattr(cloud, name)] for name in PARAM_FIELDS}
    keep[split_idx] = False
    for name in PARAM_FIELDS:
        parts[name][0] = parts[name][0][keep]

    def append(rows: dict) -> None:
        for name in PARAM_FIELDS:
            parts[name].append(rows[name])

    if len(clone_idx):
        append({name: getattr(cloud, name)[clone_idx].copy() for name in PARAM_FIELDS})

    if len(split_idx):
        src = {name: getattr(cloud, name)[split_idx] for name in PARAM_FIELDS}
        scales = np.exp(src["log_scales"])
        q = src["rotations"] / np.linalg.norm(src["rotations"], axis=1, keepdims=True)
        from .rasterizer import _batch_quat_to_rot

        rot = _batch_quat_to_rot(q)
        for _ in range(2):
            offsets = rng.standard_normal(scales.shape) * scales
            world = np.einsum("nij,nj->ni", rot, offsets)
            append(
                {
                    "positions": src["positions"] + world,
                    "rotations": src["rotations"].copy(),
                    "log_scales": np.log(scales / 1.6),
                    "opacity_logits": src["opacity_logits"].copy(),
                    "sh_coeffs": src["sh_coeffs"].copy(),
                }
            )

    if len(unpool_idx):
        nb = neighbor_idx[unpool_idx]
        group = np.concatenate([unpool_idx[:, None], nb], axis=1)
        centroid = cloud.positions[group].mean(axis=1)
        mean_dist = np.linalg.norm(
            cloud.positions[nb] - cloud.positions[unpool_idx][:, None, :], axis=2
        ).mean(axis=1)
        m = len(unpool_idx)
        quat = np.zeros((m, 4))
        quat[:, 0] = 1.0
        append(
            {
                "positions": centroid,
                "rotations": quat,
                "log_scales": np.repeat(np.log(np.maximum(mean_dist, 1e-7))[:, None], 3, axis=1),
                "opacity_logits": cloud.opacity_logits[unpool_idx].copy(),
                "sh_coeffs": np.zeros((m,) + cloud.sh_coeffs.shape[1:]),
            }
        )

    new_cloud = GaussianCloud(
        *(np.concatenate(parts[name], axis=0) for name in PARAM_FIELDS),
        active_sh_degree=cloud.active_sh_degree,
    )
    return new_cloud, keep, added


def prune(cloud: GaussianCloud, opacity_floor: float) -> tuple[GaussianCloud, np.ndarray]:
    """Drop gaussians below the opacity floor; no size-based pruning."""
    if not 0.0 < opacity_floor < 1.0:
        raise ValueError("opacity_floor must be in (0, 1)")
    keep = cloud.opacities >= opacity_floor
    if keep.all():
        return cloud, keep
    new_cloud = GaussianCloud(
        *(getattr(cloud, name)[keep] for name in PARAM_FIELDS),
        active_sh_degree=cloud.active_sh_degree,
    )
    return new_cloud, keep


def reset_opacity(cloud: GaussianCloud, target: float = 0.01) -> None:
    """Clamp every opacity down to at most `target` (logits edited in place)."""
    if not 0.0 < target < 1.0:
        raise ValueError("target opacity must be in (0, 1)")
    cap = float(np.log(target / (1.0 - target)))
    np.minimum(cloud.opacity_logits, cap, out=cloud.opacity_logits)
    cloud.mark_mutated()


@dataclass
class TrainResult:
    cloud: GaussianCloud
    losses: list
    events: list


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, *key)))


def train(
    config: TrainConfig,
    cloud: GaussianCloud,
    seen_views: list[SeenView],
    prior: DenoiserOracle | None = None,
    rectified: DenoiserOracle | None = None,
    pseudo_depth_fn=None,
    bounds: SceneBounds | None = None,
    schedule: NoiseSchedule | None = None,
    on_checkpoint=None,
) -> TrainResult:
    """Run the full optimization; returns the trained cloud and per-iteration logs.

    The prior gradient is applied under the same mean-per-element convention as
    the photometric losses so the configured weights stay resolution independent.
    """
    if not seen_views:
        raise ValueError("need at least one seen view")
    cloud = cloud.copy()
    extent = bounds.extent if bounds is not None else 1.0
    optimizer = AdamGroups.for_cloud(cloud, config, extent)
    stats = DensifyStats.zeros(cloud.n)
    if schedule is None:
        schedule = make_schedule(
            config.schedule_steps, config.beta_start, config.beta_end,
            t_range=(config.t_range_low, config.t_range_high),
        )
    sampler = PseudoViewSampler(
        seed=int(_stream(config.seed, 0).integers(2**31)),
        rotation_jitter=config.pseudo_rotation_jitter,
        translation_jitter=config.pseudo_translation_jitter,
        interpolate=config.pseudo_interpolate,
        extent=extent,
    )
    bg = np.asarray(config.background, dtype=np.float64)
    band = (config.band_low, config.band_high) if config.l1_band_mask else None
    poses = [v.pose for v in seen_views]
    use_prior = prior is not None and rectified is not None and config.lambda_guided > 0
    losses: list = []
    events: list = []
    prev_guard = None

    for it in range(1, config.total_iters + 1):
        view = seen_views[(it - 1) % len(seen_views)]
        out = render(cloud, view.cam, view.pose, bg)
        l1_val, l1_grad = l1_loss(out.color, view.image, band)
        ssim_val, ssim_loss_val, ssim_grad = ssim(out.color, view.image)
        d_color = config.lambda_l1 * l1_grad + config.lambda_ssim * ssim_grad
        d_depth = np.zeros_like(out.depth)
        seen_depth_coeff = config.eta_d if it <= config.prior_end else config.seen_depth_weight_after_prior
        depth_val = 0.0
        if view.depth is not None and config.lambda_depth > 0:
            dv, dg, _ = depth_loss(out.depth, view.depth, None, None, seen_depth_coeff)
            depth_val += dv
            d_depth += config.lambda_depth * dg
        grads = render_backward(cloud, view.cam, view.pose, out.workspace, d_color, d_depth)
        stats.update(grads, out.workspace)
        total_grads = _zero_grads(cloud)
        _accumulate(total_grads, grads)

        geo_val = 0.0
        guided_val = 0.0
        warm = config.warmup_weight(it)
        run_pseudo = warm > 0 and (
            use_prior
            or config.lambda_geo > 0
            or (config.lambda_depth > 0 and pseudo_depth_fn is not None)
        )
        if run_pseudo:
            for k in range(config.pseudo_views_per_iter):
                pseudo_pose = sampler.sample(poses)
                pseudo_out = render(cloud, view.cam, pseudo_pose, bg)
                dists = [pose_distance(pseudo_pose, p, extent) for p in poses]
                src = seen_views[int(np.argmin(dists))]
                src_out = out if src is view else render(cloud, src.cam, src.pose, bg)
                rel = relative_pose(pseudo_pose, src.pose)
                fields_w = warp_fields(src.image, src_out.depth, pseudo_out.depth, rel, view.cam)
                mask_geo = mask_from_fields(fields_w, config.tau_geo)
                d_color_p = np.zeros_like(pseudo_out.color)
                d_depth_p = np.zeros_like(pseudo_out.depth)
                if config.lambda_geo > 0:
                    gv, gg = geo_loss(pseudo_out.color, fields_w.warped_image, mask_geo)
                    geo_val += warm * gv
                    d_color_p += config.lambda_geo * warm * gg
                if use_prior:
                    mask_guided = mask_from_fields(fields_w, config.tau_guided)
                    warp_res = WarpResult(
                        fields_w.warped_image, fields_w.warped_depth, mask_guided,
                        float(mask_guided.mean()),
                    )
                    g, diag = guided_score_grad(
                        pseudo_out.color, warp_res, prior, rectified, schedule,
                        config.eta_r, _stream(config.seed, 2, it, k), config.guidance,
                        share_draw=config.share_draw,
                        literal_split_weighting=config.literal_split_weighting,
                    )
                    w1, w2 = (config.eta_r, 1.0) if config.literal_split_weighting else (1.0, config.eta_r)
                    guided_val += warm * float(w1 * np.mean(diag.g1**2) + w2 * np.mean(diag.g2**2))
                    d_color_p += config.lambda_guided * warm * g / g.size
                if config.lambda_depth > 0 and pseudo_depth_fn is not None:
                    oracle_depth = pseudo_depth_fn(pseudo_pose)
                    dv, dg, _ = depth_loss(pseudo_out.depth, oracle_depth, None, None, 1.0)
                    depth_val += warm * dv
                    d_depth_p += config.lambda_depth * warm * dg
                pgrads = render_backward(cloud, view.cam, pseudo_pose, pseudo_out.workspace, d_color_p, d_depth_p)
                stats.update(pgrads, pseudo_out.workspace)
                _accumulate(total_grads, pgrads)

        breakdown = total_loss(
            l1_val, ssim_loss_val, depth_val, geo_val, guided_val,
            config.lambda_l1, config.lambda_ssim, config.lambda_depth,
            config.lambda_geo, config.lambda_guided,
        )
        guard_value = config.lambda_l1 * l1_val + config.lambda_ssim * ssim_loss_val
        if not np.isfinite(breakdown.total):
            if on_checkpoint:
                on_checkpoint(it, cloud)
            raise DivergedLoss(f"non-finite loss at iteration {it}")
        if prev_guard is not None and guard_value > config.divergence_factor * max(prev_guard, 1e-8):
            if on_checkpoint:
                on_checkpoint(it, cloud)
            raise DivergedLoss(
                f"photometric loss jumped {guard_value / max(prev_guard, 1e-8):.1f}x at iteration {it}"
            )
        prev_guard = guard_value
        losses.append(
            {
                "iteration": it, "l1": l1_val, "ssim": ssim_loss_val, "depth": depth_val,
                "geo": geo_val, "score_guided": guided_val, "total": breakdown.total,
                "warmup": warm, "gaussians": cloud.n,
            }
        )

        optimizer.step(cloud, total_grads, it)

        if config.sh_interval > 0 and it % config.sh_interval == 0:
            new_deg = min(cloud.active_sh_degree + 1, min(config.max_sh_degree, cloud.max_sh_degree))
            if new_deg != cloud.active_sh_degree:
                cloud.active_sh_degree = new_deg
                cloud.mark_mutated()

        in_densify_window = config._at(config.densify_start_frac) <= it <= config._at(config.densify_end_frac)
        if config.densify_interval > 0 and in_densify_window and it % config.densify_interval == 0:
            cloud, keep, added = densify_and_unpool(
                cloud, stats, config.densify_grad_threshold, config.unpool_k, extent,
                _stream(config.seed, 3, it), config.densify_percent_dense, config.max_gaussians,
            )
            if added or not keep.all():
                optimizer.resize(keep, added)
                events.append(f"iter {it}: densified to {cloud.n}")
            stats = DensifyStats.zeros(cloud.n)
            cloud.mark_mutated()

        if config.prune_interval > 0 and in_densify_window and it % config.prune_interval == 0:
            cloud, keep = prune(cloud, config.prune_opacity_floor)
            if not keep.all():
                optimizer.resize(keep, 0)
                stats = DensifyStats.zeros(cloud.n)
                events.append(f"iter {it}: pruned to {cloud.n}")
            cloud.mark_mutated()

        if it in config.opacity_reset_iters:
            reset_opacity(cloud, config.opacity_reset_value)
            optimizer.zero_moments("opacity_logits")
            events.append(f"iter {it}: opacity reset")

        assert optimizer.congruent_with(cloud), "optimizer state out of sync with cloud"

        if on_checkpoint and it == config.total_iters:
            on_checkpoint(it, cloud)

    return TrainResult(cloud, losses, events)
