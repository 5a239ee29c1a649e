"""Desk-scale mode-seeking experiment on an analytic two-mode prior.

Plain score distillation started slightly nearer the wrong (failure) mode
descends into it; the warp-rectified gradient with an inpainting condition that
identifies the target mode converges to the target instead. Also checks the
aliasing premise: heavy noising erases the relative distance gap between modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .score import (
    GaussianMixtureOracle,
    InpaintCondition,
    NoiseSchedule,
    guided_score_grad,
    make_schedule,
    sds_grad,
)
from .warp import WarpResult


@dataclass
class ModeDemoConfig:
    seed: int = 0
    image_hw: tuple = (4, 4)
    cov_scale: float = 0.05
    observed_fraction: float = 0.5
    init_bias: float = 0.08          # fraction of the mode gap toward the failure mode
    init_spread: float = 0.02
    steps: int = 2000
    lr: float = 0.08
    guidance_sds: float = 5.0
    guidance_guided: float = 7.5
    eta_r: float = 0.1
    n_seeds: int = 100
    t_low: float = 0.02
    t_high: float = 0.20
    schedule_steps: int = 1000
    hit_radius: float = 0.1          # fraction of the mode gap
    literal_split_weighting: bool = False


@dataclass
class ModeDemoProblem:
    schedule: NoiseSchedule
    oracle: GaussianMixtureOracle
    target: np.ndarray
    failure: np.ndarray
    condition: InpaintCondition
    warp: WarpResult
    gap: float


@dataclass
class BasinRun:
    seed: int
    method: str
    dist_target: float
    dist_failure: float
    trajectory: list = field(default_factory=list)


def build_problem(cfg: ModeDemoConfig) -> ModeDemoProblem:
    h, w = cfg.image_hw
    shape = (h, w, 3)
    rng = np.random.default_rng(cfg.seed)
    target = rng.uniform(0.1, 0.9, shape)
    failure = rng.uniform(0.1, 0.9, shape)
    gap = float(np.linalg.norm(target - failure))
    schedule = make_schedule(cfg.schedule_steps, t_range=(cfg.t_low, cfg.t_high))
    oracle = GaussianMixtureOracle.from_images([target, failure], cfg.cov_scale, schedule)
    mask = np.zeros((h, w), dtype=bool)
    mask.ravel()[: max(1, int(round(cfg.observed_fraction * h * w)))] = True
    warp = WarpResult(
        warped_image=target * mask[:, :, None],
        warped_depth=np.ones((h, w)),
        mask=mask,
        valid_fraction=float(mask.mean()),
    )
    condition = InpaintCondition(
        masked_image=warp.warped_image, mask=np.repeat(mask[:, :, None], 3, axis=2)
    )
    return ModeDemoProblem(schedule, oracle, target, failure, condition, warp, gap)


def run_seed(problem: ModeDemoProblem, cfg: ModeDemoConfig, seed: int, method: str,
             record_every: int = 0) -> BasinRun:
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, seed)))
    u = problem.failure - problem.target
    x0 = 0.5 * (problem.target + problem.failure) + cfg.init_bias * u
    x0 = x0 + cfg.init_spread * problem.gap * rng.standard_normal(x0.shape) / np.sqrt(x0.size)
    traj = []
    for step in range(cfg.steps):
        if method == "sds":
            g = sds_grad(x0, problem.oracle, problem.schedule, rng, cfg.guidance_sds)
        else:
            g, _ = guided_score_grad(
                x0, problem.warp, problem.oracle, problem.oracle, problem.schedule,
                cfg.eta_r, rng, cfg.guidance_guided,
                literal_split_weighting=cfg.literal_split_weighting,
            )
        x0 = x0 - cfg.lr * g
        if record_every and step % record_every == 0:
            traj.append(
                (step, float(np.linalg.norm(x0 - problem.target)) / problem.gap,
                 float(np.linalg.norm(x0 - problem.failure)) / problem.gap)
            )
    return BasinRun(
        seed, method,
        float(np.linalg.norm(x0 - problem.target)) / problem.gap,
        float(np.linalg.norm(x0 - problem.failure)) / problem.gap,
        traj,
    )


@dataclass
class ModeDemoResult:
    runs: list
    sds_failure_rate: float
    guided_target_rate: float
    aliasing_ratio: float


def aliasing_ratio(problem: ModeDemoProblem, alpha_bar: float = 1e-4) -> float:
    """Distance-gap ratio between the noised-mean distances for an equidistant point.

    An x0 equidistant from both modes stays equidistant after scaling by
    sqrt(alpha_bar); the ratio of the two distances is the aliasing measure.
    """
    rng = np.random.default_rng(problem.oracle.schedule.steps)
    mid = 0.5 * (problem.target + problem.failure)
    u = (problem.failure - problem.target).ravel()
    perp = rng.standard_normal(u.shape)
    perp -= (perp @ u) / (u @ u) * u
    perp = perp / np.linalg.norm(perp) * 0.3 * problem.gap
    x0 = mid.ravel() + perp
    s = np.sqrt(alpha_bar)
    d_t = np.linalg.norm(s * x0 - s * problem.target.ravel())
    d_f = np.linalg.norm(s * x0 - s * problem.failure.ravel())
    return float(d_t / d_f)


def run_mode_demo(cfg: ModeDemoConfig, record_every: int = 0) -> ModeDemoResult:
    problem = build_problem(cfg)
    runs = []
    sds_hits = 0
    guided_hits = 0
    for seed in range(cfg.n_seeds):
        r_sds = run_seed(problem, cfg, seed, "sds", record_every)
        r_guided = run_seed(problem, cfg, seed, "guided", record_every)
        runs.extend([r_sds, r_guided])
        sds_hits += r_sds.dist_failure < cfg.hit_radius
        guided_hits += r_guided.dist_target < cfg.hit_radius
    return ModeDemoResult(
        runs,
        sds_failure_rate=sds_hits / cfg.n_seeds,
        guided_target_rate=guided_hits / cfg.n_seeds,
        aliasing_ratio=aliasing_ratio(problem),
    )
