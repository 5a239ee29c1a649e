"""Sparse-view 3D reconstruction with differentiable Gaussian splatting and
warp-rectified score guidance."""

from .geometry import CameraIntrinsics, Pose, PseudoViewSampler, project, relative_pose, unproject
from .rasterizer import RenderOutput, render, render_backward
from .scene import GaussianCloud, SceneBounds, covariance, evaluate_sh, gaussian_density, init_synthetic
from .score import GaussianMixtureOracle, NoiseSchedule, guided_score_grad, make_schedule, sds_grad
from .trainer import TrainConfig, train
from .warp import WarpResult, inverse_warp, warp_pixel

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "Pose",
    "PseudoViewSampler",
    "project",
    "unproject",
    "relative_pose",
    "GaussianCloud",
    "SceneBounds",
    "covariance",
    "gaussian_density",
    "evaluate_sh",
    "init_synthetic",
    "RenderOutput",
    "render",
    "render_backward",
    "WarpResult",
    "warp_pixel",
    "inverse_warp",
    "NoiseSchedule",
    "make_schedule",
    "GaussianMixtureOracle",
    "sds_grad",
    "guided_score_grad",
    "TrainConfig",
    "train",
    "__version__",
]
