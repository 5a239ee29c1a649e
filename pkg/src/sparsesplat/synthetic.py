"""Synthetic ground-truth scenes: a random Gaussian cloud viewed from a camera ring.

Generated images and depths are rendered by the package's own rasterizer, so a
zero-noise scene is exactly re-renderable from the stored generating cloud.
Colors are view-independent (SH degree 0) which keeps cross-view photometric
consistency exact for warping experiments.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose
from .io import SceneFile, save_scene, write_float_image, write_ppm
from .rasterizer import render
from .scene import GaussianCloud, SceneBounds, SH_C0, save_checkpoint, sh_band_count


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_gaussians: int = 20
    n_cameras: int = 12
    n_train: int = 3
    resolution: int = 32
    ring_radius: float = 4.0
    arc_degrees: float = 120.0
    extent: float = 2.0
    noise_level: float = 0.0
    focal: float = 1.2  # focal length as a multiple of the resolution

    def __post_init__(self):
        if self.n_gaussians < 1 or self.n_cameras < 1:
            raise ValueError("counts must be >= 1")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")
        if not 1 <= self.n_train <= self.n_cameras:
            raise ValueError("n_train out of range")


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose for a camera at `eye` looking toward `target`."""
    forward = np.asarray(target, dtype=np.float64) - np.asarray(eye, dtype=np.float64)
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, forward)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(np.array([1.0, 0.0, 0.0]), forward)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Pose(rot, -rot @ np.asarray(eye, dtype=np.float64))


def make_gt_cloud(spec: SyntheticSceneSpec, rng: np.random.Generator) -> GaussianCloud:
    """Opaque, smooth, view-independent gaussians filling the scene bounds."""
    n = spec.n_gaussians
    half = spec.extent / 2.0
    positions = rng.uniform(-half, half, size=(n, 3))
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    log_scales = rng.uniform(np.log(0.08 * spec.extent), np.log(0.22 * spec.extent), size=(n, 3))
    alpha = rng.uniform(0.6, 0.95, size=n)
    logits = np.log(alpha / (1.0 - alpha))
    sh = np.zeros((n, sh_band_count(3), 3))
    target_rgb = rng.uniform(0.1, 0.9, size=(n, 3))
    sh[:, 0, :] = (target_rgb - 0.5) / SH_C0
    return GaussianCloud(positions, q, log_scales, logits, sh, active_sh_degree=0)


def ring_cameras(spec: SyntheticSceneSpec) -> list[tuple[CameraIntrinsics, Pose]]:
    res = spec.resolution
    f = spec.focal * res
    cam = CameraIntrinsics(fx=f, fy=f, cx=(res - 1) / 2.0, cy=(res - 1) / 2.0, width=res, height=res)
    out = []
    arcs = np.linspace(-spec.arc_degrees / 2.0, spec.arc_degrees / 2.0, spec.n_cameras)
    for deg in arcs:
        a = np.radians(deg)
        eye = np.array([spec.ring_radius * np.sin(a), 0.6, -spec.ring_radius * np.cos(a)])
        out.append((cam, look_at_pose(eye, np.zeros(3))))
    return out


def train_indices(n_cameras: int, n_train: int) -> list[int]:
    """Evenly spaced training views across the arc."""
    return [int(round(i)) for i in np.linspace(0, n_cameras - 1, n_train)]


def generate_synthetic(spec: SyntheticSceneSpec, out_dir: str | Path) -> SceneFile:
    """Write scene file, ground-truth cloud, and rendered images/depths."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depths").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    cloud = make_gt_cloud(spec, rng)
    save_checkpoint(cloud, out / "gt_cloud.ckpt")

    cams = ring_cameras(spec)
    train = set(train_indices(spec.n_cameras, spec.n_train))
    bg = np.zeros(3)
    views = []
    for i, (cam, pose) in enumerate(cams):
        name = f"{i:03d}"
        rendered = render(cloud, cam, pose, bg)
        image = rendered.color
        if spec.noise_level > 0:
            image = np.clip(image + spec.noise_level * rng.standard_normal(image.shape), 0.0, 1.0)
        write_float_image(out / "images" / f"view_{name}.fimg", image)
        write_ppm(out / "images" / f"view_{name}.ppm", image)
        write_float_image(out / "depths" / f"view_{name}.fimg", rendered.depth)
        views.append(
            {
                "name": name,
                "cam": cam,
                "pose": pose,
                "image": f"images/view_{name}.fimg",
                "depth": f"depths/view_{name}.fimg",
                "split": "train" if i in train else "test",
            }
        )
    scene = SceneFile(out, SceneBounds(np.zeros(3), spec.extent), views, gt_cloud="gt_cloud.ckpt")
    save_scene(scene, out / "scene.txt")
    return scene
