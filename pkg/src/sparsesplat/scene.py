"""Trainable Gaussian point cloud: parameterization, SH color, synthetic init, checkpoints.

Scales live in log-space and opacities in logit-space so positivity and (0,1)
bounds hold by construction.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DegreeTooHigh, IndexOutOfRange, MalformedFile, ZeroQuaternion
from .geometry import quat_to_rot

# Real spherical-harmonics constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

_CKPT_MAGIC = b"SSPLATC1"


def sh_band_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions, shape (N, (degree+1)^2)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, sh_band_count(degree)))
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * z * z - x * x - y * y)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (x * x - y * y)
    if degree >= 3:
        out[:, 9] = SH_C3[0] * y * (3 * x * x - y * y)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * z * z - x * x - y * y)
        out[:, 12] = SH_C3[3] * z * (2 * z * z - 3 * x * x - 3 * y * y)
        out[:, 13] = SH_C3[4] * x * (4 * z * z - x * x - y * y)
        out[:, 14] = SH_C3[5] * z * (x * x - y * y)
        out[:, 15] = SH_C3[6] * x * (x * x - 3 * y * y)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions, shape (N, bands, 3)."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros(n)
    g = np.zeros((n, sh_band_count(degree), 3))
    if degree >= 1:
        g[:, 1] = np.stack([zero, np.full(n, -SH_C1), zero], axis=1)
        g[:, 2] = np.stack([zero, zero, np.full(n, SH_C1)], axis=1)
        g[:, 3] = np.stack([np.full(n, -SH_C1), zero, zero], axis=1)
    if degree >= 2:
        g[:, 4] = SH_C2[0] * np.stack([y, x, zero], axis=1)
        g[:, 5] = SH_C2[1] * np.stack([zero, z, y], axis=1)
        g[:, 6] = SH_C2[2] * np.stack([-2 * x, -2 * y, 4 * z], axis=1)
        g[:, 7] = SH_C2[3] * np.stack([z, zero, x], axis=1)
        g[:, 8] = SH_C2[4] * np.stack([2 * x, -2 * y, zero], axis=1)
    if degree >= 3:
        g[:, 9] = SH_C3[0] * np.stack([6 * x * y, 3 * x * x - 3 * y * y, zero], axis=1)
        g[:, 10] = SH_C3[1] * np.stack([y * z, x * z, x * y], axis=1)
        g[:, 11] = SH_C3[2] * np.stack([-2 * x * y, 4 * z * z - x * x - 3 * y * y, 8 * y * z], axis=1)
        g[:, 12] = SH_C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * z * z - 3 * x * x - 3 * y * y], axis=1)
        g[:, 13] = SH_C3[4] * np.stack([4 * z * z - 3 * x * x - y * y, -2 * x * y, 8 * x * z], axis=1)
        g[:, 14] = SH_C3[5] * np.stack([2 * x * z, -2 * y * z, x * x - y * y], axis=1)
        g[:, 15] = SH_C3[6] * np.stack([3 * x * x - 3 * y * y, -6 * x * y, zero], axis=1)
    return g


@dataclass(frozen=True)
class SceneBounds:
    center: np.ndarray
    extent: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.extent <= 0:
            raise ValueError("extent must be positive")


@dataclass
class GaussianCloud:
    """The trainable representation: one row per Gaussian.

    Mutating operations must bump `version` so render workspaces can detect
    staleness before a backward pass.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    active_sh_degree: int = 0
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(n, -1, 3)
        if not 0 <= self.active_sh_degree <= self.max_sh_degree:
            raise ValueError("active_sh_degree out of range for stored coefficients")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def max_sh_degree(self) -> int:
        return int(np.sqrt(self.sh_coeffs.shape[1])) - 1

    @property
    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def mark_mutated(self) -> None:
        self.version += 1

    def renormalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ZeroQuaternion("quaternion collapsed to zero during optimization")
        self.rotations /= norms

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh_coeffs.copy(),
            self.active_sh_degree,
        )

    @staticmethod
    def empty(max_sh_degree: int = 3) -> "GaussianCloud":
        b = sh_band_count(max_sh_degree)
        return GaussianCloud(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, b, 3))
        )


def covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """3x3 covariance R S S^T R^T from a quaternion and log-scales."""
    q = np.asarray(rotation, dtype=np.float64).reshape(4)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise ZeroQuaternion("cannot build covariance from a zero quaternion")
    rot = quat_to_rot(q / norm)
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64).reshape(3))
    return (rot * s2[None, :]) @ rot.T


def gaussian_density(cloud: GaussianCloud, point: np.ndarray, index: int) -> float:
    """Unnormalized Gaussian falloff of component `index` at a world point."""
    if not 0 <= index < cloud.n:
        raise IndexOutOfRange(f"gaussian index {index} out of range for cloud of {cloud.n}")
    sigma = covariance(cloud.rotations[index], cloud.log_scales[index])
    d = np.asarray(point, dtype=np.float64).reshape(3) - cloud.positions[index]
    return float(np.exp(-0.5 * d @ np.linalg.solve(sigma, d)))


def evaluate_sh(coeffs: np.ndarray, direction: np.ndarray, degree: int) -> np.ndarray:
    """RGB color for one coefficient row and a unit view direction, clamped at 0."""
    coeffs = np.asarray(coeffs, dtype=np.float64).reshape(-1, 3)
    if sh_band_count(degree) > coeffs.shape[0]:
        raise DegreeTooHigh(f"degree {degree} exceeds stored bands {coeffs.shape[0]}")
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit-norm")
    basis = sh_basis(direction[None, :], degree)[0]
    rgb = basis @ coeffs[: basis.shape[0]] + 0.5
    return np.maximum(rgb, 0.0)


def init_synthetic(
    n: int,
    bounds: SceneBounds,
    rng: np.random.Generator,
    initial_opacity: float = 0.1,
    max_sh_degree: int = 3,
) -> GaussianCloud:
    """Uniform random cloud inside the bounds; stands in for SfM initialization."""
    bands = sh_band_count(max_sh_degree)
    if n == 0:
        return GaussianCloud.empty(max_sh_degree)
    half = bounds.extent / 2.0
    positions = rng.uniform(-half, half, size=(n, 3)) + bounds.center
    if n > 1:
        diff = positions[:, None, :] - positions[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(dist, np.inf)
        nn = dist.min(axis=1)
        scale = np.maximum(nn, 1e-7 * bounds.extent)
    else:
        scale = np.full(1, 0.1 * bounds.extent)
    log_scales = np.repeat(np.log(scale)[:, None], 3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    logit = float(np.log(initial_opacity / (1.0 - initial_opacity)))
    sh = np.zeros((n, bands, 3))
    return GaussianCloud(positions, rotations, log_scales, np.full(n, logit), sh, active_sh_degree=0)


def save_checkpoint(cloud: GaussianCloud, path: str) -> None:
    """Versioned binary layout: magic, counts, then column-major float32 arrays."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        np.array([cloud.n], dtype="<i8").tofile(f)
        np.array([cloud.active_sh_degree, cloud.sh_coeffs.shape[1]], dtype="<i4").tofile(f)
        for arr in (cloud.positions, cloud.rotations, cloud.log_scales, cloud.opacity_logits, cloud.sh_coeffs):
            arr.astype("<f4").reshape(cloud.n, -1).T.ravel().tofile(f)


def load_checkpoint(path: str) -> GaussianCloud:
    with open(path, "rb") as f:
        if f.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise MalformedFile(f"{path}: bad checkpoint magic")
        n = int(np.fromfile(f, dtype="<i8", count=1)[0])
        degree, bands = (int(v) for v in np.fromfile(f, dtype="<i4", count=2))
        cols = {"positions": 3, "rotations": 4, "log_scales": 3, "opacity_logits": 1, "sh_coeffs": bands * 3}
        data = {}
        for name, width in cols.items():
            flat = np.fromfile(f, dtype="<f4", count=n * width)
            if flat.size != n * width:
                raise MalformedFile(f"{path}: truncated checkpoint")
            data[name] = flat.reshape(width, n).T.astype(np.float64)
    return GaussianCloud(
        data["positions"],
        data["rotations"],
        data["log_scales"],
        data["opacity_logits"].reshape(n),
        data["sh_coeffs"].reshape(n, bands, 3),
        active_sh_degree=degree,
    )


def dump_text(cloud: GaussianCloud) -> str:
    """Lossless text dump for diffing checkpoints."""
    buf = io.StringIO()
    buf.write(f"gaussians {cloud.n} sh_degree {cloud.active_sh_degree} bands {cloud.sh_coeffs.shape[1]}\n")
    flat = np.concatenate(
        [
            cloud.positions,
            cloud.rotations,
            cloud.log_scales,
            cloud.opacity_logits[:, None],
            cloud.sh_coeffs.reshape(cloud.n, -1),
        ],
        axis=1,
    )
    for row in flat:
        buf.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue()
