"""Camera models, rigid transforms, projection, and pseudo-viewpoint sampling.

Conventions (fixed for the whole package, asserted by golden tests):
  * poses are world-to-camera: x_cam = R @ x_world + t
  * camera looks along +z, x right, y down
  * pixel origin is the top-left corner, pixel centers at integer coordinates
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySeenSet, NonPositiveDepth

_ORTHO_TOL = 1e-9


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(rot: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a rotation matrix, w >= 0."""
    m = np.asarray(rot, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_slerp(qa: np.ndarray, qb: np.ndarray, u: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions, shortest arc."""
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb, dot = -qb, -dot
    if dot > 1.0 - 1e-12:
        out = qa + u * (qb - qa)
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1 - u) * theta) * qa + np.sin(u * theta) * qb) / np.sin(theta)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform, used both as a world-to-camera pose and as a relative transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.ascontiguousarray(np.asarray(self.rotation, dtype=np.float64))
        t = np.ascontiguousarray(np.asarray(self.translation, dtype=np.float64).reshape(3))
        if rot.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, point: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=np.float64) + self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: (self ∘ other)(x) = self(other(x))."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    @property
    def camera_center(self) -> np.ndarray:
        """World-space position of the camera origin."""
        return -self.rotation.T @ self.translation

    def matrix4(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def project(point: np.ndarray, cam: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, float]:
    """Pinhole projection of a world point; returns (pixel, camera-frame depth)."""
    p_cam = pose.apply(point)
    z = float(p_cam[2])
    if z <= 1e-6:
        raise NonPositiveDepth(f"camera-frame depth {z} <= 1e-6")
    pixel = np.array([cam.fx * p_cam[0] / z + cam.cx, cam.fy * p_cam[1] / z + cam.cy])
    return pixel, z


def unproject(pixel: np.ndarray, depth: float, cam: CameraIntrinsics, pose: Pose) -> np.ndarray:
    """World point on the camera ray through `pixel` at camera-frame depth `depth`."""
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} <= 0")
    px, py = float(pixel[0]), float(pixel[1])
    p_cam = np.array([depth * (px - cam.cx) / cam.fx, depth * (py - cam.cy) / cam.fy, depth])
    return pose.rotation.T @ (p_cam - pose.translation)


def relative_pose(pose_j: Pose, pose_i: Pose) -> Pose:
    """Rigid transform taking camera-j-frame points to camera-i-frame points."""
    return pose_i.compose(pose_j.inverse())


def pose_distance(a: Pose, b: Pose, extent: float = 1.0) -> float:
    """Rotation angle plus camera-center distance scaled by scene extent."""
    cos = (np.trace(a.rotation @ b.rotation.T) - 1.0) / 2.0
    angle = float(np.arccos(np.clip(cos, -1.0, 1.0)))
    return angle + float(np.linalg.norm(a.camera_center - b.camera_center)) / extent


def _random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    n = np.linalg.norm(v)
    while n < 1e-12:
        v = rng.standard_normal(3)
        n = np.linalg.norm(v)
    return v / n


def _axis_angle_rot(axis: np.ndarray, angle: float) -> np.ndarray:
    w = np.cos(angle / 2.0)
    xyz = np.sin(angle / 2.0) * axis
    return quat_to_rot(np.array([w, *xyz]))


@dataclass
class PseudoViewSampler:
    """Draws random viewpoints around a set of seen poses.

    With `interpolate` set, a base pose is blended (slerp/lerp) with its nearest
    neighbour at a uniform parameter before jitter is applied; otherwise the
    sample jitters around a uniformly chosen seen pose.
    """

    seed: int
    rotation_jitter: float = 0.05
    translation_jitter: float = 0.02
    interpolate: bool = False
    extent: float = 1.0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.rotation_jitter < 0 or self.translation_jitter < 0:
            raise ValueError("jitter magnitudes must be >= 0")
        self._rng = np.random.default_rng(self.seed)

    def sample(self, seen: list[Pose]) -> Pose:
        if not seen:
            raise EmptySeenSet("no seen poses to sample around")
        rng = self._rng
        idx = int(rng.integers(len(seen)))
        base = seen[idx]
        if self.interpolate and len(seen) > 1:
            dists = [pose_distance(base, p, self.extent) if k != idx else np.inf for k, p in enumerate(seen)]
            partner = seen[int(np.argmin(dists))]
            u = float(rng.uniform())
            q = quat_slerp(rot_to_quat(base.rotation), rot_to_quat(partner.rotation), u)
            center = (1 - u) * base.camera_center + u * partner.camera_center
            rot = quat_to_rot(q)
            base = Pose(rot, -rot @ center)
        rot, trans = base.rotation, base.translation
        if self.rotation_jitter > 0:
            axis = _random_unit_vector(rng)
            angle = float(rng.uniform(0.0, self.rotation_jitter))
            rot = _axis_angle_rot(axis, angle) @ rot
        if self.translation_jitter > 0:
            offset = _random_unit_vector(rng) * float(rng.uniform(0.0, self.translation_jitter * self.extent))
            center = base.camera_center + offset
            trans = -rot @ center
        elif self.rotation_jitter > 0:
            trans = -rot @ base.camera_center
        return Pose(rot, trans)
