"""File formats: 8-bit PPM, a float32 raster for depths/masks, scene and config files.

The scene and config files share a line-oriented `[section]` / `key = value`
syntax with no external parser dependencies; serialization is canonical so
parse-print-parse is a fixpoint.
"""

from __future__ import annotations

import os
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import MalformedFile
from .geometry import CameraIntrinsics, Pose
from .scene import SceneBounds
from .trainer import TrainConfig

_FLOAT_MAGIC = b"FIMG"


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary 8-bit PPM; values clipped to [0,1] and quantized round-half-up."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w, _ = img.shape
    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise MalformedFile(f"{path}: not a binary PPM")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        try:
            w, h = (int(v) for v in line.split())
            maxval = int(f.readline())
        except ValueError as e:
            raise MalformedFile(f"{path}: bad PPM header") from e
        if maxval != 255:
            raise MalformedFile(f"{path}: only maxval 255 supported")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise MalformedFile(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_float_image(path: str | Path, image: np.ndarray) -> None:
    """Float raster: ASCII header `FIMG h w c`, then little-endian float32 row-major."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(_FLOAT_MAGIC + f" {h} {w} {c}\n".encode())
        img.astype("<f4").tofile(f)


def read_float_image(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().split()
        if len(header) != 4 or header[0] != _FLOAT_MAGIC:
            raise MalformedFile(f"{path}: bad float raster header")
        try:
            h, w, c = (int(v) for v in header[1:])
        except ValueError as e:
            raise MalformedFile(f"{path}: bad float raster dimensions") from e
        data = np.fromfile(f, dtype="<f4", count=h * w * c)
        if data.size != h * w * c:
            raise MalformedFile(f"{path}: truncated float raster")
    out = data.reshape(h, w, c).astype(np.float64)
    return out[:, :, 0] if c == 1 else out


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    return read_ppm(path) if path.suffix == ".ppm" else read_float_image(path)


# ---------------------------------------------------------------------------
# key = value files


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list, np.ndarray)):
        return " ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _parse_scalar(text: str, kind):
    if kind is bool:
        if text not in ("true", "false"):
            raise MalformedFile(f"expected true/false, got {text!r}")
        return text == "true"
    return kind(text)


def write_sections(path: str | Path, sections: list[tuple[str, dict]]) -> None:
    with open(path, "w") as f:
        for name, body in sections:
            f.write(f"[{name}]\n")
            for key, value in body.items():
                f.write(f"{key} = {_format_value(value)}\n")
            f.write("\n")


def read_sections(path: str | Path) -> list[tuple[str, dict]]:
    sections: list[tuple[str, dict]] = []
    current: dict | None = None
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = {}
                sections.append((line[1:-1], current))
            elif "=" in line:
                if current is None:
                    raise MalformedFile(f"{path}:{lineno}: key outside any section")
                key, _, value = line.partition("=")
                current[key.strip()] = value.strip()
            else:
                raise MalformedFile(f"{path}:{lineno}: unparseable line {line!r}")
    return sections


# ---------------------------------------------------------------------------
# train config files


def save_config(config: TrainConfig, path: str | Path) -> None:
    write_sections(path, [("train", asdict(config))])


def config_from_dict(body: dict, base: TrainConfig | None = None) -> TrainConfig:
    values = asdict(base) if base is not None else asdict(TrainConfig())
    kinds = {f.name: f for f in fields(TrainConfig)}
    for key, raw in body.items():
        if key not in kinds:
            raise MalformedFile(f"unknown config key {key!r}")
        default = values[key]
        if isinstance(default, bool):
            values[key] = _parse_scalar(raw, bool) if isinstance(raw, str) else bool(raw)
        elif isinstance(default, tuple):
            if isinstance(raw, str):
                values[key] = tuple(float(v) for v in raw.split())
            else:
                values[key] = tuple(raw)
        elif isinstance(default, int):
            values[key] = int(raw)
        elif isinstance(default, float):
            values[key] = float(raw)
        else:
            values[key] = raw
    return TrainConfig(**values)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    sections = dict(read_sections(path))
    if "train" not in sections:
        raise MalformedFile(f"{path}: missing [train] section")
    return config_from_dict(sections["train"], base)


# ---------------------------------------------------------------------------
# scene files


class SceneFile:
    """Cameras, image/depth references, bounds, and the train/test split."""

    def __init__(self, root: Path, bounds: SceneBounds, views: list[dict], gt_cloud: str | None = None):
        self.root = Path(root)
        self.bounds = bounds
        self.views = views
        self.gt_cloud = gt_cloud
        names = [v["name"] for v in views]
        train = {v["name"] for v in views if v["split"] == "train"}
        test = {v["name"] for v in views if v["split"] == "test"}
        if train & test:
            raise MalformedFile("train/test split lists overlap")
        if len(set(names)) != len(names):
            raise MalformedFile("duplicate view names in scene file")

    def view_names(self, split: str | None = None) -> list[str]:
        return [v["name"] for v in self.views if split is None or v["split"] == split]

    def view(self, name: str) -> dict:
        for v in self.views:
            if v["name"] == name:
                return v
        raise KeyError(name)

    def camera(self, name: str) -> tuple[CameraIntrinsics, Pose]:
        v = self.view(name)
        return v["cam"], v["pose"]

    def image(self, name: str) -> np.ndarray:
        return load_image(self.root / self.view(name)["image"])

    def depth(self, name: str) -> np.ndarray | None:
        rel = self.view(name).get("depth")
        return read_float_image(self.root / rel) if rel else None


def save_scene(scene: SceneFile, path: str | Path) -> None:
    sections: list[tuple[str, dict]] = [
        (
            "scene",
            {
                "bounds_center": scene.bounds.center,
                "bounds_extent": scene.bounds.extent,
                **({"gt_cloud": scene.gt_cloud} if scene.gt_cloud else {}),
            },
        )
    ]
    for v in scene.views:
        cam: CameraIntrinsics = v["cam"]
        pose: Pose = v["pose"]
        body = {
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "rotation": pose.rotation.ravel(),
            "translation": pose.translation,
            "image": v["image"],
            "split": v["split"],
        }
        if v.get("depth"):
            body["depth"] = v["depth"]
        sections.append((f"view {v['name']}", body))
    write_sections(path, sections)


def load_scene(path: str | Path, check_files: bool = True) -> SceneFile:
    path = Path(path)
    root = path.parent
    sections = read_sections(path)
    if not sections or sections[0][0] != "scene":
        raise MalformedFile(f"{path}: first section must be [scene]")
    head = sections[0][1]
    try:
        bounds = SceneBounds(
            np.array([float(v) for v in head["bounds_center"].split()]),
            float(head["bounds_extent"]),
        )
    except (KeyError, ValueError) as e:
        raise MalformedFile(f"{path}: bad [scene] section: {e}") from e
    gt_cloud = head.get("gt_cloud")
    views = []
    for name, body in sections[1:]:
        if not name.startswith("view "):
            raise MalformedFile(f"{path}: unexpected section [{name}]")
        try:
            cam = CameraIntrinsics(
                float(body["fx"]), float(body["fy"]), float(body["cx"]), float(body["cy"]),
                int(body["width"]), int(body["height"]),
            )
            pose = Pose(
                np.array([float(v) for v in body["rotation"].split()]).reshape(3, 3),
                np.array([float(v) for v in body["translation"].split()]),
            )
        except (KeyError, ValueError) as e:
            raise MalformedFile(f"{path}: bad view section [{name}]: {e}") from e
        view = {
            "name": name[5:],
            "cam": cam,
            "pose": pose,
            "image": body["image"],
            "split": body.get("split", "train"),
            "depth": body.get("depth"),
        }
        views.append(view)
    scene = SceneFile(root, bounds, views, gt_cloud)
    if check_files:
        for v in views:
            for key in ("image", "depth"):
                rel = v.get(key)
                if rel and not os.path.exists(root / rel):
                    raise MalformedFile(f"{path}: referenced file missing: {rel}")
        if gt_cloud and not os.path.exists(root / gt_cloud):
            raise MalformedFile(f"{path}: referenced checkpoint missing: {gt_cloud}")
    return scene
