"""Datasets on disk, synthetic scene generation and run configuration files."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli
import torch
from PIL import Image

from .geometry import DualPrimitive, SuperquadricParams
from .mesh import export_primitives, write_obj
from .render import (
    Camera,
    decode_normals,
    normals_to_camera,
    render_image,
    save_mask,
    save_normals,
    save_rgb,
)
from .trainer import TrainConfig, primitive_records, values_from_records

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-3
NORMAL_TOL = 0.05
SYNTH_FOV_DEG = 40.0
SYNTH_DISTANCE = 3.0
GT_THETA = 0.005
GT_SAMPLES = 128


class DatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class View:
    name: str
    camera: Camera
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (H, W) bool
    normal: np.ndarray | None = None  # (H, W, 3) camera-space unit vectors


@dataclass
class Dataset:
    views: list[View]
    name: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def resolution(self) -> tuple[int, int]:
        cam = self.views[0].camera
        return cam.width, cam.height

    @property
    def has_normals(self) -> bool:
        return bool(self.views) and all(v.normal is not None for v in self.views)

    def __len__(self) -> int:
        return len(self.views)


# --------------------------------------------------------------------------- loading


def camera_from_record(rec: dict) -> Camera:
    try:
        m = np.asarray(rec["world_to_camera"], dtype=np.float64)
        w, h = int(rec["width"]), int(rec["height"])
        fx, fy, cx, cy = (float(rec[k]) for k in ("fx", "fy", "cx", "cy"))
    except KeyError as exc:
        raise DatasetError(f"camera record for {rec.get('file', '?')!r} lacks field {exc.args[0]!r}") from None
    if m.size != 16:
        raise DatasetError(f"world_to_camera for {rec.get('file')!r} must have 16 entries")
    m = m.reshape(4, 4)
    rot = m[:3, :3]
    err = np.abs(rot @ rot.T - np.eye(3)).max()
    if err > ORTHO_TOL or np.linalg.det(rot) < 0:
        raise DatasetError(f"rotation of {rec.get('file')!r} is not orthonormal (deviation {err:.3g})")
    return Camera(fx, fy, cx, cy, w, h, rot, m[:3, 3])


def camera_record(file: str, cam: Camera) -> dict:
    return {
        "file": file,
        "width": cam.width,
        "height": cam.height,
        "fx": cam.fx,
        "fy": cam.fy,
        "cx": cam.cx,
        "cy": cam.cy,
        "world_to_camera": [float(x) for x in cam.world_to_camera.ravel()],
    }


def _read_png(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert(mode))


def load_dataset(directory) -> Dataset:
    """Read ``cameras.json`` plus the ``images/``, ``masks/`` and optional ``normals/`` folders."""
    directory = Path(directory)
    cam_path = directory / "cameras.json"
    if not cam_path.is_file():
        raise DatasetError(f"missing {cam_path}")
    try:
        doc = json.loads(cam_path.read_text())
        records = doc["views"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"{cam_path}: expected an object with a 'views' list ({exc})") from None
    if not records:
        raise DatasetError(f"{cam_path}: no views")
    stems = [Path(r["file"]).stem for r in records]
    missing = [s for s in stems if not (directory / "masks" / f"{s}.png").is_file()]
    if missing:
        raise DatasetError(f"missing masks for: {', '.join(missing)}")
    normals_dir = directory / "normals"
    use_normals = normals_dir.is_dir()
    if use_normals:
        missing = [s for s in stems if not (normals_dir / f"{s}.png").is_file()]
        if missing:
            raise DatasetError(f"missing normal maps for: {', '.join(missing)}")
    views = []
    warnings = []
    for rec, stem in zip(records, stems):
        cam = camera_from_record(rec)
        img_path = directory / "images" / rec["file"]
        if not img_path.is_file():
            raise DatasetError(f"missing image {img_path}")
        rgb = _read_png(img_path, "RGB").astype(np.float64) / 255.0
        mask = _read_png(directory / "masks" / f"{stem}.png", "L").astype(np.float64) / 255.0 >= 0.5
        if rgb.shape[:2] != (cam.height, cam.width) or mask.shape != (cam.height, cam.width):
            raise DatasetError(f"{stem}: image size does not match camera {cam.width}x{cam.height}")
        normal = None
        if use_normals:
            normal = decode_normals(_read_png(normals_dir / f"{stem}.png", "RGB"))
            length = np.linalg.norm(normal, axis=-1)
            bad = int((np.abs(length - 1.0) > NORMAL_TOL)[mask].sum())
            if bad:
                warnings.append(f"{stem}: {bad} masked normals deviate from unit length")
            normal = normal / np.maximum(length, 1e-12)[..., None]
        views.append(View(stem, cam, rgb, mask, normal))
    sizes = {(v.camera.width, v.camera.height) for v in views}
    if len(sizes) > 1:
        raise DatasetError(f"views have mixed resolutions: {sorted(sizes)}")
    for w in warnings:
        log.warning(w)
    return Dataset(views, str(doc.get("scene", directory.name)), warnings)


# --------------------------------------------------------------------------- synthetic scenes


def sphere_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def synth_cameras(n_views: int, resolution: int, seed: int, distance: float = SYNTH_DISTANCE, fov_deg: float = SYNTH_FOV_DEG):
    """``n_views - 2`` random viewpoints on a sphere plus one top and one bottom view."""
    if n_views < 2:
        raise ValueError("n_views must be >= 2 (top and bottom views are always included)")
    dirs = sphere_directions(n_views - 2, np.random.default_rng(seed))
    dirs = np.concatenate([dirs, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
    return [Camera.look_at(distance * d, (0, 0, 0), (0, 0, 1), fov_deg, resolution, resolution) for d in dirs]


def shape_from_records(records: list[dict]) -> DualPrimitive:
    """Primitives from checkpoint-style records; alpha, theta and color get GT defaults."""
    filled = []
    for rec in records:
        r = {"alpha": 1.0, "theta": GT_THETA, "color": [0.7, 0.5, 0.3], **rec}
        for q in ("psq", "nsq"):
            r[q] = {"shape": [1.0, 1.0], "translation": [0.0, 0.0, 0.0], "rotation_deg": [0.0, 0.0, 0.0], **r[q]}
        filled.append(r)
    v = values_from_records(filled)
    return DualPrimitive(
        SuperquadricParams(v["psq_scale"], v["psq_shape"], v["psq_translation"], v["psq_rotation"]),
        SuperquadricParams(v["nsq_scale"], v["nsq_shape"], v["nsq_translation"], v["nsq_rotation"]),
        v["alpha"][:, 0],
        v["theta"][:, 0],
        v["color"],
    )


def shape_records(prims: DualPrimitive) -> list[dict]:
    def arr(x):
        return x.detach().double().numpy()

    values = {
        "psq_scale": arr(prims.psq.scale),
        "psq_shape": arr(prims.psq.shape),
        "psq_translation": arr(prims.psq.translation),
        "psq_rotation": arr(prims.psq.rotation),
        "nsq_scale": arr(prims.nsq.scale),
        "nsq_shape": arr(prims.nsq.shape),
        "nsq_translation": arr(prims.nsq.translation),
        "nsq_rotation": arr(prims.nsq.rotation),
        "alpha": arr(prims.transparency).reshape(-1, 1),
        "theta": arr(prims.sharpness).reshape(-1, 1),
        "color": arr(prims.color),
    }
    return primitive_records(values)


# A PSQ with a tiny NSQ far outside it: the NSQ never intersects and carves nothing.
_INERT_NSQ = {"scale": [0.02, 0.02, 0.02], "translation": [1.0, 1.0, 1.0]}

PRESETS: dict[str, list[dict]] = {
    "ellipsoid": [
        {
            "psq": {"scale": [0.6, 0.4, 0.3], "rotation_deg": [20.0, -10.0, 30.0]},
            "nsq": _INERT_NSQ,
        }
    ],
    "holed_box": [
        {
            "psq": {"scale": [0.5, 0.5, 0.3], "shape": [0.1, 0.1]},
            "nsq": {"scale": [0.2, 0.2, 0.6], "shape": [0.1, 1.0]},
        }
    ],
    "sphere": [{"psq": {"scale": [0.5, 0.5, 0.5]}, "nsq": _INERT_NSQ}],
    "two_boxes": [
        {"psq": {"scale": [0.3, 0.3, 0.3], "shape": [0.1, 0.1], "translation": [-0.4, 0.0, 0.0]}, "nsq": _INERT_NSQ},
        {
            "psq": {"scale": [0.3, 0.3, 0.3], "shape": [0.1, 0.1], "translation": [0.4, 0.0, 0.0]},
            "nsq": {"scale": [0.02, 0.02, 0.02], "translation": [-1.0, -1.0, -1.0]},
            "color": [0.3, 0.6, 0.8],
        },
    ],
}


def load_shape_spec(spec) -> DualPrimitive:
    """A preset name, a JSON file (``{"primitives": [...]}`` or a bare list) or a primitive batch."""
    if isinstance(spec, DualPrimitive):
        return spec
    if isinstance(spec, (list, tuple)):
        return shape_from_records(list(spec))
    if isinstance(spec, str) and spec in PRESETS and not Path(spec).exists():
        return shape_from_records(PRESETS[spec])
    path = Path(spec)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read shape spec {path}: {exc}") from None
    records = doc["primitives"] if isinstance(doc, dict) else doc
    return shape_from_records(records)


def synth_dataset(shape_spec, n_views: int = 26, resolution: int = 256, seed: int = 0, out_dir=None, with_normals: bool = True) -> Path:
    """Render a ground-truth scene from ``n_views`` cameras and write a dataset directory."""
    prims = load_shape_spec(shape_spec)
    out = Path(out_dir)
    for sub in ("images", "masks") + (("normals",) if with_normals else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, cam in enumerate(synth_cameras(n_views, resolution, seed)):
        name = f"view_{i:03d}"
        buf = render_image(prims, cam, n_samples=GT_SAMPLES, lighting=None, dtype=torch.float64)
        mask = buf.mask >= 0.5
        save_rgb(out / "images" / f"{name}.png", buf.rgb * mask[..., None])
        save_mask(out / "masks" / f"{name}.png", mask.astype(np.float64))
        if with_normals:
            n_cam = normals_to_camera(buf.normal, cam)
            n_cam /= np.maximum(np.linalg.norm(n_cam, axis=-1, keepdims=True), 1e-12)
            # background faces the camera so every decoded pixel is a unit vector
            n_cam[~mask] = (0.0, 0.0, -1.0)
            save_normals(out / "normals" / f"{name}.png", n_cam)
        records.append(camera_record(f"{name}.png", cam))
    (out / "cameras.json").write_text(json.dumps({"scene": out.name, "views": records}, indent=1))
    groups, _ = export_primitives(prims, 0.5, 64)
    write_obj(groups, out / "gt_mesh.obj")
    (out / "gt_primitives.json").write_text(json.dumps({"primitives": shape_records(prims)}, indent=1))
    return out


# --------------------------------------------------------------------------- run configuration


@dataclass
class RunConfig:
    """Everything a run needs; stored as one flat ``key = value`` TOML file."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: str = ""
    out: str = ""
    render_samples: int = 128
    render_views: str = "all"
    export_threshold: float = 0.5
    export_res: int = 32
    eval_samples: int = 100_000

    def __post_init__(self):
        if not 0.0 <= self.export_threshold <= 1.0:
            raise ConfigError("export_threshold must lie in [0, 1]")
        if self.export_res < 3 or self.render_samples < 2 or self.eval_samples < 1:
            raise ConfigError("export_res >= 3, render_samples >= 2 and eval_samples >= 1 required")

    def to_flat(self) -> dict:
        flat = asdict(self.train)
        flat.update({f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"})
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        train_types = {f.name: f.type for f in fields(TrainConfig)}
        own_types = {f.name: f.type for f in fields(cls) if f.name != "train"}
        unknown = sorted(set(flat) - set(train_types) - set(own_types))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = asdict(TrainConfig())
        train, own = {}, {}
        for k, v in flat.items():
            if k in train_types:
                train[k] = _coerce(k, v, type(defaults[k]))
            else:
                own[k] = _coerce(k, v, type(getattr(cls, k)))
        try:
            return cls(train=TrainConfig(**train), **own)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _coerce(key: str, value, kind: type):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def parse_config(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    nested = [k for k, v in doc.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables: {', '.join(nested)}")
    return RunConfig.from_flat(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else ("nan" if v != v else ("inf" if v > 0 else "-inf"))
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.to_flat().items())


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)
