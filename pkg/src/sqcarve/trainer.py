"""Optimisation loop: initialisation, gradient steps, pruning and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .geometry import DualPrimitive
from .losses import (
    LossWeights,
    RayBatchTargets,
    loss_entropy_pairs,
    loss_mask,
    loss_max,
    loss_normal_reg,
    loss_rgb,
    loss_sparse,
    total_loss,
)
from .params import (
    FIELD_SLICES,
    PRIM_FIELDS,
    PRIM_WIDTH,
    NonFiniteError,
    ParamLayout,
    ParamVector,
    primitives_from_raw,
    raw_from_constrained,
    squash,
)
from .render import LIGHTING_DIMS, RaySamples, render_rays, sample_rays, xavier_weights

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CSV_COLUMNS = ["iteration", "total", "rgb", "mask", "sp", "e", "max", "norm_reg", "K_active"]
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    k_init: int = 100
    iterations: int = 20000
    batch_rays: int = 1024
    lr_primitives: float = 5e-3
    lr_lighting: float = 1e-3
    prune_interval: int = 500
    prune_warmup: int = 1000
    alpha_prune: float = 0.02
    scale_prune: float = 0.01
    view_prune: float = 1e-3
    view_stats_stride: int = 4
    lambda_mask: float = 0.5
    lambda_sparse: float = 0.01
    lambda_e: float = 0.01
    lambda_max: float = 0.1
    lambda_norm_reg: float = 0.05
    normal_fallback: bool = False
    mu: float = 0.05
    n_samples: int = 64
    grad_clip: float = 10.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    log_interval: int = 50
    checkpoint_interval: int = 1000
    seed: int = 0
    dtype: str = "float32"
    cull: bool = True

    def __post_init__(self):
        for name in ("alpha_prune", "scale_prune", "view_prune", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("prune_interval", "log_interval", "checkpoint_interval", "view_stats_stride", "batch_rays"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.k_init < 1 or self.iterations < 0 or self.n_samples < 2:
            raise ValueError("k_init >= 1, iterations >= 0 and n_samples >= 2 required")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.loss_weights()

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_mask, self.lambda_sparse, self.lambda_e, self.lambda_max, self.lambda_norm_reg)

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SceneModel:
    raw: np.ndarray  # (K, PRIM_WIDTH) unconstrained
    lighting: list[np.ndarray]
    seed: int = 0
    iteration: int = 0
    config: dict = field(default_factory=dict)
    k_norm: int = 1  # primitive count used by the 1/K regulariser normalisation
    opt_m: np.ndarray | None = None
    opt_v: np.ndarray | None = None
    opt_step: int = 0

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).reshape(-1, PRIM_WIDTH)
        self.lighting = [np.asarray(w, dtype=np.float64) for w in self.lighting]

    @property
    def num_primitives(self) -> int:
        return self.raw.shape[0]

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(self.num_primitives, [w.shape for w in self.lighting])

    def param_vector(self) -> ParamVector:
        flat = np.concatenate([self.raw.ravel()] + [w.ravel() for w in self.lighting])
        return ParamVector(flat, self.layout)

    def set_params(self, flat: np.ndarray) -> None:
        pv = ParamVector(flat, self.layout)
        prim, weights = pv.split(pv.values)
        self.raw = prim.copy()
        self.lighting = [w.copy() for w in weights]

    def primitives(self, dtype=torch.float64) -> DualPrimitive:
        return primitives_from_raw(torch.as_tensor(self.raw, dtype=dtype))

    def constrained(self) -> dict[str, np.ndarray]:
        return {
            name: (self.raw[:, sl] if rng is None else squash(self.raw[:, sl], *rng))
            for (name, _, rng), sl in zip(PRIM_FIELDS, FIELD_SLICES.values())
        }

    def render_inputs(self, dtype=torch.float64):
        lighting = [torch.as_tensor(w, dtype=dtype) for w in self.lighting]
        return self.primitives(dtype), lighting, float(self.config.get("mu", 0.05))

    def copy(self) -> "SceneModel":
        return SceneModel(
            self.raw.copy(),
            [w.copy() for w in self.lighting],
            self.seed,
            self.iteration,
            dict(self.config),
            self.k_norm,
            None if self.opt_m is None else self.opt_m.copy(),
            None if self.opt_v is None else self.opt_v.copy(),
            self.opt_step,
        )


# --------------------------------------------------------------------------- init


def init_scene(cfg: TrainConfig) -> SceneModel:
    rng = np.random.default_rng(cfg.seed)
    k = cfg.k_init
    centers = rng.uniform(-1.0, 1.0, (k, 3))
    scales = rng.uniform(0.05, 0.3, (k, 3))
    rotations = rng.uniform(-np.pi, np.pi, (k, 3))
    colors = rng.uniform(0.2, 0.8, (k, 3))
    rows = []
    for i in range(k):
        rows.append(
            raw_from_constrained(
                {
                    "psq_scale": scales[i],
                    "psq_shape": (1.0, 1.0),
                    "psq_translation": centers[i],
                    "psq_rotation": rotations[i],
                    "nsq_scale": 0.5 * scales[i],
                    "nsq_shape": (1.0, 1.0),
                    "nsq_translation": centers[i],
                    "nsq_rotation": rotations[i],
                    "alpha": 0.5,
                    "theta": 0.1,
                    "color": colors[i],
                }
            )
        )
    lighting = xavier_weights(rng, LIGHTING_DIMS)
    return SceneModel(np.stack(rows), lighting, cfg.seed, 0, asdict(cfg), k_norm=k)


# --------------------------------------------------------------------------- batches


@dataclass
class RayBatch:
    origins: np.ndarray
    directions: np.ndarray
    jitter: np.ndarray | None
    targets: RayBatchTargets
    # fallback normals: indices into the batch of (anchor, right, down) triplets
    triplets: np.ndarray | None = None


class RayBank:
    """Every pixel of every training view, flattened for uniform sampling."""

    def __init__(self, dataset):
        views = list(dataset.views)
        if not views:
            raise ValueError("dataset has no views")
        o, d, rgb, mask, normal = [], [], [], [], []
        self.has_normals = all(v.normal is not None for v in views)
        self.height = views[0].camera.height
        self.width = views[0].camera.width
        for v in views:
            cam = v.camera
            oo, dd = cam.rays(cam.pixel_grid())
            o.append(oo)
            d.append(dd)
            rgb.append(v.rgb.reshape(-1, 3))
            mask.append(v.mask.reshape(-1).astype(np.float64))
            if self.has_normals:
                # camera-space normals from files, supervised in world space
                normal.append(v.normal.reshape(-1, 3) @ cam.rotation)
        self.origins = np.concatenate(o)
        self.directions = np.concatenate(d)
        self.rgb = np.concatenate(rgb)
        self.mask = np.concatenate(mask)
        self.normal = np.concatenate(normal) if self.has_normals else None
        self.num_views = len(views)

    def __len__(self) -> int:
        return len(self.origins)

    def sample(self, rng: np.random.Generator, n: int, n_samples: int, triplets: bool, dtype) -> RayBatch:
        if triplets:
            m = max(n // 3, 1)
            view = rng.integers(0, self.num_views, m)
            y = rng.integers(0, self.height - 1, m)
            x = rng.integers(0, self.width - 1, m)
            base = (view * self.height + y) * self.width + x
            idx = np.concatenate([base, base + 1, base + self.width])
            trip = np.stack([np.arange(m), np.arange(m) + m, np.arange(m) + 2 * m], -1)
        else:
            idx = rng.integers(0, len(self), n)
            trip = None
        jitter = rng.random((len(idx), n_samples))
        normal = None
        if self.normal is not None:
            normal = torch.as_tensor(self.normal[idx], dtype=dtype)
        targets = RayBatchTargets(
            torch.as_tensor(self.rgb[idx], dtype=dtype), torch.as_tensor(self.mask[idx], dtype=dtype), normal
        )
        return RayBatch(self.origins[idx], self.directions[idx], jitter, targets, trip)


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


# --------------------------------------------------------------------------- objective


def depth_normals(rays: RaySamples, depth: torch.Tensor, triplets: np.ndarray) -> torch.Tensor:
    """Reference normals from rendered depth at (anchor, right, down) pixel triplets."""
    pts = rays.origins + depth[:, None] * rays.directions
    a, r, d = (pts[triplets[:, i]] for i in range(3))
    n = torch.cross(r - a, d - a, dim=-1)
    n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    facing = (n * rays.directions[triplets[:, 0]]).sum(-1, keepdim=True)
    return torch.where(facing > 0, -n, n).detach()


def batch_objective(
    layout: ParamLayout,
    rays: RaySamples,
    targets: RayBatchTargets,
    cfg: TrainConfig,
    k_norm: int,
    triplets: np.ndarray | None = None,
    cull: bool | None = None,
) -> Callable[[torch.Tensor], tuple[torch.Tensor, dict]]:
    """Total training loss as a function of the flat raw parameter tensor."""
    weights = cfg.loss_weights()
    cull = cfg.cull if cull is None else cull
    want_normals = weights.norm_reg > 0 and (targets.normal is not None or (cfg.normal_fallback and triplets is not None))

    def objective(flat: torch.Tensor):
        pv = ParamVector(np.zeros(layout.size), layout)
        prim_raw, light = pv.split(flat)
        prims = primitives_from_raw(prim_raw)
        out = render_rays(prims, light, rays, cfg.mu, with_normals=want_normals, cull=cull)
        sel = slice(None) if triplets is None else torch.as_tensor(triplets[:, 0])
        m_gt = targets.mask[sel]
        terms = {
            "rgb": loss_rgb(out.rgb[sel], targets.rgb[sel], m_gt),
            "mask": loss_mask(out.mask[sel], m_gt),
        }
        hit = rays.hit
        pa = out.point_alpha[hit]
        terms["sp"] = loss_sparse(pa, k_norm)
        terms["e"] = loss_entropy_pairs(out.pair_values, int(hit.sum()) * rays.t.shape[1], k_norm)
        terms["max"] = loss_max(pa, k_norm)
        if want_normals:
            if targets.normal is not None:
                ref = targets.normal[sel]
            else:
                ref = depth_normals(rays, out.depth, triplets)
            terms["norm_reg"] = loss_normal_reg(out.normal[sel], ref, m_gt)
        total, breakdown = total_loss(terms, weights)
        if weights.norm_reg > 0 and not want_normals:
            breakdown["norm_reg_missing"] = 1.0
        return total, breakdown

    return objective


# --------------------------------------------------------------------------- optimisation


def _lr_vector(layout: ParamLayout, cfg: TrainConfig) -> np.ndarray:
    lr = np.full(layout.size, cfg.lr_lighting)
    lr[: layout.primitive_size] = cfg.lr_primitives
    return lr


def adam_update(scene: SceneModel, g: np.ndarray, cfg: TrainConfig, eps=1e-8) -> None:
    pv = scene.param_vector()
    if scene.opt_m is None:
        scene.opt_m = np.zeros_like(pv.values)
        scene.opt_v = np.zeros_like(pv.values)
    scene.opt_step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    scene.opt_m = b1 * scene.opt_m + (1 - b1) * g
    scene.opt_v = b2 * scene.opt_v + (1 - b2) * g * g
    m_hat = scene.opt_m / (1 - b1**scene.opt_step)
    v_hat = scene.opt_v / (1 - b2**scene.opt_step)
    scene.set_params(pv.values - _lr_vector(pv.layout, cfg) * m_hat / (np.sqrt(v_hat) + eps))


def train_step(scene: SceneModel, batch: RayBatch, cfg: TrainConfig) -> tuple[SceneModel, dict]:
    """One Adam step on the raw parameters.  Returns a new scene and the loss breakdown."""
    scene = scene.copy()
    dtype = cfg.torch_dtype
    rays = sample_rays(batch.origins, batch.directions, cfg.n_samples, batch.jitter, dtype)
    pv = scene.param_vector()
    objective = batch_objective(pv.layout, rays, batch.targets, cfg, scene.k_norm, batch.triplets)
    flat = torch.tensor(pv.values, dtype=dtype, requires_grad=True)
    try:
        loss, breakdown = objective(flat)
        (g,) = torch.autograd.grad(loss, flat)
        g = g.double().numpy()
        if not np.isfinite(g).all():
            bad = int(np.flatnonzero(~np.isfinite(g))[0])
            raise NonFiniteError(f"non-finite gradient at {pv.layout.describe(bad)}")
    except NonFiniteError as exc:
        log.warning("iteration %d: step skipped: %s", scene.iteration, exc)
        scene.iteration += 1
        return scene, {"skipped": 1.0}
    norm = float(np.linalg.norm(g))
    if norm > cfg.grad_clip:
        g = g * (cfg.grad_clip / norm)
    adam_update(scene, g, cfg)
    scene.iteration += 1
    return scene, breakdown


def view_statistics(scene: SceneModel, dataset, cfg: TrainConfig) -> np.ndarray:
    """Per-primitive maximum blend weight over (strided) pixels of all training views."""
    prims, lighting, mu = scene.render_inputs(cfg.torch_dtype)
    stats = np.zeros(scene.num_primitives)
    with torch.no_grad():
        for v in dataset.views:
            cam = v.camera
            o, d = cam.rays(cam.pixel_grid(cfg.view_stats_stride))
            for s in range(0, len(o), 8192):
                rays = sample_rays(o[s : s + 8192], d[s : s + 8192], cfg.n_samples, None, cfg.torch_dtype)
                out = render_rays(prims, None, rays, mu, with_normals=False, cull=cfg.cull)
                stats = np.maximum(stats, out.blend_max.double().numpy())
    return stats


def prune_mask(scene: SceneModel, view_stats: np.ndarray | None, cfg: TrainConfig) -> np.ndarray:
    c = scene.constrained()
    alpha = c["alpha"][:, 0]
    keep = alpha >= cfg.alpha_prune
    keep &= (c["psq_scale"] >= cfg.scale_prune).all(-1)
    if view_stats is not None:
        keep &= np.asarray(view_stats) >= cfg.view_prune
    if not keep.any():
        keep[int(np.argmax(alpha))] = True
    return keep


def prune(scene: SceneModel, view_stats: np.ndarray | None, cfg: TrainConfig) -> SceneModel:
    """Drop transparent, tiny and never-seen primitives (never the last one)."""
    keep = prune_mask(scene, view_stats, cfg)
    out = scene.copy()
    if keep.all():
        return out
    old = scene.layout
    out.raw = scene.raw[keep]
    if scene.opt_m is not None:
        rows = np.zeros(old.size, dtype=bool)
        rows[: old.primitive_size] = np.repeat(keep, PRIM_WIDTH)
        rows[old.primitive_size :] = True
        out.opt_m = scene.opt_m[rows]
        out.opt_v = scene.opt_v[rows]
    log.info("iteration %d: pruned %d -> %d primitives", scene.iteration, len(keep), int(keep.sum()))
    return out


# --------------------------------------------------------------------------- checkpoints


def _wrap_degrees(rad: np.ndarray) -> list[float]:
    deg = np.degrees(rad)
    return [float(x) for x in (deg + 180.0) % 360.0 - 180.0]


def primitive_records(values: dict[str, np.ndarray], raw: np.ndarray | None = None) -> list[dict]:
    """Serialisable per-primitive records from constrained values (K rows)."""
    out = []
    k = len(values["alpha"])
    for i in range(k):
        rec = {}
        for q in ("psq", "nsq"):
            rec[q] = {
                "scale": [float(x) for x in values[f"{q}_scale"][i]],
                "shape": [float(x) for x in values[f"{q}_shape"][i]],
                "translation": [float(x) for x in values[f"{q}_translation"][i]],
                "rotation_deg": _wrap_degrees(values[f"{q}_rotation"][i]),
            }
        rec["alpha"] = float(np.ravel(values["alpha"][i])[0])
        rec["theta"] = float(np.ravel(values["theta"][i])[0])
        rec["color"] = [float(x) for x in values["color"][i]]
        if raw is not None:
            rec["raw"] = {name: [float(x) for x in raw[i, sl]] for name, sl in FIELD_SLICES.items()}
        out.append(rec)
    return out


def values_from_records(records: list[dict]) -> dict[str, np.ndarray]:
    vals: dict[str, list] = {name: [] for name, _, _ in PRIM_FIELDS}
    for rec in records:
        for q in ("psq", "nsq"):
            vals[f"{q}_scale"].append(rec[q]["scale"])
            vals[f"{q}_shape"].append(rec[q]["shape"])
            vals[f"{q}_translation"].append(rec[q]["translation"])
            vals[f"{q}_rotation"].append(np.radians(rec[q]["rotation_deg"]))
        vals["alpha"].append([rec["alpha"]])
        vals["theta"].append([rec["theta"]])
        vals["color"].append(rec["color"])
    return {k: np.asarray(v, dtype=np.float64).reshape(len(records), -1) for k, v in vals.items()}


def scene_to_dict(scene: SceneModel) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "iteration": scene.iteration,
        "seed": scene.seed,
        "config": scene.config,
        "k_norm": scene.k_norm,
        "primitives": primitive_records(scene.constrained(), scene.raw),
        "lighting": {
            "layer_dims": [int(scene.lighting[0].shape[0])] + [int(w.shape[1]) for w in scene.lighting[0::2]]
            if scene.lighting
            else [],
            "weights": [[float(x) for x in w.ravel()] for w in scene.lighting],
        },
    }
    if scene.opt_m is not None:
        doc["optimizer"] = {
            "step": scene.opt_step,
            "m": [float(x) for x in scene.opt_m],
            "v": [float(x) for x in scene.opt_v],
        }
    return doc


def scene_from_dict(doc: dict) -> SceneModel:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    recs = doc["primitives"]
    if recs and all("raw" in r for r in recs):
        raw = np.asarray(
            [np.concatenate([r["raw"][name] for name, _, _ in PRIM_FIELDS]) for r in recs], dtype=np.float64
        )
    elif recs:
        vals = values_from_records(recs)
        raw = np.stack([raw_from_constrained({k: v[i] for k, v in vals.items()}) for i in range(len(recs))])
    else:
        raw = np.zeros((0, PRIM_WIDTH))
    dims = doc["lighting"]["layer_dims"]
    lighting = []
    for i, flat in enumerate(doc["lighting"]["weights"]):
        layer = i // 2
        shape = (dims[layer], dims[layer + 1]) if i % 2 == 0 else (dims[layer + 1],)
        lighting.append(np.asarray(flat, dtype=np.float64).reshape(shape))
    scene = SceneModel(
        raw,
        lighting,
        int(doc.get("seed", 0)),
        int(doc.get("iteration", 0)),
        dict(doc.get("config", {})),
        int(doc.get("k_norm", max(len(recs), 1))),
    )
    opt = doc.get("optimizer")
    if opt is not None:
        scene.opt_step = int(opt["step"])
        scene.opt_m = np.asarray(opt["m"], dtype=np.float64)
        scene.opt_v = np.asarray(opt["v"], dtype=np.float64)
    return scene


def save_checkpoint(scene: SceneModel, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(scene_to_dict(scene), indent=1))
    tmp.replace(path)


def load_checkpoint(path) -> SceneModel:
    return scene_from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- fit


@dataclass
class FitResult:
    scene: SceneModel
    log: list[dict]
    skipped_steps: int = 0


def _log_row(iteration: int, breakdown: dict, k: int) -> dict:
    row = {"iteration": iteration}
    for c in CSV_COLUMNS[1:-1]:
        row[c] = float(breakdown.get(c, 0.0))
    row["K_active"] = k
    return row


def write_loss_csv(rows: list[dict], path, append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("w" if new else "a", newline="") as fh:
        w = csv.DictWriter(fh, CSV_COLUMNS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def fit(
    dataset,
    cfg: TrainConfig,
    out_dir=None,
    resume: SceneModel | None = None,
    callback: Callable[[SceneModel, dict], None] | None = None,
) -> FitResult:
    """Run initialisation, optimisation and periodic pruning up to ``cfg.iterations``."""
    bank = RayBank(dataset)
    scene = init_scene(cfg) if resume is None else resume.copy()
    scene.config = asdict(cfg)
    triplets = cfg.normal_fallback and not bank.has_normals and cfg.lambda_norm_reg > 0
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    skipped = 0
    csv_path = None if out_dir is None else out_dir / "loss.csv"
    pending: list[dict] = []
    if csv_path is not None and resume is None:
        write_loss_csv([], csv_path)

    def flush():
        if csv_path is not None and pending:
            write_loss_csv(pending, csv_path, append=True)
            pending.clear()

    while scene.iteration < cfg.iterations:
        it = scene.iteration
        batch = bank.sample(step_rng(cfg.seed, it), cfg.batch_rays, cfg.n_samples, triplets, cfg.torch_dtype)
        scene, breakdown = train_step(scene, batch, cfg)
        if "skipped" in breakdown:
            skipped += 1
        done = scene.iteration
        if done >= cfg.prune_warmup and done % cfg.prune_interval == 0:
            stats = view_statistics(scene, dataset, cfg)
            scene = prune(scene, stats, cfg)
        if it % cfg.log_interval == 0 or done == cfg.iterations:
            row = _log_row(it, breakdown, scene.num_primitives)
            rows.append(row)
            pending.append(row)
            log.info("it %d loss %.5f K=%d", it, row["total"], scene.num_primitives)
        if callback is not None:
            callback(scene, breakdown)
        if out_dir is not None and done % cfg.checkpoint_interval == 0:
            flush()
            try:
                save_checkpoint(scene, out_dir / "checkpoint.json")
            except OSError as exc:
                raise RuntimeError(f"checkpoint write failed at iteration {done}: {exc}") from exc
    flush()
    if out_dir is not None:
        save_checkpoint(scene, out_dir / "checkpoint.json")
    return FitResult(scene, rows, skipped)

