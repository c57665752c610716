"""Reconstruction metrics: Chamfer distance, normal consistency and silhouette IoU."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh, load_mesh

DEFAULT_SAMPLES = 100_000


def sample_surface(mesh: TriMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed over the surface area."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[face]]
    return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]


def nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each ``src`` point to its nearest ``dst`` point."""
    d, _ = cKDTree(dst).query(src, k=1)
    return d


def normalize_to_unit_cube(mesh: TriMesh, reference: TriMesh) -> TriMesh:
    """Translate/scale so that ``reference``'s bounding box fits the unit cube at the origin corner."""
    lo, hi = reference.bounds()
    extent = float((hi - lo).max())
    if not extent > 0:
        raise ValueError("reference mesh has a degenerate bounding box")
    return mesh.transformed(1.0 / extent, lo)


def chamfer(a: TriMesh, b: TriMesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> float:
    """Symmetric mean nearest-neighbour distance between surface samples, times 1e3.

    Both meshes are sampled with a generator seeded by ``seed``, so identical
    meshes give identical samples and a distance of exactly 0.
    """
    if a.is_empty or b.is_empty:
        raise ValueError("chamfer distance needs two non-empty meshes")
    pa = sample_surface(a, n_samples, np.random.default_rng(seed))
    pb = sample_surface(b, n_samples, np.random.default_rng(seed))
    return float(0.5 * (nearest_distances(pa, pb).mean() + nearest_distances(pb, pa).mean()) * 1e3)


class NcResult(NamedTuple):
    value: float
    empty_mask: bool


def nc_loss(pred_normals, ref_normals, masks) -> NcResult:
    """Mean masked L1 distance between normal maps, times 1e3."""
    pred = np.asarray(pred_normals, dtype=np.float64)
    ref = np.asarray(ref_normals, dtype=np.float64)
    m = np.asarray(masks) >= 0.5
    if pred.shape != ref.shape or pred.shape[:-1] != m.shape:
        raise ValueError("normal maps and masks must share the same resolution")
    if not m.any():
        return NcResult(0.0, True)
    return NcResult(float(np.abs(pred - ref).sum(-1)[m].mean() * 1e3), False)


def silhouette_iou(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask) >= 0.5
    b = np.asarray(gt_mask) >= 0.5
    if a.shape != b.shape:
        raise ValueError("masks must share the same resolution")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class EvalReport:
    chamfer_x1e3: float
    num_vertices: int
    num_faces: int
    nc_loss_x1e3: float | None = None
    silhouette_iou: list[float] = field(default_factory=list)
    runtime_s: float = 0.0

    def __post_init__(self):
        vals = [self.chamfer_x1e3, self.runtime_s] + list(self.silhouette_iou)
        if self.nc_loss_x1e3 is not None:
            vals.append(self.nc_loss_x1e3)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("evaluation produced a non-finite value")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def summary(self) -> str:
        parts = [f"CD(x1e3)={self.chamfer_x1e3:.3f}", f"#V={self.num_vertices}", f"#F={self.num_faces}"]
        if self.nc_loss_x1e3 is not None:
            parts.append(f"NC(x1e3)={self.nc_loss_x1e3:.1f}")
        if self.silhouette_iou:
            parts.append(f"IoU={np.mean(self.silhouette_iou):.4f}")
        parts.append(f"time={self.runtime_s:.1f}s")
        return " ".join(parts)


def evaluate_meshes(pred: TriMesh, gt: TriMesh, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> EvalReport:
    """Chamfer and compactness of ``pred`` after normalising both meshes by the GT box."""
    t0 = time.perf_counter()
    cd = chamfer(normalize_to_unit_cube(pred, gt), normalize_to_unit_cube(gt, gt), n_samples, seed)
    return EvalReport(cd, len(pred.vertices), len(pred.faces), runtime_s=time.perf_counter() - t0)


def evaluate_files(mesh_path, gt_path, n_samples: int = DEFAULT_SAMPLES, seed: int = 0) -> EvalReport:
    return evaluate_meshes(load_mesh(mesh_path), load_mesh(gt_path), n_samples, seed)


def evaluate_views(scene, dataset, n_samples: int = 128) -> tuple[list[float], NcResult]:
    """Per-view silhouette IoU and the normal-consistency loss of a fitted scene."""
    from .render import normals_to_camera, render_image

    ious, preds, refs, masks = [], [], [], []
    for v in dataset.views:
        buf = render_image(scene, v.camera, n_samples=n_samples)
        ious.append(silhouette_iou(buf.mask, v.mask))
        if v.normal is not None:
            n = normals_to_camera(buf.normal, v.camera)
            preds.append(n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12))
            refs.append(v.normal)
            masks.append(v.mask)
    nc = nc_loss(np.stack(preds), np.stack(refs), np.stack(masks)) if preds else NcResult(0.0, True)
    return ious, nc
