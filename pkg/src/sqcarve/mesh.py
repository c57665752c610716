"""Triangle meshes for export: superquadric tessellation, PSQ - NSQ booleans, OBJ I/O."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DualPrimitive, SuperquadricParams, rotation_matrix

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


class BooleanError(RuntimeError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    face_ids: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.face_ids is not None:
            self.face_ids = np.asarray(self.face_ids, dtype=np.int64).reshape(-1)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.faces.copy(), None if self.face_ids is None else self.face_ids.copy())

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)

    def cleanup(self) -> "TriMesh":
        """Drop degenerate faces and unreferenced vertices."""
        keep = self.face_areas() >= DEGENERATE_AREA
        faces = self.faces[keep]
        ids = None if self.face_ids is None else self.face_ids[keep]
        used, inverse = np.unique(faces.ravel(), return_inverse=True)
        return TriMesh(self.vertices[used], inverse.reshape(-1, 3), ids)

    def bounds(self) -> np.ndarray:
        return np.stack([self.vertices.min(0), self.vertices.max(0)])

    def transformed(self, scale: float = 1.0, offset=(0.0, 0.0, 0.0)) -> "TriMesh":
        return TriMesh((self.vertices - np.asarray(offset)) * scale, self.faces.copy(), self.face_ids)


@dataclass
class MeshMetrics:
    V: int
    E: int
    F: int
    euler: int
    volume: float
    watertight: bool


def _edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0, return_counts=True)


def signed_volume(m: TriMesh) -> float:
    if m.is_empty:
        return 0.0
    v = m.vertices[m.faces]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def mesh_metrics(m: TriMesh) -> MeshMetrics:
    """Counts, Euler characteristic, divergence-theorem volume and watertightness."""
    if m.is_empty:
        return MeshMetrics(len(m.vertices), 0, 0, len(m.vertices), 0.0, False)
    edges, counts = _edges(m.faces)
    V, E, F = len(m.vertices), len(edges), len(m.faces)
    return MeshMetrics(V, E, F, V - E + F, signed_volume(m), bool((counts == 2).all()))


# --------------------------------------------------------------------------- tessellation


def _signed_pow(c: np.ndarray, e: float) -> np.ndarray:
    # cos(pi/2) is ~6e-17, not 0; snap so tiny exponents do not inflate it
    c = np.where(np.abs(c) < 1e-12, 0.0, c)
    return np.sign(c) * np.abs(c) ** e


def _as_numpy_params(q: SuperquadricParams):
    return tuple(np.asarray(getattr(q, n).detach().double().numpy() if hasattr(getattr(q, n), "detach") else getattr(q, n), dtype=np.float64) for n in ("scale", "shape", "translation", "rotation"))


def tessellate_superquadric(q: SuperquadricParams, res_u: int = 32, res_v: int = 32) -> TriMesh:
    """Parametric surface mesh whose constant-latitude rings form the edge loops.

    ``res_u`` samples longitude on [-pi, pi), ``res_v`` splits latitude
    [-pi/2, pi/2] into bands; both poles collapse to single vertices.
    """
    if res_u < 3 or res_v < 3:
        raise ValueError("tessellation resolution must be >= 3")
    scale, shape, trans, rot = _as_numpy_params(q)
    e1, e2 = shape
    omega = -np.pi + 2.0 * np.pi * np.arange(res_u) / res_u
    eta = -np.pi / 2 + np.pi * np.arange(1, res_v) / res_v
    ce, se = _signed_pow(np.cos(eta), e1), _signed_pow(np.sin(eta), e1)
    cw, sw = _signed_pow(np.cos(omega), e2), _signed_pow(np.sin(omega), e2)
    ring = np.stack(
        [
            scale[0] * ce[:, None] * cw[None],
            scale[1] * ce[:, None] * sw[None],
            scale[2] * np.broadcast_to(se[:, None], (len(eta), res_u)),
        ],
        -1,
    ).reshape(-1, 3)
    south = np.array([[0.0, 0.0, -scale[2]]])
    north = np.array([[0.0, 0.0, scale[2]]])
    verts = np.concatenate([south, ring, north])
    n_rings = res_v - 1
    top = len(verts) - 1

    def vid(i, j):
        return 1 + i * res_u + (j % res_u)

    faces = []
    j = np.arange(res_u)
    faces.append(np.stack([np.zeros(res_u, int), vid(0, j + 1), vid(0, j)], -1))
    for i in range(n_rings - 1):
        a, b, c, d = vid(i, j), vid(i, j + 1), vid(i + 1, j + 1), vid(i + 1, j)
        faces.append(np.stack([a, b, c], -1))
        faces.append(np.stack([a, c, d], -1))
    faces.append(np.stack([vid(n_rings - 1, j), vid(n_rings - 1, j + 1), np.full(res_u, top)], -1))
    faces = np.concatenate(faces)
    mesh = TriMesh(verts, faces)
    if signed_volume(mesh) < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    r = rotation_matrix(rot).numpy()
    mesh.vertices = mesh.vertices @ r.T + trans
    return mesh


# --------------------------------------------------------------------------- booleans


def _to_manifold(m: TriMesh):
    import manifold3d

    mesh = manifold3d.Mesh64(
        vert_properties=np.ascontiguousarray(m.vertices, dtype=np.float64),
        tri_verts=np.ascontiguousarray(m.faces, dtype=np.uint64),
    )
    out = manifold3d.Manifold(mesh)
    if out.status() != manifold3d.Error.NoError:
        raise BooleanError(f"mesh rejected by boolean kernel: {out.status()}")
    return out


def _aabb_overlap(a: TriMesh, b: TriMesh, pad: float = 0.0) -> bool:
    ba, bb = a.bounds(), b.bounds()
    return bool(np.all(ba[0] - pad <= bb[1]) and np.all(bb[0] - pad <= ba[1]))


def boolean_difference(a: TriMesh, b: TriMesh, a_id: int = 0, b_id: int = 1) -> TriMesh:
    """Regularised difference ``a \\ b`` of two closed meshes.

    Faces of the result carry ``a_id`` or ``b_id`` depending on which input
    they came from.  Inputs must be watertight.
    """
    for name, m in (("first", a), ("second", b)):
        if m.is_empty or not mesh_metrics(m).watertight:
            raise ValueError(f"{name} operand of boolean_difference is not watertight")
    if not _aabb_overlap(a, b):
        out = a.copy()
        out.face_ids = np.full(len(a.faces), a_id)
        return out
    ma, mb = _to_manifold(a).as_original(), _to_manifold(b).as_original()
    res = ma - mb
    import manifold3d

    if res.status() != manifold3d.Error.NoError:
        raise BooleanError(f"boolean difference failed: {res.status()}")
    mesh = res.to_mesh64()
    verts = np.asarray(mesh.vert_properties)[:, :3]
    tris = np.asarray(mesh.tri_verts, dtype=np.int64)
    ids = np.full(len(tris), a_id)
    run_index = np.asarray(mesh.run_index, dtype=np.int64)
    run_orig = np.asarray(mesh.run_original_id, dtype=np.int64)
    b_orig = mb.original_id()
    for r, orig in enumerate(run_orig):
        if orig == b_orig:
            ids[run_index[r] // 3 : run_index[r + 1] // 3] = b_id
    return TriMesh(verts, tris, ids).cleanup()


# --------------------------------------------------------------------------- export


@dataclass
class ExportStats:
    num_primitives: int
    V: int
    F: int
    per_primitive: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"num_primitives": self.num_primitives, "V": self.V, "F": self.F, "per_primitive": self.per_primitive}


def primitive_mesh(prim: DualPrimitive, res: int = 32, index: int = 0) -> tuple[TriMesh, dict]:
    """Mesh of one dual-primitive: PSQ minus NSQ, or the PSQ alone when they cannot overlap."""
    psq = tessellate_superquadric(prim.psq, res, res)
    nsq = tessellate_superquadric(prim.nsq, res, res)
    rec = {"index": index}
    if not _aabb_overlap(psq, nsq):
        mesh = psq
        mesh.face_ids = np.full(len(mesh.faces), 2 * index)
        rec["boolean"] = "skipped"
    else:
        try:
            mesh = boolean_difference(psq, nsq, 2 * index, 2 * index + 1)
            rec["boolean"] = "difference"
        except (BooleanError, ValueError) as exc:
            log.warning("primitive %d: boolean failed (%s); exporting PSQ only", index, exc)
            mesh = psq
            mesh.face_ids = np.full(len(mesh.faces), 2 * index)
            rec["boolean"] = "failed"
            rec["warning"] = str(exc)
    m = mesh_metrics(mesh)
    rec.update({"V": m.V, "F": m.F, "euler": m.euler, "watertight": m.watertight, "volume": m.volume})
    return mesh, rec


def export_primitives(prims: DualPrimitive, T_export: float = 0.5, res: int = 32) -> tuple[list[tuple[str, TriMesh]], ExportStats]:
    groups = []
    per = []
    alpha = prims.transparency.detach().double().numpy().reshape(-1)
    for k in range(len(prims)):
        if alpha[k] < T_export:
            continue
        mesh, rec = primitive_mesh(prims.index(k), res, k)
        groups.append((f"primitive_{k}", mesh))
        per.append(rec)
    stats = ExportStats(len(groups), sum(len(m.vertices) for _, m in groups), sum(len(m.faces) for _, m in groups), per)
    return groups, stats


def write_obj(groups: list[tuple[str, TriMesh]], path) -> None:
    lines = []
    offset = 1
    for name, mesh in groups:
        lines.append(f"o {name}")
        lines.extend(f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices)
        lines.extend(f"f {a + offset} {b + offset} {c + offset}" for a, b, c in mesh.faces)
        offset += len(mesh.vertices)
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_obj(path) -> list[tuple[str, TriMesh]]:
    """Read ``o``-grouped triangle OBJ files (as written by :func:`write_obj`)."""
    verts: list[list[float]] = []
    groups: list[tuple[str, list]] = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] in ("o", "g"):
            groups.append((parts[1] if len(parts) > 1 else f"group_{len(groups)}", []))
        elif parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            if not groups:
                groups.append(("default", []))
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for j in range(1, len(idx) - 1):
                groups[-1][1].append((idx[0], idx[j], idx[j + 1]))
    allv = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    out = []
    for name, faces in groups:
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        used, inv = np.unique(f.ravel(), return_inverse=True)
        out.append((name, TriMesh(allv[used], inv.reshape(-1, 3))))
    return out


def merge_meshes(meshes: list[TriMesh]) -> TriMesh:
    verts, faces, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def load_mesh(path) -> TriMesh:
    return merge_meshes([m for _, m in read_obj(path)])


def export_scene(scene, T_export: float = 0.5, res: int = 32, path=None) -> ExportStats:
    """Write every primitive with alpha >= ``T_export`` as one OBJ group plus a stats file.

    ``scene`` is a :class:`DualPrimitive` batch or an object with ``primitives()``.
    """
    prims = scene.primitives() if hasattr(scene, "primitives") else scene
    groups, stats = export_primitives(prims, T_export, res)
    if path is not None:
        path = Path(path)
        write_obj(groups, path)
        path.with_name(path.stem + ".stats.json").write_text(json.dumps(stats.to_dict(), indent=1))
    return stats
