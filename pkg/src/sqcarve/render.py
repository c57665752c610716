"""Differentiable volume renderer for dual-primitive scenes.

Rays are sampled inside the scene box, every (sample, primitive) section is
turned into an opacity from the merged inside-outside field, and the
per-sample opacities are alpha-composited front to back into RGB, mask,
normal and depth buffers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .geometry import (
    DEFAULT_MU,
    DualPrimitive,
    as_tensor,
    clamp_sharpness,
    merged_isf,
    rotation_matrix,
)
from .params import NonFiniteError

log = logging.getLogger(__name__)

SCENE_BOUND = 1.1
OPACITY_CAP = 1.0 - 1e-6
# Sections where the PSQ value exceeds CULL_SHARPNESS * theta carry
# opacity below ~exp(-CULL_SHARPNESS) and are skipped when culling.
CULL_SHARPNESS = 10.0
LIGHTING_DIMS = (3, 64, 64, 64, 3)
# Blend weights exist wherever the point density is positive.  A cut-off
# such as 1e-12 would switch colours on while d(sigma)/d(param) is still
# O(1) next to the density clamp, a gradient jump of order one.
BLEND_EPS = 0.0


def occupancy_floor(dtype: torch.dtype, eps: float = BLEND_EPS) -> float:
    # d(c / alpha)/d(alpha) = -c / alpha^2 overflows for subnormal alpha, so
    # points below tiny^(1/4) (1e-10 in float32, 1e-77 in float64) count as empty
    return max(eps, torch.finfo(dtype).tiny ** 0.25)


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera transform (OpenCV axes: +z forward, +y down)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def look_at(cls, eye, target=(0, 0, 0), up=(0, 0, 1), fov_deg=40.0, width=256, height=256) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        if abs(forward @ up) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, rot, -rot @ eye)

    def pixel_grid(self, stride: int = 1) -> np.ndarray:
        """Integer (x, y) pixel coordinates in row-major order."""
        ys, xs = np.mgrid[0 : self.height : stride, 0 : self.width : stride]
        return np.stack([xs.ravel(), ys.ravel()], -1)

    def rays(self, pixels) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins and unit directions through pixel centres."""
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        d_cam = np.stack(
            [
                (pixels[:, 0] + 0.5 - self.cx) / self.fx,
                (pixels[:, 1] + 0.5 - self.cy) / self.fy,
                np.ones(len(pixels)),
            ],
            -1,
        )
        d = d_cam @ self.rotation
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d


@dataclass
class RaySamples:
    """A batch of rays with ``N`` samples each.  Rays with ``hit == False`` render empty."""

    origins: torch.Tensor
    directions: torch.Tensor
    t: torch.Tensor
    deltas: torch.Tensor
    hit: torch.Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]

    def points(self) -> torch.Tensor:
        return self.origins[:, None] + self.t[..., None] * self.directions[:, None]

    def index(self, idx) -> "RaySamples":
        return RaySamples(self.origins[idx], self.directions[idx], self.t[idx], self.deltas[idx], self.hit[idx])


def box_interval(origins: np.ndarray, directions: np.ndarray, bound: float = SCENE_BOUND):
    """Slab-method entry/exit distances against the box ``[-bound, bound]^3``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
    lo = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf)
    hi = np.nan_to_num(np.maximum(t0, t1), nan=np.inf)
    near = np.maximum(lo.max(-1), 0.0)
    far = hi.min(-1)
    return near, far, far > near


def sample_rays(
    origins,
    directions,
    n_samples: int,
    jitter: np.ndarray | None = None,
    dtype=torch.float64,
    bound: float = SCENE_BOUND,
) -> RaySamples:
    """Stratified samples along each ray inside the scene box.

    ``jitter`` holds per-bin offsets in [0, 1); ``None`` places every sample at
    its bin midpoint.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    near, far, hit = box_interval(origins, directions, bound)
    near = np.where(hit, near, 0.0)
    far = np.where(hit, far, 1.0)
    offs = np.full((len(origins), n_samples), 0.5) if jitter is None else np.asarray(jitter)
    bins = (np.arange(n_samples)[None] + offs) / n_samples
    t = near[:, None] + bins * (far - near)[:, None]
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=-1)
    deltas[:, -1] = deltas[:, -2]
    deltas = np.maximum(deltas, 1e-9)
    return RaySamples(
        torch.as_tensor(origins, dtype=dtype),
        torch.as_tensor(directions, dtype=dtype),
        torch.as_tensor(t, dtype=dtype),
        torch.as_tensor(deltas, dtype=dtype),
        torch.as_tensor(hit),
    )


def make_rays(cam: Camera, pixels, n_samples: int = 128, rng: np.random.Generator | None = None, dtype=torch.float64):
    """Rays through the given (x, y) pixels; jittered when an ``rng`` is supplied."""
    pixels = np.asarray(pixels).reshape(-1, 2)
    if len(pixels) and (
        pixels.min() < 0 or pixels[:, 0].max() >= cam.width or pixels[:, 1].max() >= cam.height
    ):
        raise ValueError("pixel outside image bounds")
    o, d = cam.rays(pixels)
    jitter = None if rng is None else rng.random((len(pixels), n_samples))
    return sample_rays(o, d, n_samples, jitter, dtype)


# --------------------------------------------------------------------------- lighting


def xavier_weights(rng: np.random.Generator, dims=LIGHTING_DIMS) -> list[np.ndarray]:
    """Xavier-uniform weights ``[W0, b0, W1, b1, ...]`` with ``W`` shaped (in, out)."""
    out = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        out.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        out.append(np.zeros(fan_out))
    return out


def lighting_forward(weights, p: torch.Tensor) -> torch.Tensor:
    """Residual colour in [-0.5, 0.5]^3 predicted from position alone."""
    h = p
    n_layers = len(weights) // 2
    for i in range(n_layers):
        h = h @ weights[2 * i] + weights[2 * i + 1]
        if i < n_layers - 1:
            h = torch.tanh(h)
    return 0.5 * torch.tanh(h)


@dataclass
class LightingNet:
    weights: list[np.ndarray]

    @classmethod
    def xavier(cls, rng: np.random.Generator) -> "LightingNet":
        return cls(xavier_weights(rng))

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights[0::2]]

    def __call__(self, p) -> torch.Tensor:
        p = as_tensor(p)
        return lighting_forward([torch.as_tensor(w, dtype=p.dtype) for w in self.weights], p)


# --------------------------------------------------------------------------- density


def primitive_density(f_before, f_after, theta) -> torch.Tensor:
    """Section opacity from the merged field at the two ends of a ray section.

    Uses ``max((Phi(f_before/theta) - Phi(f_after/theta)) / Phi(f_before/theta), 0)``
    where ``f_before`` is the field at the section end nearer the camera.  A
    ray entering the solid (field decreasing) gets positive opacity, a ray
    leaving it gets zero.  Evaluated as ``-expm1(logsig(b) - logsig(a))`` so
    deep-interior sections do not divide 0 by 0.
    """
    f_before, f_after = as_tensor(f_before), as_tensor(f_after)
    theta = clamp_sharpness(theta)
    d = F.logsigmoid(f_after / theta) - F.logsigmoid(f_before / theta)
    return -torch.expm1(d.clamp_max(0.0))


def point_density(contributions: torch.Tensor, eps: float = BLEND_EPS):
    """Aggregate per-primitive contributions ``alpha_k * sigma_k`` (last dim = K).

    Returns the summed opacity and blend weights that sum to one wherever the
    sum exceeds ``eps``.
    """
    sigma = contributions.sum(-1)
    eps = occupancy_floor(sigma.dtype, eps)
    safe = torch.where(sigma > eps, sigma, torch.ones_like(sigma))
    weights = torch.where((sigma > eps)[..., None], contributions / safe[..., None], torch.zeros_like(contributions))
    return sigma, weights


def point_color(colors: torch.Tensor, weights: torch.Tensor, p: torch.Tensor, lighting=None) -> torch.Tensor:
    """Blend basic colours by ``weights`` and add the lighting residual.

    Points with all-zero weights (empty space) get black.
    """
    base = weights @ colors
    if lighting is None:
        return base
    occupied = weights.sum(-1) > 0
    residual = lighting(p) if callable(lighting) else lighting_forward(lighting, p)
    return torch.where(occupied[..., None], base + residual, base)


def opacity_to_density(opacity: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """Density whose section opacity ``1 - exp(-sigma * delta)`` equals ``min(opacity, cap)``."""
    return -torch.log1p(-opacity.clamp(0.0, OPACITY_CAP)) / deltas


def composite(t, deltas, sigmas, colors=None, normals=None):
    """Front-to-back alpha compositing along the last sample axis.

    Returns ``(rgb, mask, normal, depth, weights)``; ``rgb``/``normal`` are None
    when the corresponding per-sample inputs are.
    """
    t, deltas, sigmas = as_tensor(t), as_tensor(deltas), as_tensor(sigmas)
    tau = sigmas * deltas
    alpha = -torch.expm1(-tau)
    # transmittance before each sample: exp(-sum_{j<i} tau_j)
    acc = torch.cumsum(tau, -1)
    trans = torch.exp(-(acc - tau))
    weights = trans * alpha
    # the telescoping sum is 1 - exp(-sum tau) <= 1 up to rounding
    mask = weights.sum(-1).clamp_max(1.0)
    rgb = None if colors is None else (weights[..., None] * colors).sum(-2)
    normal = None if normals is None else (weights[..., None] * normals).sum(-2)
    depth = (weights * t).sum(-1) / mask.clamp_min(1e-6)
    return rgb, mask, normal, depth, weights


# --------------------------------------------------------------------------- ray rendering


@dataclass
class RayOutput:
    rgb: torch.Tensor
    mask: torch.Tensor
    normal: torch.Tensor | None
    depth: torch.Tensor
    point_alpha: torch.Tensor  # (R, N) aggregated opacity sum_k alpha_k sigma_k
    pairs: tuple[torch.Tensor, torch.Tensor, torch.Tensor]  # (ray, sample, primitive) of evaluated sections
    pair_values: torch.Tensor  # alpha_k * sigma_k at each pair
    weights: torch.Tensor  # (R, N) compositing weights
    blend_max: torch.Tensor  # (K,) max_{ray,sample} weight * blend share
    num_primitives: int = 0

    @property
    def contributions(self) -> torch.Tensor:
        """Dense (R, N, K) per-primitive contributions; zero outside evaluated sections."""
        R, N = self.point_alpha.shape
        dense = torch.zeros(R, N, self.num_primitives, dtype=self.point_alpha.dtype)
        return dense.index_put(self.pairs, self.pair_values)


def _active_pairs(prims: DualPrimitive, rays: RaySamples, rots_psq: torch.Tensor, cull: bool):
    """Indices (ray, sample, primitive) whose section may carry opacity."""
    R, N = rays.t.shape
    K = len(prims)
    with torch.no_grad():
        if not cull:
            active = rays.hit[:, None, None].expand(R, N, K)
        else:
            margin = CULL_SHARPNESS * clamp_sharpness(prims.sharpness)
            half = prims.psq.scale * (1.0 + margin)[:, None]  # (K, 3)
            o = rays.origins[:, None] - prims.psq.translation[None]  # (R, K, 3)
            o_l = torch.einsum("rkj,kji->rki", o, rots_psq)
            d_l = torch.einsum("rj,kji->rki", rays.directions, rots_psq)
            inv = 1.0 / torch.where(d_l.abs() < 1e-12, torch.full_like(d_l, 1e-12), d_l)
            t0 = (-half[None] - o_l) * inv
            t1 = (half[None] - o_l) * inv
            enter = torch.minimum(t0, t1).amax(-1)  # (R, K)
            leave = torch.maximum(t0, t1).amin(-1)
            lo = rays.t - 0.5 * rays.deltas
            hi = rays.t + 0.5 * rays.deltas
            active = (hi[..., None] >= enter[:, None]) & (lo[..., None] <= leave[:, None])
            active &= (leave > enter)[:, None] & rays.hit[:, None, None]
        return active.nonzero(as_tuple=True)


def render_rays(
    prims: DualPrimitive,
    lighting,
    rays: RaySamples,
    mu: float = DEFAULT_MU,
    with_normals: bool = True,
    cull: bool = True,
) -> RayOutput:
    """Render a batch of rays.  Fully differentiable in the primitive tensors and lighting weights.

    Only (ray, sample, primitive) sections that survive culling are
    evaluated; all per-point sums are scatter-adds over those sections.
    """
    R, N = rays.t.shape
    K = len(prims)
    dtype = rays.t.dtype
    pts = rays.points()
    empty = torch.zeros(0, dtype=torch.long)
    ir, isamp, ik = empty, empty, empty
    c = torch.zeros(0, dtype=dtype)
    if K:
        rot_p = rotation_matrix(prims.psq.rotation)
        rot_n = rotation_matrix(prims.nsq.rotation)
        ir, isamp, ik = _active_pairs(prims, rays, rot_p, cull)
        sub = prims.index(ik)
        rots = (rot_p[ik], rot_n[ik])
        centre = pts[ir, isamp]
        half = (0.5 * rays.deltas[ir, isamp])[:, None] * rays.directions[ir]
        ends = torch.stack([centre - half, centre + half])
        f_before, f_after = merged_isf(ends, sub, mu, with_normal=False, rots=rots).value.unbind(0)
        sigma_k = primitive_density(f_before, f_after, sub.sharpness)
        c = sub.transparency * sigma_k

    point_alpha = torch.zeros(R, N, dtype=dtype).index_put((ir, isamp), c, accumulate=True)
    occupied = point_alpha > occupancy_floor(dtype)
    safe = torch.where(occupied, point_alpha, torch.ones_like(point_alpha))
    # blend weight w_k of each section, zero where the point is empty
    share = torch.where(occupied[ir, isamp], c / safe[ir, isamp], torch.zeros_like(c))
    colors = torch.zeros(R, N, 3, dtype=dtype)
    if K:
        colors = colors.index_put((ir, isamp), share[:, None] * prims.color[ik], accumulate=True)
    if lighting is not None and K > 0:
        occ = occupied.nonzero(as_tuple=True)
        residual = lighting_forward(lighting, pts[occ]) if not callable(lighting) else lighting(pts[occ])
        colors = colors.index_put(occ, colors[occ] + residual)

    normals = None
    if with_normals:
        normals = torch.zeros(R, N, 3, dtype=dtype)
        if K > 0:
            n_k = merged_isf(centre, sub, mu, with_normal=True, rots=rots).normal
            normals = normals.index_put((ir, isamp), share[:, None] * n_k, accumulate=True)

    sigma = opacity_to_density(point_alpha, rays.deltas)
    rgb, mask, normal, depth, weights = composite(rays.t, rays.deltas, sigma, colors, normals)
    with torch.no_grad():
        blend_max = torch.zeros(K, dtype=dtype)
        if len(ik):
            blend_max = blend_max.scatter_reduce(0, ik, weights[ir, isamp] * share, reduce="amax")
    return RayOutput(rgb, mask, normal, depth, point_alpha, (ir, isamp, ik), c, weights, blend_max, K)


# --------------------------------------------------------------------------- images


@dataclass
class RenderBuffers:
    rgb: np.ndarray  # (H, W, 3) clamped to [0, 1]
    mask: np.ndarray  # (H, W)
    normal: np.ndarray  # (H, W, 3) world space
    depth: np.ndarray  # (H, W)
    blend_max: np.ndarray  # (K,)


def render_image(
    scene,
    cam: Camera,
    n_samples: int = 128,
    lighting=None,
    mu: float | None = None,
    chunk: int = 4096,
    stride: int = 1,
    cull: bool = True,
    dtype=torch.float64,
) -> RenderBuffers:
    """Render full-resolution buffers (or every ``stride``-th pixel) without gradients.

    ``scene`` is either a :class:`DualPrimitive` batch (with ``lighting``
    weights passed separately) or an object exposing ``render_inputs()``.
    """
    if hasattr(scene, "render_inputs"):
        prims, lighting, scene_mu = scene.render_inputs(dtype)
        mu = scene_mu if mu is None else mu
    else:
        prims = scene.to(dtype)
        if lighting is not None:
            lighting = [torch.as_tensor(w, dtype=dtype) for w in lighting]
    mu = DEFAULT_MU if mu is None else mu
    pix = cam.pixel_grid(stride)
    H = len(range(0, cam.height, stride))
    W = len(range(0, cam.width, stride))
    K = len(prims)
    rgb = np.zeros((len(pix), 3))
    mask = np.zeros(len(pix))
    normal = np.zeros((len(pix), 3))
    depth = np.zeros(len(pix))
    blend_max = np.zeros(K)
    with torch.no_grad():
        for s in range(0, len(pix), chunk):
            rays = make_rays(cam, pix[s : s + chunk], n_samples, dtype=dtype)
            out = render_rays(prims, lighting, rays, mu, with_normals=True, cull=cull)
            block = torch.cat([out.rgb, out.mask[:, None], out.normal, out.depth[:, None]], -1).double().numpy()
            bad = ~np.isfinite(block).all(-1)
            if bad.any():
                x, y = pix[s + int(np.flatnonzero(bad)[0])]
                raise NonFiniteError(f"non-finite render output at pixel (x={x}, y={y})")
            rgb[s : s + chunk] = block[:, :3]
            mask[s : s + chunk] = block[:, 3]
            normal[s : s + chunk] = block[:, 4:7]
            depth[s : s + chunk] = block[:, 7]
            if K:
                blend_max = np.maximum(blend_max, out.blend_max.double().numpy())
    return RenderBuffers(
        np.clip(rgb, 0, 1).reshape(H, W, 3),
        np.clip(mask, 0, 1).reshape(H, W),
        normal.reshape(H, W, 3),
        depth.reshape(H, W),
        blend_max,
    )


def normals_to_camera(normal_world: np.ndarray, cam: Camera) -> np.ndarray:
    return normal_world @ cam.rotation.T


def normals_to_world(normal_cam: np.ndarray, cam: Camera) -> np.ndarray:
    return normal_cam @ cam.rotation


def encode_normals(normals: np.ndarray) -> np.ndarray:
    return np.round(np.clip(0.5 * (normals + 1.0), 0, 1) * 255).astype(np.uint8)


def decode_normals(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0 * 2.0 - 1.0


def save_rgb(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8), "RGB").save(Path(path))


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(mask, 0, 1) * 255).astype(np.uint8), "L").save(Path(path))


def save_normals(path, normals: np.ndarray) -> None:
    Image.fromarray(encode_normals(normals), "RGB").save(Path(path))
