"""Superquadric inside-outside functions and the dual-primitive erase operator.

All functions work on batched torch tensors and broadcast over leading
dimensions, so the same code serves single-point queries, dense grids and
the differentiable renderer.  Numpy inputs are accepted and promoted to
float64 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np
import torch

# Floor for bases raised to fractional powers; keeps pow() and its backward finite.
TINY = 1e-30
THETA_MIN = 1e-3
DEFAULT_MU = 0.05


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        if dtype is not None and x.dtype != dtype:
            return x.to(dtype)
        if not x.is_floating_point():
            return x.to(torch.float64)
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


@dataclass
class SuperquadricParams:
    """One superquadric (or a batch of them along leading dims).

    ``shape`` holds ``(eps1, eps2)``; ``rotation`` holds Euler angles in
    radians applied as ``Rz @ Ry @ Rx``.
    """

    scale: torch.Tensor
    shape: torch.Tensor
    translation: torch.Tensor
    rotation: torch.Tensor

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, as_tensor(getattr(self, f.name)))

    def to(self, dtype) -> "SuperquadricParams":
        return SuperquadricParams(*(getattr(self, f.name).to(dtype) for f in fields(self)))

    def index(self, idx) -> "SuperquadricParams":
        return SuperquadricParams(*(getattr(self, f.name)[idx] for f in fields(self)))


@dataclass
class DualPrimitive:
    """A positive superquadric paired with the negative one that carves it."""

    psq: SuperquadricParams
    nsq: SuperquadricParams
    transparency: torch.Tensor
    sharpness: torch.Tensor
    color: torch.Tensor

    def __post_init__(self):
        self.transparency = as_tensor(self.transparency)
        self.sharpness = as_tensor(self.sharpness)
        self.color = as_tensor(self.color)

    def __len__(self) -> int:
        return 1 if self.transparency.ndim == 0 else self.transparency.shape[0]

    def to(self, dtype) -> "DualPrimitive":
        return DualPrimitive(
            self.psq.to(dtype),
            self.nsq.to(dtype),
            self.transparency.to(dtype),
            self.sharpness.to(dtype),
            self.color.to(dtype),
        )

    def index(self, idx) -> "DualPrimitive":
        return DualPrimitive(
            self.psq.index(idx),
            self.nsq.index(idx),
            self.transparency[idx],
            self.sharpness[idx],
            self.color[idx],
        )

    def with_color(self, color) -> "DualPrimitive":
        return replace(self, color=as_tensor(color))


class IsfSample(NamedTuple):
    value: torch.Tensor
    normal: torch.Tensor | None
    erase_prob: torch.Tensor
    per_quadric_values: torch.Tensor


def rotation_matrix(angles) -> torch.Tensor:
    """Rotation ``Rz(gamma) @ Ry(beta) @ Rx(alpha)`` for angles ``(alpha, beta, gamma)``."""
    angles = as_tensor(angles)
    cx, cy, cz = torch.cos(angles).unbind(-1)
    sx, sy, sz = torch.sin(angles).unbind(-1)
    row0 = torch.stack([cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx], -1)
    row1 = torch.stack([sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx], -1)
    row2 = torch.stack([-sy, cy * sx, cy * cx], -1)
    return torch.stack([row0, row1, row2], -2)


def to_local_frame(p, q: SuperquadricParams, rot: torch.Tensor | None = None) -> torch.Tensor:
    """Map world points into the superquadric frame: ``R^T (p - T)``."""
    p = as_tensor(p, q.translation.dtype)
    if rot is None:
        rot = rotation_matrix(q.rotation)
    return _rotate_transpose(p - q.translation, rot)


def _rotate_transpose(d: torch.Tensor, rot: torch.Tensor) -> torch.Tensor:
    # R^T d as explicit multiply-adds; batched 3x3 products are slow on CPU
    return d[..., 0:1] * rot[..., 0, :] + d[..., 1:2] * rot[..., 1, :] + d[..., 2:3] * rot[..., 2, :]


def _rotate(g: torch.Tensor, rot: torch.Tensor) -> torch.Tensor:
    return g[..., 0:1] * rot[..., :, 0] + g[..., 1:2] * rot[..., :, 1] + g[..., 2:3] * rot[..., :, 2]


def _pnorm(a: torch.Tensor, b: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """``(a^p + b^p)^(1/p)`` for non-negative a, b and p >= 1 without overflow."""
    hi = torch.maximum(a, b)
    lo = torch.minimum(a, b)
    ratio = (lo / hi.clamp_min(TINY)).clamp_min(TINY)
    return hi * (1.0 + ratio**p) ** (1.0 / p)


def _local_terms(local: torch.Tensor, scale: torch.Tensor, shape: torch.Tensor):
    u = (local / scale).abs()
    p_xy = 2.0 / shape[..., 1]
    p_z = 2.0 / shape[..., 0]
    r = _pnorm(u[..., 0], u[..., 1], p_xy)
    n = _pnorm(r, u[..., 2], p_z)
    return u, r, n, p_xy, p_z


def isf_local(local, scale, shape) -> torch.Tensor:
    """Inside-outside value for points already expressed in the local frame.

    The double power law is rewritten as nested p-norms,
    ``|| (||(u, v)||_{2/eps2}, w) ||_{2/eps1} - 1``, which is algebraically
    identical but stays finite for tiny exponents and far-away points.
    """
    _, _, n, _, _ = _local_terms(local, scale, shape)
    return n - 1.0


def isf_superquadric(p, q: SuperquadricParams, rot: torch.Tensor | None = None) -> torch.Tensor:
    local = to_local_frame(p, q, rot)
    return isf_local(local, q.scale, q.shape)


def _isf_and_local_gradient(local, scale, shape):
    u, r, n, p_xy, p_z = _local_terms(local, scale, shape)
    dn_dr = (r / n.clamp_min(TINY)).clamp_min(TINY) ** (p_z - 1.0)
    dn_dw = (u[..., 2] / n.clamp_min(TINY)).clamp_min(TINY) ** (p_z - 1.0)
    dr_du = (u[..., 0] / r.clamp_min(TINY)).clamp_min(TINY) ** (p_xy - 1.0)
    dr_dv = (u[..., 1] / r.clamp_min(TINY)).clamp_min(TINY) ** (p_xy - 1.0)
    # sign(0) == 0 implements the zero-derivative convention on coordinate planes
    g = torch.stack([dn_dr * dr_du, dn_dr * dr_dv, dn_dw], -1) * torch.sign(local) / scale
    return n - 1.0, g


def isf_with_gradient(
    p, q: SuperquadricParams, rot: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Value and world-space spatial gradient of the inside-outside function."""
    p = as_tensor(p, q.translation.dtype)
    if rot is None:
        rot = rotation_matrix(q.rotation)
    local = _rotate_transpose(p - q.translation, rot)
    f, g_local = _isf_and_local_gradient(local, q.scale, q.shape)
    return f, _rotate(g_local, rot)


def isf_gradient(p, q: SuperquadricParams) -> torch.Tensor:
    return isf_with_gradient(p, q)[1]


def normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def clamp_sharpness(theta) -> torch.Tensor:
    return as_tensor(theta).clamp_min(THETA_MIN)


def erase_probability(f_psq, f_nsq, theta, mu: float = DEFAULT_MU) -> torch.Tensor:
    """Probability that the negative quadric is active at a point."""
    f_psq, f_nsq, theta = as_tensor(f_psq), as_tensor(f_nsq), as_tensor(theta)
    return torch.sigmoid(-f_psq / theta - mu) * torch.sigmoid(-f_nsq / theta - mu)


def merged_isf(
    p,
    s: DualPrimitive,
    mu: float = DEFAULT_MU,
    with_normal: bool = True,
    rots: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> IsfSample:
    """Blend the PSQ and NSQ fields through the erase probability.

    Parameter fields of ``s`` broadcast against the leading dims of ``p``.
    ``rots`` optionally supplies precomputed (PSQ, NSQ) rotation matrices.
    """
    theta = clamp_sharpness(s.sharpness)
    r_p, r_n = rots if rots is not None else (None, None)
    if with_normal:
        f_p, g_p = isf_with_gradient(p, s.psq, r_p)
        f_n, g_n = isf_with_gradient(p, s.nsq, r_n)
    else:
        f_p = isf_superquadric(p, s.psq, r_p)
        f_n = isf_superquadric(p, s.nsq, r_n)
    pe = erase_probability(f_p, f_n, theta, mu)
    value = f_p * (1.0 - pe) - f_n * pe
    normal = None
    if with_normal:
        n_p = normalize(g_p)
        blended = n_p * (1.0 - pe)[..., None] - normalize(g_n) * pe[..., None]
        length = blended.norm(dim=-1, keepdim=True)
        # antiparallel cancellation: fall back to the positive quadric's normal
        normal = torch.where(length > 1e-9, blended / length.clamp_min(1e-9), n_p)
    return IsfSample(value, normal, pe, torch.stack([f_p, f_n], -1))


def primitive_bounds_local(s: DualPrimitive, margin: torch.Tensor | float = 0.0) -> torch.Tensor:
    """Half-extents of the PSQ's local box, grown by ``1 + margin``.

    Every superquadric with eps <= 2 lies inside its scale box, and outside
    the box grown by ``1 + m`` the inside-outside value exceeds ``m``.
    """
    return s.psq.scale * (1.0 + as_tensor(margin, s.psq.scale.dtype))[..., None]
