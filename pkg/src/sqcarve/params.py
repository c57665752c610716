"""Raw (unconstrained) parameter storage, squash maps and gradient tooling.

Every trainable quantity of a scene lives in one flat float64 vector.  The
first ``K * PRIM_WIDTH`` slots hold the primitives row by row, the rest hold
the lighting network weights.  Constrained values are obtained with a
sigmoid squash onto the legal range; rotations are left free.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .geometry import DualPrimitive, SuperquadricParams

log = logging.getLogger(__name__)

SCALE_RANGE = (0.02, 1.0)
SHAPE_RANGE = (0.05, 2.0)
TRANSLATION_RANGE = (-1.0, 1.0)
UNIT_RANGE = (0.0, 1.0)

# (name, width, range or None for unsquashed)
PRIM_FIELDS: list[tuple[str, int, tuple[float, float] | None]] = [
    ("psq_scale", 3, SCALE_RANGE),
    ("psq_shape", 2, SHAPE_RANGE),
    ("psq_translation", 3, TRANSLATION_RANGE),
    ("psq_rotation", 3, None),
    ("nsq_scale", 3, SCALE_RANGE),
    ("nsq_shape", 2, SHAPE_RANGE),
    ("nsq_translation", 3, TRANSLATION_RANGE),
    ("nsq_rotation", 3, None),
    ("alpha", 1, UNIT_RANGE),
    ("theta", 1, UNIT_RANGE),
    ("color", 3, UNIT_RANGE),
]

FIELD_SLICES: dict[str, slice] = {}
_offset = 0
for _name, _width, _ in PRIM_FIELDS:
    FIELD_SLICES[_name] = slice(_offset, _offset + _width)
    _offset += _width
PRIM_WIDTH = _offset
FIELD_RANGES = {name: rng for name, _, rng in PRIM_FIELDS}


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is not."""


def squash(raw, lo: float, hi: float):
    """Map an unconstrained value into ``(lo, hi)`` with a logistic curve."""
    if isinstance(raw, torch.Tensor):
        return lo + (hi - lo) * torch.sigmoid(raw)
    return lo + (hi - lo) / (1.0 + np.exp(-np.asarray(raw, dtype=np.float64)))


def unsquash(value, lo: float, hi: float):
    y = (np.asarray(value, dtype=np.float64) - lo) / (hi - lo)
    with np.errstate(divide="ignore"):
        return np.log(y) - np.log1p(-y)


def squash_derivative(raw, lo: float, hi: float):
    s = 1.0 / (1.0 + np.exp(-np.asarray(raw, dtype=np.float64)))
    return (hi - lo) * s * (1.0 - s)


def constrain_rows(raw: torch.Tensor) -> dict[str, torch.Tensor]:
    """Apply the squash maps to a ``(K, PRIM_WIDTH)`` raw block."""
    out = {}
    for name, _, rng in PRIM_FIELDS:
        block = raw[..., FIELD_SLICES[name]]
        out[name] = block if rng is None else squash(block, *rng)
    return out


def primitives_from_raw(raw: torch.Tensor) -> DualPrimitive:
    c = constrain_rows(raw)
    return DualPrimitive(
        psq=SuperquadricParams(c["psq_scale"], c["psq_shape"], c["psq_translation"], c["psq_rotation"]),
        nsq=SuperquadricParams(c["nsq_scale"], c["nsq_shape"], c["nsq_translation"], c["nsq_rotation"]),
        transparency=c["alpha"][..., 0],
        sharpness=c["theta"][..., 0],
        color=c["color"],
    )


def raw_from_constrained(values: dict[str, np.ndarray]) -> np.ndarray:
    """Inverse of :func:`constrain_rows` for a single primitive."""
    row = np.zeros(PRIM_WIDTH)
    for name, width, rng in PRIM_FIELDS:
        v = np.broadcast_to(np.asarray(values[name], dtype=np.float64), (width,))
        row[FIELD_SLICES[name]] = v if rng is None else unsquash(v, *rng)
    return row


@dataclass
class ParamLayout:
    """Maps (primitive, field, component) and lighting slots to flat indices."""

    num_primitives: int
    lighting_shapes: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def primitive_size(self) -> int:
        return self.num_primitives * PRIM_WIDTH

    @property
    def lighting_size(self) -> int:
        return int(sum(np.prod(s) for s in self.lighting_shapes))

    @property
    def size(self) -> int:
        return self.primitive_size + self.lighting_size

    def index(self, prim: int, name: str, comp: int = 0) -> int:
        sl = FIELD_SLICES[name]
        if not 0 <= comp < sl.stop - sl.start:
            raise IndexError(f"{name} has no component {comp}")
        if not 0 <= prim < self.num_primitives:
            raise IndexError(f"primitive {prim} out of range")
        return prim * PRIM_WIDTH + sl.start + comp

    def describe(self, flat: int) -> str:
        if flat < self.primitive_size:
            prim, col = divmod(flat, PRIM_WIDTH)
            for name, sl in FIELD_SLICES.items():
                if sl.start <= col < sl.stop:
                    return f"primitive[{prim}].{name}[{col - sl.start}]"
        rest = flat - self.primitive_size
        for i, shape in enumerate(self.lighting_shapes):
            n = int(np.prod(shape))
            if rest < n:
                return f"lighting[{i}][{rest}]"
            rest -= n
        raise IndexError(flat)

    def lighting_slice(self) -> slice:
        return slice(self.primitive_size, self.size)


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise ValueError(f"expected {self.layout.size} raw values, got {self.values.shape}")

    def split(self, t: torch.Tensor):
        """Split a flat tensor into the primitive block and lighting tensors."""
        prim = t[: self.layout.primitive_size].reshape(self.layout.num_primitives, PRIM_WIDTH)
        weights = []
        off = self.layout.primitive_size
        for shape in self.layout.lighting_shapes:
            n = int(np.prod(shape))
            weights.append(t[off : off + n].reshape(shape))
            off += n
        return prim, weights

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class GradientBundle:
    grad: np.ndarray
    loss: float
    breakdown: dict[str, float] = field(default_factory=dict)


Objective = Callable[[torch.Tensor], "torch.Tensor | tuple[torch.Tensor, dict]"]


def _call(objective: Objective, t: torch.Tensor):
    out = objective(t)
    if isinstance(out, tuple):
        return out
    return out, {}


def grad(objective: Objective, params: ParamVector) -> GradientBundle:
    """Exact gradient of ``objective`` with respect to the raw vector.

    ``objective`` receives a float64 tensor of raw values and returns a scalar
    tensor, optionally paired with a breakdown dict of scalars.
    """
    t = torch.tensor(params.values, dtype=torch.float64, requires_grad=True)
    loss, breakdown = _call(objective, t)
    if not torch.isfinite(loss):
        raise NonFiniteError(f"objective is not finite: {float(loss.detach())}")
    (g,) = torch.autograd.grad(loss, t, allow_unused=True)
    g = np.zeros(params.layout.size) if g is None else g.detach().numpy().copy()
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NonFiniteError(f"non-finite gradient at flat index {bad[0]} ({params.layout.describe(int(bad[0]))})")
    return GradientBundle(g, float(loss.detach()), {k: float(v) for k, v in breakdown.items()})


@dataclass
class FdReport:
    max_rel_error: float
    mean_rel_error: float
    failures: list[tuple[int, float, float]]  # (index, analytic, numeric)
    checked: list[int]

    @property
    def passed(self) -> bool:
        return not self.failures


def fd_check(
    objective: Objective,
    params: ParamVector,
    h: float = 1e-5,
    tol: float = 1e-4,
    abs_tol: float = 1e-6,
    indices=None,
    analytic: np.ndarray | None = None,
) -> FdReport:
    """Compare analytic gradients against central differences coordinate by coordinate.

    A coordinate fails when both its relative error exceeds ``tol`` and its
    absolute error exceeds ``abs_tol``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if analytic is None:
        analytic = grad(objective, params).grad
    idx = range(params.layout.size) if indices is None else indices
    base = params.values
    rel_errors = []
    failures = []
    checked = []
    with torch.no_grad():
        for i in idx:
            plus = base.copy()
            minus = base.copy()
            plus[i] += h
            minus[i] -= h
            fp = float(_call(objective, torch.tensor(plus, dtype=torch.float64))[0])
            fm = float(_call(objective, torch.tensor(minus, dtype=torch.float64))[0])
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[i])
            err = abs(a - numeric)
            # errors below abs_tol count as exact (near-zero gradients)
            rel = 0.0 if err <= abs_tol else err / max(abs(a), abs(numeric))
            rel_errors.append(rel)
            checked.append(int(i))
            if rel > tol:
                failures.append((int(i), a, numeric))
    rel_errors = np.asarray(rel_errors) if rel_errors else np.zeros(1)
    return FdReport(float(rel_errors.max()), float(rel_errors.mean()), failures, checked)
