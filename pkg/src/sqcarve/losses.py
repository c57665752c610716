"""Training objectives over a batch of rays."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .params import NonFiniteError

CLAMP = 1e-6
TERMS = ("rgb", "mask", "sp", "e", "max", "norm_reg")


@dataclass
class LossWeights:
    mask: float = 0.5
    sparse: float = 0.01
    entropy: float = 0.01
    max: float = 0.1
    norm_reg: float = 0.05

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (v >= 0 and v < float("inf")):
                raise ValueError(f"loss weight {k} must be finite and non-negative, got {v}")


@dataclass
class RayBatchTargets:
    rgb: torch.Tensor  # (B, 3)
    mask: torch.Tensor  # (B,) in {0, 1}
    normal: torch.Tensor | None = None  # (B, 3) world-space unit vectors

    def __post_init__(self):
        n = self.rgb.shape[0]
        if self.mask.shape[0] != n or (self.normal is not None and self.normal.shape[0] != n):
            raise ValueError("target arrays must share the batch length")


def loss_rgb(rgb: torch.Tensor, target_rgb: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    """Masked L1 photometric error, averaged over the batch."""
    return ((rgb - target_rgb).abs().sum(-1) * target_mask).sum() / rgb.shape[0]


def loss_mask(mask: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    m = mask.clamp(CLAMP, 1.0 - CLAMP)
    return -(target_mask * torch.log(m) + (1.0 - target_mask) * torch.log1p(-m)).mean()


def loss_sparse(point_alpha: torch.Tensor, num_primitives: int) -> torch.Tensor:
    """``(1/K) * mean_p alpha(p)`` over sampled points."""
    if point_alpha.numel() == 0:
        return point_alpha.sum()
    return point_alpha.mean() / max(num_primitives, 1)


def binary_entropy(a: torch.Tensor) -> torch.Tensor:
    """Entropy in nats with the argument clamped to [1e-6, 1 - 1e-6].

    Values exactly 0 or 1 give exactly 0 so absent primitives add nothing.
    """
    exact = (a <= 0.0) | (a >= 1.0)
    a = a.clamp(CLAMP, 1.0 - CLAMP)
    h = -(a * torch.log(a) + (1.0 - a) * torch.log1p(-a))
    return torch.where(exact, torch.zeros_like(h), h)


def loss_entropy(contributions: torch.Tensor, num_primitives: int | None = None) -> torch.Tensor:
    """Entropy of per-primitive opacity contributions (last dim = K).

    Contributions are clipped to [0, 1]; per point the entropies are summed
    over primitives and scaled by ``1/num_primitives`` (default: the last
    dim), then averaged over points.
    """
    if contributions.numel() == 0:
        return contributions.sum()
    k = contributions.shape[-1] if num_primitives is None else num_primitives
    per_point = binary_entropy(contributions.clamp(0.0, 1.0)).sum(-1)
    return per_point.mean() / max(k, 1)


def loss_entropy_pairs(values: torch.Tensor, num_points: int, num_primitives: int) -> torch.Tensor:
    """:func:`loss_entropy` from the non-zero entries only.

    ``values`` lists the contributions of evaluated sections; every other
    (point, primitive) entry is zero and has zero entropy.
    """
    if num_points == 0:
        return values.sum() * 0.0
    return binary_entropy(values.clamp(0.0, 1.0)).sum() / num_points / max(num_primitives, 1)


def loss_max(point_alpha: torch.Tensor, num_primitives: int) -> torch.Tensor:
    if point_alpha.numel() == 0:
        return point_alpha.sum()
    return torch.relu(point_alpha - 1.0).mean() / max(num_primitives, 1)


def loss_normal_reg(normal: torch.Tensor, target_normal: torch.Tensor, target_mask: torch.Tensor) -> torch.Tensor:
    return ((normal - target_normal).abs().sum(-1) * target_mask).sum() / normal.shape[0]


def total_loss(terms: dict[str, torch.Tensor], w: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the six terms; missing terms count as zero."""
    scale = {"rgb": 1.0, "mask": w.mask, "sp": w.sparse, "e": w.entropy, "max": w.max, "norm_reg": w.norm_reg}
    total = None
    breakdown = {}
    for name in TERMS:
        if name not in terms:
            breakdown[name] = 0.0
            continue
        value = terms[name]
        v = float(value.detach())
        if v != v or v in (float("inf"), float("-inf")):
            raise NonFiniteError(f"loss term {name!r} is not finite")
        breakdown[name] = v
        part = scale[name] * value
        total = part if total is None else total + part
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    breakdown["total"] = float(total.detach())
    return total, breakdown
