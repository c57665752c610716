"""Training objectives: worked examples, shape properties and the weighted total."""

import math

import numpy as np
import numpy.testing as npt
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sqcarve.losses import (
    LossWeights,
    RayBatchTargets,
    binary_entropy,
    loss_entropy,
    loss_entropy_pairs,
    loss_mask,
    loss_max,
    loss_normal_reg,
    loss_rgb,
    loss_sparse,
    total_loss,
)
from sqcarve.params import NonFiniteError


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestRgb:
    def test_perfect(self):
        rgb = t([[0.2, 0.4, 0.6], [0.1, 0.1, 0.1]])
        assert loss_rgb(rgb, rgb.clone(), t([1.0, 1.0])).item() == 0.0

    def test_l1_of_ones(self):
        assert loss_rgb(t([[1.0, 1.0, 1.0]]), t([[0.0, 0.0, 0.0]]), t([1.0])).item() == 3.0

    def test_mask_gating(self):
        rgb = torch.rand(16, 3, dtype=torch.float64)
        assert loss_rgb(rgb, torch.zeros_like(rgb), torch.zeros(16, dtype=torch.float64)).item() == 0.0


class TestMask:
    def test_exact_match(self):
        m = t([0.0, 1.0, 1.0, 0.0])
        assert loss_mask(m, m).item() <= 1e-5

    def test_half(self):
        npt.assert_allclose(loss_mask(t([0.5, 0.5]), t([1.0, 0.0])).item(), math.log(2), rtol=1e-12)

    def test_half_is_target_independent(self):
        gt = torch.from_numpy(np.random.default_rng(0).integers(0, 2, 100).astype(np.float64))
        npt.assert_allclose(loss_mask(torch.full((100,), 0.5, dtype=torch.float64), gt).item(), math.log(2), rtol=1e-12)


class TestSparse:
    def test_empty_space(self):
        assert loss_sparse(torch.zeros(50, dtype=torch.float64), 3).item() == 0.0

    def test_single_point(self):
        assert loss_sparse(t([1.0]), 1).item() == 1.0

    def test_two_overlapping(self):
        npt.assert_allclose(loss_sparse(torch.full((10,), 1.2, dtype=torch.float64), 2).item(), 0.6, rtol=1e-15)


class TestEntropy:
    def test_half(self):
        npt.assert_allclose(binary_entropy(t(0.5)).item(), math.log(2), rtol=1e-15)

    def test_endpoints(self):
        h = binary_entropy(t([0.0, 1.0, 1e-7, 1 - 1e-7]))
        assert (h <= 2e-5).all()

    def test_quarter(self):
        expected = 0.25 * math.log(4) + 0.75 * math.log(4 / 3)
        npt.assert_allclose(binary_entropy(t(0.25)).item(), expected, rtol=1e-12)
        npt.assert_allclose(expected, 0.5623, atol=1e-4)

    def test_maximum_at_half_by_sampling(self):
        a = torch.linspace(0.0, 1.0, 10001, dtype=torch.float64)
        h = binary_entropy(a)
        assert int(h.argmax()) == 5000
        left, right = h[: 5001], h[5000:]
        assert (left[1:] > left[:-1]).all()
        assert (right[1:] < right[:-1]).all()

    def test_loss_normalisation(self):
        c = torch.full((4, 2), 0.5, dtype=torch.float64)
        npt.assert_allclose(loss_entropy(c).item(), math.log(2), rtol=1e-12)
        npt.assert_allclose(loss_entropy(c, 4).item(), 0.5 * math.log(2), rtol=1e-12)

    @given(st.integers(1, 6), st.integers(1, 30), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_pairs_match_dense(self, k, n, seed):
        rng = np.random.default_rng(seed)
        dense = rng.random((n, k)) * (rng.random((n, k)) < 0.4)
        idx = np.nonzero(dense)
        a = loss_entropy(torch.from_numpy(dense), k)
        b = loss_entropy_pairs(torch.from_numpy(dense[idx]), n, k)
        npt.assert_allclose(b.item(), a.item(), rtol=1e-12, atol=1e-15)


class TestMax:
    def test_below_one(self):
        assert loss_max(t([0.0, 0.5, 1.0]), 1).item() == 0.0

    def test_single_point(self):
        assert loss_max(t([1.5]), 1).item() == 0.5

    def test_two_opaque(self):
        npt.assert_allclose(loss_max(torch.full((7,), 2.0, dtype=torch.float64), 2).item(), 0.5, rtol=1e-15)

    def test_kink_by_sampling(self):
        a = torch.linspace(0.0, 2.0, 2001, dtype=torch.float64).requires_grad_()
        loss_max(a, 1).backward()
        g = a.grad * len(a)
        below, above = a.detach() < 1.0, a.detach() > 1.0
        assert (g[below] == 0).all()
        npt.assert_allclose(g[above].numpy(), 1.0, rtol=1e-12)


class TestNormalReg:
    def test_equal(self):
        n = t([[0.0, 0.0, 1.0], [0.6, 0.8, 0.0]])
        assert loss_normal_reg(n, n.clone(), t([1.0, 1.0])).item() == 0.0

    def test_antipodal(self):
        assert loss_normal_reg(t([[0.0, 0.0, 1.0]]), t([[0.0, 0.0, -1.0]]), t([1.0])).item() == 2.0

    def test_gated(self):
        assert loss_normal_reg(t([[0.0, 0.0, 1.0]]), t([[0.0, 0.0, -1.0]]), t([0.0])).item() == 0.0


def _terms(rng):
    return {name: t(float(v)) for name, v in zip(["rgb", "mask", "sp", "e", "max", "norm_reg"], rng.random(6))}


class TestTotal:
    def test_all_zero(self):
        terms = {name: t(0.0) for name in ["rgb", "mask", "sp", "e", "max", "norm_reg"]}
        total, bd = total_loss(terms, LossWeights())
        assert total.item() == 0.0 and bd["total"] == 0.0

    def test_zero_weights(self):
        terms = _terms(np.random.default_rng(0))
        total, _ = total_loss(terms, LossWeights(0.0, 0.0, 0.0, 0.0, 0.0))
        assert total.item() == terms["rgb"].item()

    def test_arithmetic(self):
        terms = {"rgb": t(1.0), "mask": t(2.0)}
        total, bd = total_loss(terms, LossWeights(mask=0.5, sparse=0.0, entropy=0.0, max=0.0, norm_reg=0.0))
        assert total.item() == 2.0
        assert bd["mask"] == 2.0 and bd["sp"] == 0.0

    def test_non_finite_names_term(self):
        terms = _terms(np.random.default_rng(1))
        terms["e"] = t(float("nan"))
        with pytest.raises(NonFiniteError, match="'e'"):
            total_loss(terms, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(mask=-1.0)

    @given(st.sampled_from(["mask", "sparse", "entropy", "max", "norm_reg"]), st.floats(0, 10), st.floats(0, 10))
    @settings(max_examples=50, deadline=None)
    def test_linear_in_each_weight(self, name, a, b):
        terms = _terms(np.random.default_rng(2))

        def at(x):
            return total_loss(terms, LossWeights(**{name: x})).__getitem__(0).item()

        npt.assert_allclose(at(a) + at(b), at(a + b) + at(0.0), rtol=1e-12, atol=1e-12)


class TestTargets:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            RayBatchTargets(torch.zeros(3, 3), torch.zeros(2))


class TestRemovingTransparentPrimitive:
    def test_losses_unchanged(self):
        from conftest import random_rows, small_camera
        from sqcarve.params import FIELD_SLICES, primitives_from_raw
        from sqcarve.render import render_rays, sample_rays

        rng = np.random.default_rng(7)
        rows = random_rows(rng, 3)
        rows[1, FIELD_SLICES["alpha"]] = -1e4  # squashes to exactly zero opacity
        cam = small_camera(8)
        o, d = cam.rays(cam.pixel_grid())
        rays = sample_rays(o, d, 24, rng.random((len(o), 24)), torch.float64)
        targets = RayBatchTargets(torch.rand(len(o), 3, dtype=torch.float64), (torch.rand(len(o)) > 0.5).double())

        # the trainer normalises by the initial count, which pruning leaves fixed
        def losses(r, k):
            out = render_rays(primitives_from_raw(torch.from_numpy(r)), None, rays, 0.05, with_normals=True, cull=False)
            pa = out.point_alpha[rays.hit]
            n = int(rays.hit.sum()) * rays.t.shape[1]
            return np.array(
                [
                    loss_rgb(out.rgb, targets.rgb, targets.mask).item(),
                    loss_mask(out.mask, targets.mask).item(),
                    loss_sparse(pa, k).item(),
                    loss_entropy_pairs(out.pair_values, n, k).item(),
                    loss_max(pa, k).item(),
                ]
            )

        npt.assert_allclose(losses(rows[[0, 2]], 3), losses(rows, 3), atol=1e-9)
