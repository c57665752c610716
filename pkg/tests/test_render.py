"""Cameras, ray sampling, section densities, blending, compositing and full renders."""

import math

import numpy as np
import numpy.testing as npt
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rows, small_camera
from sqcarve.geometry import DualPrimitive, SuperquadricParams
from sqcarve.params import primitives_from_raw
from sqcarve.render import (
    Camera,
    box_interval,
    composite,
    decode_normals,
    encode_normals,
    lighting_forward,
    make_rays,
    point_color,
    point_density,
    primitive_density,
    render_image,
    render_rays,
    sample_rays,
    save_normals,
    xavier_weights,
)


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def dual(prims):
    """Stack ``(psq, nsq, alpha, theta, color)`` tuples of plain sequences into a batch."""
    psq = SuperquadricParams(*(np.array([p[0][i] for p in prims], dtype=float) for i in range(4)))
    nsq = SuperquadricParams(*(np.array([p[1][i] for p in prims], dtype=float) for i in range(4)))
    return DualPrimitive(psq, nsq, [p[2] for p in prims], [p[3] for p in prims], [p[4] for p in prims])


FAR_NSQ = ((0.02, 0.02, 0.02), (1, 1), (5, 5, 5), (0, 0, 0))


def sphere(r=0.5, centre=(0, 0, 0), alpha=1.0, theta=0.005, color=(0.8, 0.3, 0.1), nsq=FAR_NSQ):
    return (((r, r, r), (1, 1), centre, (0, 0, 0)), nsq, alpha, theta, color)


def analytic_silhouette(cam, centre, r):
    o, d = cam.rays(cam.pixel_grid())
    oc = np.asarray(centre) - o
    along = (oc * d).sum(-1)
    dist2 = (oc * oc).sum(-1) - along**2
    return (dist2 < r * r).reshape(cam.height, cam.width)


def iou(a, b):
    return np.logical_and(a, b).sum() / np.logical_or(a, b).sum()


class TestCamera:
    def test_optical_axis(self):
        cam = Camera.look_at((0, 0, 3), (0, 0, 0), (0, 1, 0), 40.0, 9, 9)
        _, d = cam.rays([[4, 4]])
        npt.assert_allclose(d[0], [0, 0, -1], atol=1e-15)

    def test_corner_unit_norm(self):
        cam = small_camera(16)
        _, d = cam.rays([[0, 0], [15, 15], [0, 15]])
        npt.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, rtol=1e-15)

    def test_centre_is_eye(self):
        eye = (0.3, -2.0, 1.1)
        npt.assert_allclose(small_camera(8, eye).center, eye, atol=1e-14)

    def test_bad_focal(self):
        with pytest.raises(ValueError):
            Camera(0.0, 1.0, 0, 0, 4, 4, np.eye(3), np.zeros(3))

    def test_pixel_out_of_bounds(self):
        with pytest.raises(ValueError, match="outside"):
            make_rays(small_camera(8), [[8, 0]])


class TestSampling:
    def test_slab_interval(self):
        near, far, hit = box_interval(np.array([[0.0, 0, 3]]), np.array([[0.0, 0, -1]]))
        npt.assert_allclose([near[0], far[0]], [1.9, 4.1], rtol=1e-14)
        assert hit[0]

    def test_miss(self):
        _, _, hit = box_interval(np.array([[0.0, 3, 3]]), np.array([[0.0, 0, -1]]))
        assert not hit[0]

    def test_samples_stratified(self):
        rays = sample_rays(np.array([[0.0, 0, 3]]), np.array([[0.0, 0, -1]]), 16, np.random.default_rng(0).random((1, 16)))
        tt = rays.t[0].numpy()
        edges = 1.9 + 2.2 * np.arange(17) / 16
        assert ((tt >= edges[:-1]) & (tt < edges[1:])).all()
        assert (rays.deltas > 0).all()

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            sample_rays(np.zeros((1, 3)), np.array([[0.0, 0, 1]]), 1)


class TestPrimitiveDensity:
    def test_far_outside(self):
        assert primitive_density(t(2.5), t(2.5), t(0.05)).item() == 0.0

    def test_entering(self):
        # 1 - sigmoid(-1) / sigmoid(1)
        expected = 1 - (1 / (1 + math.e)) / (1 / (1 + math.exp(-1)))
        npt.assert_allclose(primitive_density(t(0.05), t(-0.05), t(0.05)).item(), expected, rtol=1e-14)
        assert expected > 0

    def test_exiting(self):
        assert primitive_density(t(-0.05), t(0.05), t(0.05)).item() == 0.0

    def test_ray_through_sphere(self):
        # field of a unit-radius ball along a ray through its centre
        z = np.linspace(-2, 2, 401)
        f = np.abs(z) - 1.0
        o = primitive_density(t(f[:-1]), t(f[1:]), t(0.02)).numpy()
        mid = 0.5 * (z[:-1] + z[1:])
        w = o * np.cumprod(np.concatenate([[1.0], 1 - o[:-1]]))
        assert abs(mid[np.argmax(w)] + 1.0) < 0.011
        assert w.sum() > 0.999
        assert (o[mid > 0] == 0).all()

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(1e-3, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_range(self, a, b, theta):
        v = primitive_density(t(a), t(b), t(theta)).item()
        assert 0.0 <= v <= 1.0


class TestPointDensity:
    def test_single(self):
        sigma, w = point_density(t([0.3]))
        assert sigma.item() == 0.3 and w.tolist() == [1.0]

    def test_two_identical(self):
        s1, _ = point_density(t([1.0 * 0.4]))
        s2, w = point_density(t([0.5 * 0.4, 0.5 * 0.4]))
        npt.assert_allclose(s2.item(), s1.item(), rtol=1e-15)
        npt.assert_allclose(w.numpy(), [0.5, 0.5])

    def test_weights_sum_to_one(self):
        c = torch.from_numpy(np.random.default_rng(0).random((50, 3)))
        sigma, w = point_density(c)
        npt.assert_allclose(w.sum(-1).numpy(), 1.0, rtol=1e-14)
        npt.assert_allclose(sigma.numpy(), c.sum(-1).numpy())

    def test_empty_point(self):
        sigma, w = point_density(torch.zeros(2, 3, dtype=torch.float64))
        assert (w == 0).all() and (sigma == 0).all()


class TestPointColor:
    def test_single(self):
        c = point_color(t([[0.2, 0.4, 0.6]]), t([1.0]), t([0.0, 0.0, 0.0]))
        npt.assert_allclose(c.numpy(), [0.2, 0.4, 0.6])

    def test_convex_blend(self):
        c = point_color(t([[1.0, 0, 0], [0, 0, 1.0]]), t([0.5, 0.5]), t([0.0, 0.0, 0.0]))
        npt.assert_allclose(c.numpy(), [0.5, 0, 0.5])

    def test_lighting_range(self):
        w = xavier_weights(np.random.default_rng(0))
        out = lighting_forward([t(x) for x in w], torch.zeros(1, 3, dtype=torch.float64))
        assert (out.abs() <= 0.5).all()
        p = torch.from_numpy(np.random.default_rng(1).uniform(-5, 5, (200, 3)))
        assert (lighting_forward([t(x) for x in w], p).abs() <= 0.5).all()

    def test_empty_point_stays_black(self):
        w = [t(x) for x in xavier_weights(np.random.default_rng(0))]
        c = point_color(t([[0.3, 0.3, 0.3]]), t([0.0]), t([0.2, 0.1, 0.0]), w)
        assert (c == 0).all()


class TestComposite:
    def test_empty(self):
        tt = torch.linspace(0, 1, 8, dtype=torch.float64)[None]
        rgb, mask, *_ = composite(tt, torch.full_like(tt, 0.1), torch.zeros_like(tt), torch.rand(1, 8, 3, dtype=torch.float64))
        assert mask.item() == 0 and (rgb == 0).all()

    def test_full_occlusion(self):
        tt = t([[0.0, 1.0, 2.0]])
        deltas = torch.ones_like(tt)
        colors = t([[[0.9, 0.1, 0.2], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]])
        rgb, mask, *_ = composite(tt, deltas, t([[50.0, 1.0, 1.0]]), colors)
        npt.assert_allclose(rgb[0].numpy(), [0.9, 0.1, 0.2], atol=1e-6)
        npt.assert_allclose(mask.item(), 1.0, atol=1e-6)

    def test_two_half_samples(self):
        c1, c2 = np.array([0.9, 0.1, 0.2]), np.array([0.3, 0.6, 0.0])
        tt = t([[0.0, 1.0]])
        rgb, mask, *_ = composite(tt, torch.ones_like(tt), torch.full_like(tt, math.log(2)), t(np.array([[c1, c2]])))
        npt.assert_allclose(mask.item(), 0.75, rtol=1e-14)
        npt.assert_allclose(rgb[0].numpy(), 0.5 * c1 + 0.25 * c2, rtol=1e-14)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50, deadline=None)
    def test_weights_bounded(self, seed):
        rng = np.random.default_rng(seed)
        sig = torch.from_numpy(rng.exponential(rng.uniform(0.1, 100), (4, 32)))
        tt = torch.from_numpy(np.sort(rng.random((4, 32)), -1))
        _, mask, _, _, w = composite(tt, torch.full_like(tt, 0.05), sig)
        assert (w >= 0).all()
        npt.assert_allclose(w.sum(-1).numpy(), mask.numpy(), rtol=1e-12)
        npt.assert_allclose(mask.numpy(), -np.expm1(-(sig * 0.05).sum(-1).numpy()), rtol=1e-12)
        assert ((mask >= 0) & (mask <= 1)).all()


def oracle_render_single(cam, prim_tuple, n_samples):
    """One PSQ-only primitive, marched in numpy with the same section rule."""
    (scale, shape, tr, _), _, alpha, theta, color = prim_tuple
    o, d = cam.rays(cam.pixel_grid())
    rays = sample_rays(o, d, n_samples)
    tt, deltas, hit = rays.t.numpy(), rays.deltas.numpy(), rays.hit.numpy()

    def field(p):
        u = np.abs((p - np.asarray(tr)) / np.asarray(scale))
        e1, e2 = shape
        return ((u[..., 0] ** (2 / e2) + u[..., 1] ** (2 / e2)) ** (e2 / e1) + u[..., 2] ** (2 / e1)) ** (e1 / 2) - 1

    pts = o[:, None] + tt[..., None] * d[:, None]
    half = 0.5 * deltas[..., None] * d[:, None]
    fb, fa = field(pts - half) / theta, field(pts + half) / theta
    logsig = lambda x: -np.logaddexp(0.0, -x)  # noqa: E731
    sec = -np.expm1(np.minimum(logsig(fa) - logsig(fb), 0.0)) * alpha
    sec = np.where(hit[:, None], np.minimum(sec, 1 - 1e-6), 0.0)
    trans = np.cumprod(np.concatenate([np.ones((len(o), 1)), 1 - sec[:, :-1]], 1), 1)
    w = trans * sec
    return w.sum(-1).reshape(cam.height, cam.width), (w.sum(-1)[:, None] * np.asarray(color)).reshape(cam.height, cam.width, 3)


class TestRenderImage:
    def test_empty_scene(self):
        empty = SuperquadricParams(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)))
        buf = render_image(DualPrimitive(empty, empty, np.zeros(0), np.zeros(0), np.zeros((0, 3))), small_camera(8), 16)
        assert (buf.mask == 0).all() and buf.blend_max.shape == (0,)

    def test_sphere_silhouette(self):
        cam = Camera.look_at((0, -6, 0), (0, 0, 0), (0, 0, 1), 12.0, 64, 64)
        buf = render_image(dual([sphere(0.5)]), cam, n_samples=128)
        assert iou(buf.mask > 0.5, analytic_silhouette(cam, (0, 0, 0), 0.5)) > 0.98

    def test_rotation_symmetry(self):
        prims = dual([sphere(0.4, centre=(0.1, -0.05, 0.2))])
        a = render_image(prims, Camera.look_at((0.1, -3, 0.2), (0.1, -0.05, 0.2), (0, 0, 1), 30.0, 48, 48), 128)
        eye = np.array([0.1, -0.05, 0.2]) + 2.95 * np.array([np.sin(1.0) * np.cos(0.3), -np.cos(1.0) * np.cos(0.3), np.sin(0.3)])
        b = render_image(prims, Camera.look_at(eye, (0.1, -0.05, 0.2), (0, 0, 1), 30.0, 48, 48), 128)
        na, nb = (a.mask > 0.5).sum(), (b.mask > 0.5).sum()
        assert abs(na - nb) / na < 0.01

    def test_matches_numpy_oracle(self):
        prim = sphere(0.45, centre=(0.05, 0.0, -0.1), alpha=0.8, theta=0.03)
        cam = small_camera(12)
        buf = render_image(dual([prim]), cam, n_samples=64, cull=False)
        mask, rgb = oracle_render_single(cam, prim, 64)
        npt.assert_allclose(buf.mask, mask, atol=1e-9)
        npt.assert_allclose(buf.rgb, rgb, atol=1e-9)

    def test_sample_doubling(self):
        prims = dual([sphere(0.5, theta=0.01)])
        cam = small_camera(32)
        a = render_image(prims, cam, n_samples=128).mask
        b = render_image(prims, cam, n_samples=256).mask
        assert np.abs(a - b).mean() < 0.01

    def test_occlusion(self):
        cam = Camera.look_at((0, -3, 0), (0, 0, 0), (0, 0, 1), 10.0, 5, 5)
        front = sphere(0.5, centre=(0, -0.5, 0), theta=0.002, color=(0.2, 0.7, 0.3))
        back1 = sphere(0.3, centre=(0, 0.5, 0), color=(1, 0, 0))
        back2 = sphere(0.3, centre=(0, 0.8, 0), color=(1, 0, 0))
        a = render_image(dual([front, back1]), cam, 256)
        b = render_image(dual([front, back2]), cam, 256)
        assert a.mask[2, 2] > 1 - 1e-4
        npt.assert_allclose(a.rgb[2, 2], b.rgb[2, 2], atol=1e-3)

    def test_inert_nsq_matches_psq_only(self):
        prim = sphere(0.45, alpha=0.9, theta=0.02)
        cam = small_camera(12)
        buf = render_image(dual([prim]), cam, n_samples=64)
        mask, rgb = oracle_render_single(cam, prim, 64)
        assert np.abs(buf.mask - mask).max() < 1e-3
        assert np.abs(buf.rgb - rgb).max() < 1e-3

    def test_carving_opens_hole(self):
        box = ((0.5, 0.5, 0.3), (0.1, 0.1), (0, 0, 0), (0, 0, 0))
        drill = ((0.2, 0.2, 0.6), (0.1, 1.0), (0, 0, 0), (0, 0, 0))
        cam = Camera.look_at((0, 0, 3), (0, 0, 0), (0, 1, 0), 30.0, 33, 33)
        buf = render_image(dual([(box, drill, 1.0, 0.005, (0.5, 0.5, 0.5))]), cam, 128)
        assert buf.mask[16, 16] < 0.05
        # about 0.35 to the side of the axis: solid wall between hole and rim
        assert buf.mask[16, 23] > 0.95

    def test_cull_matches_dense(self):
        rng = np.random.default_rng(3)
        prims = primitives_from_raw(torch.from_numpy(random_rows(rng, 3)))
        cam = small_camera(10)
        a = render_image(prims, cam, 48, cull=True)
        b = render_image(prims, cam, 48, cull=False)
        assert np.abs(a.mask - b.mask).max() < 1e-3
        assert np.abs(a.rgb - b.rgb).max() < 1e-3

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=10, deadline=None)
    def test_mask_range_random_scenes(self, seed):
        rng = np.random.default_rng(seed)
        prims = primitives_from_raw(torch.from_numpy(random_rows(rng, 3, theta=(0.002, 0.3))))
        buf = render_image(prims, small_camera(6), 32)
        assert ((buf.mask >= 0) & (buf.mask <= 1)).all()
        assert ((buf.blend_max >= 0) & (buf.blend_max <= 1)).all()


class TestRenderRays:
    def test_pairs_match_dense_contributions(self):
        rng = np.random.default_rng(4)
        prims = primitives_from_raw(torch.from_numpy(random_rows(rng, 2)))
        cam = small_camera(6)
        rays = make_rays(cam, cam.pixel_grid(), 16)
        out = render_rays(prims, None, rays, cull=False)
        dense = out.contributions
        assert dense.shape == (36, 16, 2)
        npt.assert_allclose(dense.sum(-1).numpy(), out.point_alpha.numpy(), rtol=1e-14)


class TestNormalImages:
    def test_encode_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        n = rng.normal(size=(5, 7, 3))
        n /= np.linalg.norm(n, axis=-1, keepdims=True)
        assert np.abs(decode_normals(encode_normals(n)) - n).max() <= 1 / 255 + 1e-12
        save_normals(tmp_path / "n.png", n)
        from PIL import Image

        img = np.asarray(Image.open(tmp_path / "n.png"))
        assert img.dtype == np.uint8 and img.shape == (5, 7, 3)
        npt.assert_array_equal(img, encode_normals(n))

    def test_encoding_convention(self):
        npt.assert_array_equal(encode_normals(np.array([[0.0, 0.0, 1.0]])), [[128, 128, 255]])
