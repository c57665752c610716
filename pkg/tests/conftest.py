import numpy as np
import pytest
import torch

from sqcarve.params import PRIM_WIDTH, ParamVector, raw_from_constrained
from sqcarve.losses import RayBatchTargets
from sqcarve.render import LIGHTING_DIMS, Camera, render_rays, sample_rays, xavier_weights
from sqcarve.trainer import SceneModel, TrainConfig, batch_objective


def random_rows(rng, k, theta=(0.05, 0.3), shape=(0.3, 2.0), alpha=(0.3, 0.95)):
    """Raw rows for ``k`` primitives placed near the origin with smooth-ish fields."""
    rows = []
    for _ in range(k):
        s = rng.uniform(0.2, 0.5, 3)
        rows.append(
            raw_from_constrained(
                {
                    "psq_scale": s,
                    "psq_shape": rng.uniform(*shape, 2),
                    "psq_translation": rng.uniform(-0.3, 0.3, 3),
                    "psq_rotation": rng.uniform(-np.pi, np.pi, 3),
                    "nsq_scale": s * rng.uniform(0.3, 0.8, 3),
                    "nsq_shape": rng.uniform(*shape, 2),
                    "nsq_translation": rng.uniform(-0.3, 0.3, 3),
                    "nsq_rotation": rng.uniform(-np.pi, np.pi, 3),
                    "alpha": rng.uniform(*alpha),
                    "theta": rng.uniform(*theta),
                    "color": rng.uniform(0.1, 0.9, 3),
                }
            )
        )
    return np.stack(rows).reshape(k, PRIM_WIDTH)


def small_camera(res=8, eye=(0.4, -2.6, 1.2)):
    return Camera.look_at(eye, (0, 0, 0), (0, 0, 1), 40.0, res, res)


def render_problem(seed, k=1, res=8, n_samples=24, normals=True, weights=None, scene_rows=None):
    """Loss over one ``res``x``res`` view with targets from an unrelated random scene.

    Returns ``(objective, ParamVector)``; the objective takes a flat float64 raw tensor.
    """
    rng = np.random.default_rng(seed)
    rows = random_rows(rng, k) if scene_rows is None else scene_rows
    lighting = xavier_weights(rng, LIGHTING_DIMS)
    scene = SceneModel(rows, lighting, seed, 0, {}, k_norm=k)
    cam = small_camera(res)
    o, d = cam.rays(cam.pixel_grid())
    rays = sample_rays(o, d, n_samples, rng.random((len(o), n_samples)), torch.float64)
    target_scene = SceneModel(random_rows(rng, 2), xavier_weights(rng, LIGHTING_DIMS), seed, 0, {}, k_norm=2)
    with torch.no_grad():
        out = render_rays(*target_scene.render_inputs(torch.float64)[:2], rays, 0.05, with_normals=True, cull=False)
    mask = (out.mask > 0.5).double()
    targets = RayBatchTargets(out.rgb.clamp(0, 1), mask, out.normal if normals else None)
    cfg = TrainConfig(**(weights or {}))
    objective = batch_objective(scene.layout, rays, targets, cfg, k, cull=False)
    return objective, scene.param_vector()


@pytest.fixture
def tiny_render_problem():
    return render_problem(0, k=1)
