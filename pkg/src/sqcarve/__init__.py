"""Dual-superquadric scene abstraction from multi-view images."""

from .geometry import DualPrimitive, SuperquadricParams, erase_probability, isf_superquadric, merged_isf
from .mesh import TriMesh, boolean_difference, export_scene, mesh_metrics, tessellate_superquadric
from .render import Camera, render_image
from .trainer import SceneModel, TrainConfig, fit, init_scene, load_checkpoint, save_checkpoint

__all__ = [
    "Camera",
    "DualPrimitive",
    "SceneModel",
    "SuperquadricParams",
    "TrainConfig",
    "TriMesh",
    "boolean_difference",
    "erase_probability",
    "export_scene",
    "fit",
    "init_scene",
    "isf_superquadric",
    "load_checkpoint",
    "merged_isf",
    "mesh_metrics",
    "render_image",
    "save_checkpoint",
    "tessellate_superquadric",
]

__version__ = "0.1.0"
