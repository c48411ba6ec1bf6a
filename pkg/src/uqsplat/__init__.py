"""uqsplat: CPU differentiable Gaussian splatting with per-primitive uncertainty."""

__version__ = "0.1.0"

from .scene import Camera, GaussianSet, Scene, build_adjacency, scene_extent

__all__ = [
    "Camera",
    "GaussianSet",
    "Scene",
    "build_adjacency",
    "scene_extent",
    "__version__",
]
