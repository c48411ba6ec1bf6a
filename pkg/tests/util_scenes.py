"""Shared scene builders for tests."""

import numpy as np

from uqsplat.scene import Camera, GaussianSet
from uqsplat.utils import SH_C0, inv_sigmoid, quat_normalize


def simple_camera(f=100.0, size=64, cx=None, cy=None, name=""):
    cx = (size / 2.0) if cx is None else cx
    cy = (size / 2.0) if cy is None else cy
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    return Camera(K=K, R=np.eye(3), t=np.zeros(3), width=size, height=size, name=name)


def random_gaussians(n, seed=0, z_range=(2.0, 8.0), xy=1.5, opacity=(0.05, 0.95)):
    """Random Gaussians in front of an origin camera looking +z."""
    rng = np.random.default_rng(seed)
    means = np.column_stack(
        [
            rng.uniform(-xy, xy, n),
            rng.uniform(-xy, xy, n),
            rng.uniform(*z_range, n),
        ]
    )
    rgb = rng.uniform(0.05, 0.95, size=(n, 3))
    return GaussianSet(
        means=means,
        quats=quat_normalize(rng.normal(size=(n, 4))),
        log_scales=rng.uniform(np.log(0.02), np.log(0.5), size=(n, 3)),
        opacity_logits=inv_sigmoid(rng.uniform(*opacity, n)),
        colors_dc=(rgb - 0.5) / SH_C0,
        uncertainty_logits=inv_sigmoid(rng.uniform(0.05, 0.95, n)),
    )


def plane_gaussian(
    mean=(0.0, 0.0, 5.0),
    tilt_axis=None,
    tilt_angle=0.0,
    scale=40.0,
    thin=1e-4,
    opacity_logit=12.0,
    color=(0.8, 0.2, 0.2),
    u=0.3,
):
    """One large planar Gaussian; normal starts as +z and tilts about tilt_axis."""
    if tilt_axis is None or tilt_angle == 0.0:
        q = np.array([1.0, 0, 0, 0])
    else:
        ax = np.asarray(tilt_axis, float)
        ax = ax / np.linalg.norm(ax)
        q = np.concatenate([[np.cos(tilt_angle / 2)], np.sin(tilt_angle / 2) * ax])
    rgb = np.asarray(color, float)
    return GaussianSet(
        means=np.asarray(mean, float).reshape(1, 3),
        quats=q.reshape(1, 4),
        log_scales=np.log([[scale, scale, thin]]),
        opacity_logits=[opacity_logit],
        colors_dc=((rgb - 0.5) / SH_C0).reshape(1, 3),
        uncertainty_logits=[float(inv_sigmoid(u))],
    )
