"""World-to-screen projection of 3D Gaussians (EWA splatting).

Everything here is vectorized over Gaussians and keeps the intermediates the
backward pass needs (camera-space centers, perspective Jacobians, rotation
matrices, orientation flips).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, GaussianSet

# Default EWA constants. The dilation floor keeps flattened Gaussians from
# producing degenerate screen footprints; 0.3 px^2 is the standard value.
NEAR_PLANE = 0.01
DILATION = 0.3


@dataclass
class ProjectedGaussians:
    """Screen-space Gaussians surviving culling, plus backward-pass caches.

    idx maps each row back into the source GaussianSet. cov2d and conic are
    packed symmetric 2x2 matrices (a, b, c) for [[a, b], [b, c]]; conic is the
    inverse of cov2d after the dilation floor.
    """

    idx: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth_z: np.ndarray
    radius: np.ndarray
    plane_d: np.ndarray
    normal_cam: np.ndarray
    # caches
    t_cam: np.ndarray
    J: np.ndarray
    R: np.ndarray
    unit_quats: np.ndarray
    scales: np.ndarray
    axes: np.ndarray
    flip: np.ndarray
    normal_world: np.ndarray

    def __len__(self):
        return self.idx.shape[0]


def oriented_normals(gaussians: GaussianSet, cam: Camera):
    """World-frame plane normals flipped to face the camera.

    Returns (normals (N,3), flip (N,) in {+1,-1}). A normal is flipped when
    n . (mu - O_c) > 0; the flip is treated as a constant by the backward
    pass.
    """
    n = gaussians.normals()
    to_gauss = gaussians.means - cam.center
    flip = np.where(np.einsum("nd,nd->n", n, to_gauss) > 0, -1.0, 1.0)
    return n * flip[:, None], flip


def plane_distance(gaussians: GaussianSet, cam: Camera):
    """Distance from the camera center to each Gaussian's tangent plane.

    d_i = (O_c - mu_i) . n_i with n_i oriented toward the camera, so d_i >= 0
    whenever the plane faces the camera. Shape (N,).
    """
    n, _ = oriented_normals(gaussians, cam)
    return np.einsum("nd,nd->n", cam.center - gaussians.means, n)


def perspective_jacobian(t_cam, fx: float, fy: float):
    """J = d(pixel)/d(t_cam) at camera-space points t_cam (N,3): (N,2,3)."""
    t_cam = np.atleast_2d(np.asarray(t_cam, dtype=np.float64))
    tx, ty, tz = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    J = np.zeros((t_cam.shape[0], 2, 3), dtype=np.float64)
    J[:, 0, 0] = fx / tz
    J[:, 0, 2] = -fx * tx / tz**2
    J[:, 1, 1] = fy / tz
    J[:, 1, 2] = -fy * ty / tz**2
    return J


def footprint_radius(cov2d, opacities, alpha_min: float, bbox_sigma: float | None):
    """Pixel radius beyond which a Gaussian cannot pass the alpha_min gate.

    With alpha_min > 0 the exact cutoff is sigma_max * sqrt(2 ln(alpha /
    alpha_min)); outside it alpha-hat < alpha_min by construction, so binning
    by this radius loses nothing relative to an exhaustive per-pixel loop.
    With alpha_min == 0 a fixed bbox_sigma multiple is used instead.
    """
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    mid = 0.5 * (a + c)
    det = a * c - b * b
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    sigma_max = np.sqrt(lam_max)
    if alpha_min > 0:
        ratio = np.maximum(opacities, 0.0) / alpha_min
        r = sigma_max * np.sqrt(2.0 * np.log(np.maximum(ratio, 1.0)))
    else:
        if bbox_sigma is None:
            bbox_sigma = 3.0
        r = sigma_max * bbox_sigma
    return r, lam_max


def project_gaussians(
    gaussians: GaussianSet,
    cam: Camera,
    near: float = NEAR_PLANE,
    dilation: float = DILATION,
    alpha_min: float = 1.0 / 255.0,
    bbox_sigma: float | None = None,
) -> ProjectedGaussians:
    """EWA-project a GaussianSet; rows culled by near plane or footprint.

    mean2d is the perspective projection of the camera-space center; cov2d is
    the upper-left 2x2 of J W Sigma W^T J^T plus the dilation floor on the
    diagonal.
    """
    uq = gaussians.unit_quats()
    R = gaussians.rotmats()
    scales = gaussians.scales
    axes = gaussians.normal_axes()

    t_cam = gaussians.means @ cam.R.T + cam.t
    in_front = t_cam[:, 2] > near

    # Work on the survivors only; everything below is (M, ...).
    keep0 = np.flatnonzero(in_front)
    t = t_cam[keep0]
    tz = t[:, 2]
    mean2d = np.stack(
        [cam.fx * t[:, 0] / tz + cam.cx, cam.fy * t[:, 1] / tz + cam.cy], axis=1
    )
    J = perspective_jacobian(t, cam.fx, cam.fy)
    M2 = np.einsum("nij,jk->nik", J, cam.R)
    cov3d = np.einsum("nij,nj,nkj->nik", R[keep0], scales[keep0] ** 2, R[keep0])
    cov2d_mat = np.einsum("nij,njk,nlk->nil", M2, cov3d, M2)
    cov2d = np.stack(
        [cov2d_mat[:, 0, 0] + dilation, cov2d_mat[:, 0, 1], cov2d_mat[:, 1, 1] + dilation],
        axis=1,
    )
    det = cov2d[:, 0] * cov2d[:, 2] - cov2d[:, 1] ** 2
    conic = np.stack(
        [cov2d[:, 2] / det, -cov2d[:, 1] / det, cov2d[:, 0] / det], axis=1
    )

    radius, _ = footprint_radius(
        cov2d, gaussians.opacities[keep0], alpha_min, bbox_sigma
    )
    visible = (
        (radius > 0)
        & (mean2d[:, 0] + radius > 0)
        & (mean2d[:, 0] - radius < cam.width)
        & (mean2d[:, 1] + radius > 0)
        & (mean2d[:, 1] - radius < cam.height)
    )
    keep = keep0[visible]
    sel = visible

    n_world, flip = oriented_normals(gaussians, cam)
    d_all = np.einsum("nd,nd->n", cam.center - gaussians.means, n_world)

    return ProjectedGaussians(
        idx=keep,
        mean2d=mean2d[sel],
        cov2d=cov2d[sel],
        conic=conic[sel],
        depth_z=tz[sel],
        radius=radius[sel],
        plane_d=d_all[keep],
        normal_cam=n_world[keep] @ cam.R.T,
        t_cam=t[sel],
        J=J[sel],
        R=R[keep],
        unit_quats=uq[keep],
        scales=scales[keep],
        axes=axes[keep],
        flip=flip[keep],
        normal_world=n_world[keep],
    )
