"""Depth back-projection, uncertainty-guided normals, homographies, sampling.

Every differentiable operation here comes as a forward/backward pair; the
backward functions consume exactly the caches their forward returned. Nothing
in this module owns parameters, so gradients flow through to the rendered
maps (depth, uncertainty, normal, distance) and stop there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera


@dataclass
class NormalMap:
    """Unit camera-frame normals estimated from a depth map, plus validity."""

    n: np.ndarray  # (H,W,3), zeros where invalid
    valid: np.ndarray  # (H,W) bool
    cache: dict


def depth_to_normal(
    depth: np.ndarray,
    unc: np.ndarray | None,
    cam: Camera,
    weighted: bool = True,
    depth_valid: np.ndarray | None = None,
) -> NormalMap:
    """Estimate normals from back-projected depth via dual cross products.

    Back-projects P(p) = depth(p) * K^-1 p~, forms the axis-aligned cross
    product n1 from horizontal/vertical central differences and the diagonal
    cross product n2, then blends with weights k_j = sum of (1 - U) over each
    stencil's four pixels (uncertain pixels vote less). With weighted=False
    both weights are 1. The result is flipped to face the camera and
    normalized. Border pixels, pixels whose stencil touches an invalid depth,
    and degenerate blends are invalid.
    """
    H, W = depth.shape
    rays = cam.pixel_rays()
    P = depth[..., None] * rays
    if depth_valid is None:
        depth_valid = np.ones((H, W), dtype=bool)
    if unc is None or not weighted:
        unc = np.zeros((H, W))

    ex = P[1:-1, 2:] - P[1:-1, :-2]
    ey = P[2:, 1:-1] - P[:-2, 1:-1]
    n1 = np.cross(ex, ey)
    dn1 = P[2:, 2:] - P[:-2, :-2]  # SE - NW
    dn2 = P[:-2, 2:] - P[2:, :-2]  # NE - SW
    n2 = np.cross(dn2, dn1)

    one_m_u = 1.0 - unc
    if weighted:
        k1 = one_m_u[1:-1, 2:] + one_m_u[1:-1, :-2] + one_m_u[2:, 1:-1] + one_m_u[:-2, 1:-1]
        k2 = one_m_u[2:, 2:] + one_m_u[:-2, :-2] + one_m_u[:-2, 2:] + one_m_u[2:, :-2]
    else:
        k1 = np.ones((H - 2, W - 2))
        k2 = np.ones((H - 2, W - 2))

    raw = k1[..., None] * n1 + k2[..., None] * n2
    v_ctr = rays[1:-1, 1:-1]
    flip = np.where(np.einsum("hwc,hwc->hw", raw, v_ctr) > 0, -1.0, 1.0)
    flipped = flip[..., None] * raw
    norm = np.linalg.norm(flipped, axis=2)

    stencil_ok = np.ones((H - 2, W - 2), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            stencil_ok &= depth_valid[1 + dy : H - 1 + dy, 1 + dx : W - 1 + dx]
    ok = stencil_ok & (norm >= 1e-12)

    n_out = np.zeros((H, W, 3))
    safe = np.where(ok, norm, 1.0)
    n_out[1:-1, 1:-1] = np.where(ok[..., None], flipped / safe[..., None], 0.0)
    valid = np.zeros((H, W), dtype=bool)
    valid[1:-1, 1:-1] = ok

    cache = dict(
        rays=rays, ex=ex, ey=ey, n1=n1, n2=n2, dn1=dn1, dn2=dn2, k1=k1, k2=k2,
        flip=flip, norm=safe, ok=ok, weighted=weighted,
        n_unit=n_out[1:-1, 1:-1],
    )
    return NormalMap(n=n_out, valid=valid, cache=cache)


def depth_to_normal_backward(nm: NormalMap, g_n: np.ndarray):
    """Gradients of a loss w.r.t. the depth and uncertainty maps.

    g_n is dL/d(unit normal map), (H,W,3); entries at invalid pixels are
    ignored. Returns (g_depth (H,W), g_unc (H,W)). The orientation flip is a
    constant of the forward pass.
    """
    c = nm.cache
    H, W = nm.valid.shape
    ok = c["ok"]
    g = np.where(ok[..., None], g_n[1:-1, 1:-1], 0.0)

    # through normalization: (I - n n^T) / |raw| applied to g, then the flip
    n_unit = c["n_unit"]
    gdot = np.einsum("hwc,hwc->hw", g, n_unit)
    g_flipped = (g - gdot[..., None] * n_unit) / c["norm"][..., None]
    g_raw = c["flip"][..., None] * g_flipped

    g_k1 = np.einsum("hwc,hwc->hw", g_raw, c["n1"])
    g_k2 = np.einsum("hwc,hwc->hw", g_raw, c["n2"])
    g_n1 = c["k1"][..., None] * g_raw
    g_n2 = c["k2"][..., None] * g_raw

    # cross product adjoints: for c = a x b, ga = b x gc and gb = gc x a
    g_ex = np.cross(c["ey"], g_n1)
    g_ey = np.cross(g_n1, c["ex"])
    g_dn2 = np.cross(c["dn1"], g_n2)
    g_dn1 = np.cross(g_n2, c["dn2"])

    gP = np.zeros((H, W, 3))
    gP[1:-1, 2:] += g_ex
    gP[1:-1, :-2] -= g_ex
    gP[2:, 1:-1] += g_ey
    gP[:-2, 1:-1] -= g_ey
    gP[2:, 2:] += g_dn1
    gP[:-2, :-2] -= g_dn1
    gP[:-2, 2:] += g_dn2
    gP[2:, :-2] -= g_dn2
    g_depth = np.einsum("hwc,hwc->hw", gP, c["rays"])

    g_unc = np.zeros((H, W))
    if c["weighted"]:
        g_unc[1:-1, 2:] -= g_k1
        g_unc[1:-1, :-2] -= g_k1
        g_unc[2:, 1:-1] -= g_k1
        g_unc[:-2, 1:-1] -= g_k1
        g_unc[2:, 2:] -= g_k2
        g_unc[:-2, :-2] -= g_k2
        g_unc[:-2, 2:] -= g_k2
        g_unc[2:, :-2] -= g_k2
    return g_depth, g_unc


# ---------------------------------------------------------------------------
# Plane-induced homographies


def relative_pose(ref_cam: Camera, nbr_cam: Camera):
    """(R_rn, T_rn) taking reference-camera coordinates to neighbor's."""
    R_rn = nbr_cam.R @ ref_cam.R.T
    T_rn = nbr_cam.t - R_rn @ ref_cam.t
    return R_rn, T_rn


def plane_homography(ref_cam: Camera, nbr_cam: Camera, n_r, d_r):
    """H_rn = K_n (R_rn - T_rn n_r^T / d_r) K_r^{-1}, vectorized over planes.

    n_r: (...,3) unit plane normals in the reference camera frame (toward the
    camera), d_r: (...) distances from the reference camera center to the
    plane. The left intrinsics are the neighbor's. Raises on |d_r| < 1e-9.
    """
    n_r = np.asarray(n_r, dtype=np.float64)
    d_r = np.asarray(d_r, dtype=np.float64)
    if np.any(np.abs(d_r) < 1e-9):
        raise ValueError("plane distance too small for a homography")
    R_rn, T_rn = relative_pose(ref_cam, nbr_cam)
    Kr_inv = np.linalg.inv(ref_cam.K)
    B = nbr_cam.K @ R_rn @ Kr_inv
    a = nbr_cam.K @ T_rn
    m = n_r @ Kr_inv  # K_r^{-T} n_r, row-vector form
    return B - a[..., :, None] * (m / d_r[..., None])[..., None, :]


def plane_homography_backward(ref_cam: Camera, nbr_cam: Camera, n_r, d_r, g_H):
    """Adjoint of plane_homography w.r.t. (n_r, d_r)."""
    n_r = np.asarray(n_r, dtype=np.float64)
    d_r = np.asarray(d_r, dtype=np.float64)
    R_rn, T_rn = relative_pose(ref_cam, nbr_cam)
    Kr_inv = np.linalg.inv(ref_cam.K)
    a = nbr_cam.K @ T_rn
    m = n_r @ Kr_inv
    # H = B - a m^T / d
    g_m = -np.einsum("i,...ij->...j", a, g_H) / d_r[..., None]
    g_n = g_m @ Kr_inv.T
    g_d = np.einsum("...ij,i,...j->...", g_H, a, m) / d_r**2
    return g_n, g_d


def apply_homography(H, pts):
    """Map continuous pixel coords (...,2) through H (3,3 or (...,3,3)).

    Returns (mapped (...,2), cache) with the homogeneous scale retained for
    the backward pass.
    """
    pts = np.asarray(pts, dtype=np.float64)
    ph = np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)
    q = np.einsum("...ij,...j->...i", H, ph)
    out = q[..., :2] / q[..., 2:3]
    return out, dict(ph=ph, q=q, H=H)


def apply_homography_backward(cache, g_out):
    """Adjoint of apply_homography; returns (g_H, g_pts)."""
    ph, q = cache["ph"], cache["q"]
    H = cache["H"]
    w = q[..., 2:3]
    # d(out_k)/d(q_k) = 1/w, d(out_k)/d(q_2) = -q_k/w^2
    g_q = np.concatenate(
        [g_out / w, -(g_out * q[..., :2] / w**2).sum(axis=-1, keepdims=True)],
        axis=-1,
    )
    g_H = np.einsum("...i,...j->...ij", g_q, ph)
    g_ph = np.einsum("...ij,...i->...j", H, g_q)
    return g_H, g_ph[..., :2]


# ---------------------------------------------------------------------------
# Image sampling (Catmull-Rom cubic by default, bilinear as an option)


def _cr_weights(t):
    """Catmull-Rom weights for taps at offsets (-1, 0, 1, 2); sum to 1."""
    t2, t3 = t * t, t * t * t
    return np.stack(
        [
            -0.5 * t + t2 - 0.5 * t3,
            1.0 - 2.5 * t2 + 1.5 * t3,
            0.5 * t + 2.0 * t2 - 1.5 * t3,
            -0.5 * t2 + 0.5 * t3,
        ],
        axis=-1,
    )


def _cr_weights_grad(t):
    t2 = t * t
    return np.stack(
        [
            -0.5 + 2.0 * t - 1.5 * t2,
            -5.0 * t + 4.5 * t2,
            0.5 + 4.0 * t - 4.5 * t2,
            -t + 1.5 * t2,
        ],
        axis=-1,
    )


def sample_image(img, pos, method: str = "cubic"):
    """Sample img (H,W) or (H,W,C) at continuous pixel coords pos (...,2).

    Pixel (r, c) has its center at coordinates (c + 0.5, r + 0.5). Returns
    (values (...,C or scalar), valid (...,), cache). Samples whose support
    footprint leaves the image are flagged invalid (values still computed
    with edge clamping, so downstream code can stay branch-free).
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    H, W, C = img.shape
    pos = np.asarray(pos, dtype=np.float64)
    ix = pos[..., 0] - 0.5
    iy = pos[..., 1] - 0.5
    x0 = np.floor(ix).astype(int)
    y0 = np.floor(iy).astype(int)
    tx = ix - x0
    ty = iy - y0
    if method == "cubic":
        wx = _cr_weights(tx)
        wy = _cr_weights(ty)
        offs = (-1, 0, 1, 2)
        valid = (x0 >= 1) & (x0 <= W - 3) & (y0 >= 1) & (y0 <= H - 3)
    elif method == "bilinear":
        wx = np.stack([1.0 - tx, tx], axis=-1)
        wy = np.stack([1.0 - ty, ty], axis=-1)
        offs = (0, 1)
        valid = (x0 >= 0) & (x0 <= W - 2) & (y0 >= 0) & (y0 <= H - 2)
    else:
        raise ValueError(f"unknown sampling method: {method}")
    xs = np.stack([np.clip(x0 + o, 0, W - 1) for o in offs], axis=-1)
    ys = np.stack([np.clip(y0 + o, 0, H - 1) for o in offs], axis=-1)
    # gather the support: taps (..., ny, nx, C)
    taps = img[ys[..., :, None], xs[..., None, :], :]
    val = np.einsum("...i,...j,...ijc->...c", wy, wx, taps)
    cache = dict(
        method=method, xs=xs, ys=ys, taps=taps, wx=wx, wy=wy, tx=tx, ty=ty,
        shape=(H, W, C), squeeze=squeeze,
    )
    out = val[..., 0] if squeeze else val
    return out, valid, cache


def sample_image_backward(cache, g_val, want_image_grad: bool = False):
    """Adjoint of sample_image: returns (g_pos (...,2), g_img or None).

    g_val matches the forward value shape. Gradients at invalid samples are
    the caller's responsibility to mask.
    """
    if cache["squeeze"]:
        g_val = np.asarray(g_val)[..., None]
    wx, wy, taps = cache["wx"], cache["wy"], cache["taps"]
    if cache["method"] == "cubic":
        dwx = _cr_weights_grad(cache["tx"])
        dwy = _cr_weights_grad(cache["ty"])
    else:
        ones = np.ones_like(cache["tx"])
        dwx = np.stack([-ones, ones], axis=-1)
        dwy = np.stack([-ones, ones], axis=-1)
    gc = g_val  # (..., C)
    d_dx = np.einsum("...i,...j,...ijc,...c->...", wy, dwx, taps, gc)
    d_dy = np.einsum("...i,...j,...ijc,...c->...", dwy, wx, taps, gc)
    g_pos = np.stack([d_dx, d_dy], axis=-1)
    g_img = None
    if want_image_grad:
        H, W, C = cache["shape"]
        g_img = np.zeros((H, W, C))
        contrib = np.einsum("...i,...j,...c->...ijc", wy, wx, gc)
        ys = cache["ys"][..., :, None] + np.zeros_like(cache["xs"][..., None, :])
        xs = cache["xs"][..., None, :] + np.zeros_like(cache["ys"][..., :, None])
        np.add.at(g_img, (ys.ravel(), xs.ravel()), contrib.reshape(-1, C))
        if cache["squeeze"]:
            g_img = g_img[..., 0]
    return g_pos, g_img


def warp_patch(image, H, center, patch: int = 11, method: str = "cubic"):
    """Sample `image` on an 11x11 (or `patch`-sized) grid mapped through H.

    center is the integer (row, col) of the reference patch center; the grid
    covers center + [-patch//2, patch//2] in both axes at pixel centers.
    Returns (patch values, overall validity, per-sample validity, cache).
    """
    r, c = center
    half = patch // 2
    d = np.arange(-half, half + 1, dtype=np.float64)
    gx = (c + 0.5) + d[None, :]
    gy = (r + 0.5) + d[:, None]
    pts = np.stack([np.broadcast_to(gx, (patch, patch)),
                    np.broadcast_to(gy, (patch, patch))], axis=-1)
    mapped, hcache = apply_homography(H, pts)
    vals, valid, scache = sample_image(image, mapped, method=method)
    return vals, bool(valid.all()), valid, dict(h=hcache, s=scache, pts=pts)
