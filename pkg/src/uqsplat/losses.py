"""Scalar training objectives with masking/reduction rules and adjoints.

Each loss returns (value, cache); the matching *_backward consumes the cache
and an upstream scalar weight. Reductions are means over valid pixels; a term
with zero valid pixels reports 0 with count 0 and a zero gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    apply_homography,
    apply_homography_backward,
    plane_homography,
    plane_homography_backward,
    sample_image,
    sample_image_backward,
)
from .utils import gaussian_kernel1d

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _blur(x, k):
    """Separable zero-padded correlation along the first two axes.

    The kernel is symmetric and the padding is zero, so this operator is its
    own adjoint; the SSIM backward relies on that.
    """
    half = len(k) // 2
    out = np.zeros_like(x)
    xp = np.pad(x, ((half, half),) + ((0, 0),) * (x.ndim - 1))
    for i, kv in enumerate(k):
        out += kv * xp[i : i + x.shape[0]]
    out2 = np.zeros_like(out)
    xp = np.pad(out, ((0, 0), (half, half)) + ((0, 0),) * (x.ndim - 2))
    for i, kv in enumerate(k):
        out2 += kv * xp[:, i : i + x.shape[1]]
    return out2


def ssim(img_x, img_y):
    """Mean SSIM over pixels and channels, 11x11 Gaussian window sigma 1.5.

    Inputs are (H,W,C) in [0,1]. Returns (ssim value, cache); the cache
    supports gradients w.r.t. img_x only (img_y is the reference).
    """
    x = np.asarray(img_x, dtype=np.float64)
    y = np.asarray(img_y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("SSIM inputs must share a shape")
    k = gaussian_kernel1d(SSIM_WINDOW, SSIM_SIGMA)
    mu_x = _blur(x, k)
    mu_y = _blur(y, k)
    xx = _blur(x * x, k)
    yy = _blur(y * y, k)
    xy = _blur(x * y, k)
    s_x = xx - mu_x * mu_x
    s_y = yy - mu_y * mu_y
    s_xy = xy - mu_x * mu_y
    A1 = 2 * mu_x * mu_y + SSIM_C1
    A2 = 2 * s_xy + SSIM_C2
    B1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    B2 = s_x + s_y + SSIM_C2
    smap = (A1 * A2) / (B1 * B2)
    val = float(smap.mean())
    cache = dict(x=x, y=y, k=k, mu_x=mu_x, mu_y=mu_y, A1=A1, A2=A2, B1=B1, B2=B2)
    return val, cache


def ssim_backward(cache, g: float):
    """dL/d(img_x) for L = g * ssim(img_x, img_y)."""
    x, y, k = cache["x"], cache["y"], cache["k"]
    mu_x, mu_y = cache["mu_x"], cache["mu_y"]
    A1, A2, B1, B2 = cache["A1"], cache["A2"], cache["B1"], cache["B2"]
    go = g / x.size
    denom = B1 * B2
    dS_dmu = 2 * mu_y * A2 / denom - (A1 * A2) * 2 * mu_x / (B1 * B1 * B2)
    dS_dsx = -(A1 * A2) / (B1 * B2 * B2)
    dS_dsxy = 2 * A1 / denom
    # independent blurred fields: F1 = blur(x), F2 = blur(x^2), F3 = blur(xy)
    gF1 = go * (dS_dmu + dS_dsx * (-2 * mu_x) + dS_dsxy * (-mu_y))
    gF2 = go * dS_dsx
    gF3 = go * dS_dsxy
    return _blur(gF1, k) + _blur(gF2, k) * 2 * x + _blur(gF3, k) * y


def rgb_loss(rendered, target, m: float = 0.0, b: float = 0.0, lam: float = 0.2):
    """(1-lam) L1(exposure(I) - target) + lam (1 - SSIM(I, target)).

    The exposure model exp(m) * I + b applies only to the L1 term, and only
    when SSIM(I, target) >= 0.5; below that the raw render is compared
    directly (untrustworthy exposure fits on badly converged renders). SSIM
    always sees the uncompensated image.
    """
    I = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(target, dtype=np.float64)
    if I.shape != gt.shape:
        raise ValueError("rgb_loss inputs must share a shape")
    ssim_val, ssim_cache = ssim(I, gt)
    use_exposure = ssim_val >= 0.5
    if use_exposure:
        Ie = np.exp(m) * I + b
    else:
        Ie = I
    resid = Ie - gt
    l1 = float(np.abs(resid).mean())
    loss = (1.0 - lam) * l1 + lam * (1.0 - ssim_val)
    cache = dict(
        I=I, resid=resid, m=m, lam=lam, use_exposure=use_exposure,
        ssim_cache=ssim_cache, ssim_val=ssim_val, l1=l1,
    )
    return loss, cache


def rgb_loss_backward(cache, g: float = 1.0):
    """Returns (g_image, g_m, g_b). sign(0) contributes 0 (L1 subgradient)."""
    I, resid, lam = cache["I"], cache["resid"], cache["lam"]
    g_l1 = g * (1.0 - lam) / resid.size
    g_resid = g_l1 * np.sign(resid)
    if cache["use_exposure"]:
        em = np.exp(cache["m"])
        g_img = g_resid * em
        g_m = float((g_resid * I).sum() * em)
        g_b = float(g_resid.sum())
    else:
        g_img = g_resid.copy()
        g_m = 0.0
        g_b = 0.0
    g_img += ssim_backward(cache["ssim_cache"], -g * lam)
    return g_img, g_m, g_b


def scale_reg(gaussians):
    """Mean over Gaussians of min(s1, s2, s3): drives primitives planar."""
    s = gaussians.scales
    return float(s.min(axis=1).mean()), dict(scales=s)


def scale_reg_backward(cache, g: float = 1.0):
    """d/d(log_scales); exact scale ties split the subgradient equally."""
    s = cache["scales"]
    n = s.shape[0]
    mins = s.min(axis=1, keepdims=True)
    is_min = s == mins
    share = is_min / is_min.sum(axis=1, keepdims=True)
    # d mean-min / d s = share / n, and ds/d(log s) = s
    return g * share * s / n


def uncertainty_nll(n_render, n_depth, unc, valid, u_floor: float = 0.01):
    """Gaussian NLL of the normal residual under per-pixel uncertainty.

    mean over valid pixels of |n_render - n_depth|^2 / (2 U^2) + log U, with
    U clamped to [u_floor, 1]. Its per-pixel minimizer over U is exactly the
    residual magnitude, which is what calibrates the uncertainty field.
    """
    valid = np.asarray(valid, dtype=bool)
    M = int(valid.sum())
    if M == 0:
        return 0.0, dict(M=0)
    diff = np.asarray(n_render, dtype=np.float64) - np.asarray(n_depth, dtype=np.float64)
    e2 = np.einsum("hwc,hwc->hw", diff, diff)
    Uc = np.clip(unc, u_floor, 1.0)
    per = e2 / (2.0 * Uc * Uc) + np.log(Uc)
    loss = float(per[valid].sum() / M)
    cache = dict(diff=diff, e2=e2, Uc=Uc, valid=valid, M=M, unc=np.asarray(unc),
                 u_floor=u_floor)
    return loss, cache


def uncertainty_nll_backward(cache, g: float = 1.0):
    """Returns (g_n_render, g_n_depth, g_unc); zero outside the valid mask."""
    if cache["M"] == 0:
        return None, None, None
    diff, e2, Uc = cache["diff"], cache["e2"], cache["Uc"]
    valid, M = cache["valid"], cache["M"]
    w = g / M
    g_nr = np.where(valid[..., None], w * diff / (Uc * Uc)[..., None], 0.0)
    g_unc = np.where(valid, w * (-e2 / Uc**3 + 1.0 / Uc), 0.0)
    gate = (cache["unc"] > cache["u_floor"]) & (cache["unc"] < 1.0)
    g_unc = np.where(gate, g_unc, 0.0)
    return g_nr, -g_nr, g_unc


# ---------------------------------------------------------------------------
# Multi-view photometric (NCC) and geometric consistency


@dataclass
class MultiViewConfig:
    patch: int = 11
    stride: int = 2
    gate_px: float = 1.0
    var_floor: float = 1e-8
    min_plane_dist: float = 1e-6
    method: str = "cubic"


def _plane_params_at(normal_map, dist_map, rows, cols, eps: float = 1e-8):
    """Unit normal and camera-to-plane distance at integer pixels.

    The rendered normal map is the raw composite; dividing Dist by its norm
    cancels the shared compositing mass, recovering the contributing plane's
    true distance.
    """
    N = normal_map[rows, cols]
    norm = np.linalg.norm(N, axis=-1)
    ok = norm > eps
    safe = np.where(ok, norm, 1.0)
    n_unit = N / safe[..., None]
    d = dist_map[rows, cols] / safe
    return n_unit, d, norm, ok


def multiview_loss(
    ref_out,
    nbr_out,
    ref_gray,
    nbr_gray,
    mv: MultiViewConfig | None = None,
):
    """NCC patch loss and homography roundtrip loss between two views.

    Patch centers sit on a stride grid of valid reference pixels. Per center,
    the reference plane (from the rendered normal and distance maps) induces
    H_rn; the neighbor's rendered plane maps, sampled at the forward-warped
    center, induce H_nr back. Centers whose roundtrip error exceeds gate_px
    are treated as occluded and excluded from BOTH terms. NCC compares the
    reference gray patch (integer crop) against the neighbor gray sampled at
    H_rn-warped coordinates.

    Returns (l_ncc, l_geo, count, cache).
    """
    mv = mv or MultiViewConfig()
    ref_cam, nbr_cam = ref_out.cam, nbr_out.cam
    H_img, W_img = ref_out.valid.shape
    half = mv.patch // 2
    margin = half + 2  # patch crop must stay inside the reference image
    rr = np.arange(margin, H_img - margin, mv.stride)
    cc = np.arange(margin, W_img - margin, mv.stride)
    rows, cols = [a.ravel() for a in np.meshgrid(rr, cc, indexing="ij")]
    if rows.size == 0:
        return 0.0, 0.0, 0, dict(count=0)

    ok = ref_out.valid[rows, cols]
    n_r, d_r, norm_r, n_ok = _plane_params_at(ref_out.normal, ref_out.dist, rows, cols)
    ok &= n_ok & (d_r > mv.min_plane_dist)
    d_r_safe = np.where(ok, d_r, 1.0)

    H_rn = plane_homography(ref_cam, nbr_cam, n_r, d_r_safe)
    centers = np.stack([cols + 0.5, rows + 0.5], axis=-1)
    q, q_cache = apply_homography(H_rn, centers)

    # neighbor plane parameters sampled at the warped center
    Nn_s, v1, nn_cache = sample_image(nbr_out.normal, q, method=mv.method)
    Dn_s, v2, dn_cache = sample_image(nbr_out.dist, q, method=mv.method)
    vmask_s, v3, _ = sample_image(nbr_out.valid.astype(np.float64), q, method=mv.method)
    ok &= v1 & v2 & v3 & (vmask_s > 1.0 - 1e-6)
    norm_n = np.linalg.norm(Nn_s, axis=-1)
    ok &= norm_n > 1e-8
    norm_n_safe = np.where(ok, norm_n, 1.0)
    n_n = Nn_s / norm_n_safe[..., None]
    d_n = Dn_s / norm_n_safe
    ok &= d_n > mv.min_plane_dist
    d_n_safe = np.where(ok, d_n, 1.0)

    H_nr = plane_homography(nbr_cam, ref_cam, n_n, d_n_safe)
    back, back_cache = apply_homography(H_nr, q)
    err_vec = centers - back
    err2 = np.einsum("pc,pc->p", err_vec, err_vec)
    err = np.sqrt(np.maximum(err2, 1e-24))
    in_v = ok & (err <= mv.gate_px)

    # NCC patches
    offs = np.arange(-half, half + 1)
    pr = rows[:, None, None] + offs[None, :, None]  # (P, patch, 1)
    pc = cols[:, None, None] + offs[None, None, :]  # (P, 1, patch)
    a = ref_gray[pr, pc].reshape(rows.size, -1)
    grid = np.stack(
        [
            np.broadcast_to(pc, (rows.size, mv.patch, mv.patch)) + 0.5,
            np.broadcast_to(pr, (rows.size, mv.patch, mv.patch)) + 0.5,
        ],
        axis=-1,
    )
    warped, warp_cache = apply_homography(H_rn[:, None, None], grid)
    b, vb, b_cache = sample_image(nbr_gray, warped, method=mv.method)
    b = b.reshape(rows.size, -1)
    in_v &= vb.reshape(rows.size, -1).all(axis=1)

    count = int(in_v.sum())
    if count == 0:
        return 0.0, 0.0, 0, dict(count=0)

    n_px = a.shape[1]
    a_c = a - a.mean(axis=1, keepdims=True)
    b_c = b - b.mean(axis=1, keepdims=True)
    Sa = np.einsum("pi,pi->p", a_c, a_c)
    Sb = np.einsum("pi,pi->p", b_c, b_c)
    Sab = np.einsum("pi,pi->p", a_c, b_c)
    floor = n_px * mv.var_floor
    Sa_f = np.maximum(Sa, floor)
    Sb_f = np.maximum(Sb, floor)
    ncc = Sab / np.sqrt(Sa_f * Sb_f)

    l_ncc = float((1.0 - ncc)[in_v].sum() / count)
    l_geo = float(err[in_v].sum() / count)

    cache = dict(
        count=count, in_v=in_v, rows=rows, cols=cols, centers=centers,
        n_r=n_r, d_r=d_r_safe, norm_r=np.where(ok, norm_r, 1.0),
        n_n=n_n, d_n=d_n_safe, norm_n=norm_n_safe,
        q_cache=q_cache, nn_cache=nn_cache, dn_cache=dn_cache,
        back_cache=back_cache, err_vec=err_vec, err=err,
        a_c=a_c, b_c=b_c, Sa_f=Sa_f, Sb_f=Sb_f, Sab=Sab, ncc=ncc,
        Sb_floored=Sb <= floor,
        warp_cache=warp_cache, b_cache=b_cache, mv=mv,
        ref_cam=ref_cam, nbr_cam=nbr_cam, map_shape=ref_out.valid.shape,
        patch=mv.patch,
    )
    return l_ncc, l_geo, count, cache


def multiview_backward(cache, g_ncc: float = 1.0, g_geo: float = 1.0):
    """Adjoint of multiview_loss onto the four rendered maps.

    Returns dict with g_normal_ref, g_dist_ref (on the reference render) and
    g_normal_nbr, g_dist_nbr (on the neighbor render). The valid set, the
    occlusion gate, and the orientation of all masks are constants.
    """
    H_img, W_img = cache["map_shape"]
    zeros = dict(
        g_normal_ref=np.zeros((H_img, W_img, 3)),
        g_dist_ref=np.zeros((H_img, W_img)),
        g_normal_nbr=np.zeros((H_img, W_img, 3)),
        g_dist_nbr=np.zeros((H_img, W_img)),
    )
    if cache["count"] == 0:
        return zeros
    in_v = cache["in_v"]
    count = cache["count"]
    sel = in_v.astype(np.float64)

    # ---- geo: err = |centers - back|
    w_geo = g_geo / count
    g_err = w_geo * sel
    g_back = -g_err[:, None] * cache["err_vec"] / cache["err"][:, None]
    gH_nr, g_q_geo = apply_homography_backward(cache["back_cache"], g_back)

    # ---- ncc: through b samples -> warped positions -> H_rn
    w_ncc = g_ncc / count
    a_c, b_c = cache["a_c"], cache["b_c"]
    Sa_f, Sb_f, Sab, ncc = cache["Sa_f"], cache["Sb_f"], cache["Sab"], cache["ncc"]
    g_ncc_per = -(w_ncc * sel)  # d(1-ncc)/dncc = -1
    inv_sqrt = 1.0 / np.sqrt(Sa_f * Sb_f)
    term2_scale = np.where(cache["Sb_floored"], 0.0, Sab / (np.sqrt(Sa_f) * Sb_f**1.5))
    g_b = g_ncc_per[:, None] * (inv_sqrt[:, None] * a_c - term2_scale[:, None] * b_c)
    P, patch = g_b.shape[0], cache["patch"]
    g_pos_b, _ = sample_image_backward(
        cache["b_cache"], g_b.reshape(P, patch, patch)
    )
    gH_rn_ncc, _ = apply_homography_backward(cache["warp_cache"], g_pos_b)
    gH_rn = gH_rn_ncc.sum(axis=(1, 2))

    # ---- neighbor plane params: H_nr <- (n_n, d_n) <- sampled maps at q
    g_n_n, g_d_n = plane_homography_backward(
        cache["nbr_cam"], cache["ref_cam"], cache["n_n"], cache["d_n"], gH_nr
    )
    norm_n = cache["norm_n"]
    n_n = cache["n_n"]
    gdot = np.einsum("pc,pc->p", g_n_n, n_n)
    g_Nn_s = (g_n_n - gdot[:, None] * n_n) / norm_n[:, None]
    g_Nn_s += (-g_d_n * cache["d_n"] / norm_n)[:, None] * n_n
    g_Dn_s = g_d_n / norm_n
    g_Nn_s *= sel[:, None]
    g_Dn_s *= sel

    g_pos_nn, g_map_nn = sample_image_backward(
        cache["nn_cache"], g_Nn_s, want_image_grad=True
    )
    g_pos_dn, g_map_dn = sample_image_backward(
        cache["dn_cache"], g_Dn_s, want_image_grad=True
    )

    # ---- warped center q: from geo back-map, both plane samples
    g_q = g_q_geo + g_pos_nn + g_pos_dn
    gH_rn_q, _ = apply_homography_backward(cache["q_cache"], g_q)
    gH_rn = gH_rn + gH_rn_q

    # ---- reference plane params
    g_n_r, g_d_r = plane_homography_backward(
        cache["ref_cam"], cache["nbr_cam"], cache["n_r"], cache["d_r"], gH_rn
    )
    # masks: geo grads already gated; ncc grads gated; but H_rn also feeds
    # gated-out centers through zero upstream, so gate here once more
    g_n_r *= sel[:, None]
    g_d_r *= sel
    norm_r = cache["norm_r"]
    n_r = cache["n_r"]
    gdot_r = np.einsum("pc,pc->p", g_n_r, n_r)
    g_Nr = (g_n_r - gdot_r[:, None] * n_r) / norm_r[:, None]
    g_Nr += (-g_d_r * cache["d_r"] / norm_r)[:, None] * n_r
    g_Dr = g_d_r / norm_r

    out = zeros
    rows, cols = cache["rows"], cache["cols"]
    np.add.at(out["g_normal_ref"], (rows, cols), g_Nr)
    np.add.at(out["g_dist_ref"], (rows, cols), g_Dr)
    out["g_normal_nbr"] += g_map_nn
    out["g_dist_nbr"] += g_map_dn
    return out


def ncc_reference_check(a, b, var_floor: float = 1e-8):
    """Batched NCC next to a per-row np.corrcoef oracle, for tests.

    Returns (vectorized, oracle); rows with variance under the floor are
    computed with the floored denominator in both.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n_px = a.shape[1]
    a_c = a - a.mean(axis=1, keepdims=True)
    b_c = b - b.mean(axis=1, keepdims=True)
    Sa = np.maximum(np.einsum("pi,pi->p", a_c, a_c), n_px * var_floor)
    Sb = np.maximum(np.einsum("pi,pi->p", b_c, b_c), n_px * var_floor)
    mine = np.einsum("pi,pi->p", a_c, b_c) / np.sqrt(Sa * Sb)
    oracle = np.empty(a.shape[0])
    for i in range(a.shape[0]):
        sa = max(a_c[i] @ a_c[i], n_px * var_floor)
        sb = max(b_c[i] @ b_c[i], n_px * var_floor)
        if sa > n_px * var_floor and sb > n_px * var_floor:
            oracle[i] = np.corrcoef(a[i], b[i])[0, 1]
        else:
            oracle[i] = (a_c[i] @ b_c[i]) / np.sqrt(sa * sb)
    return mine, oracle


# ---------------------------------------------------------------------------
# Total loss assembly


@dataclass
class LossWeights:
    lam: float = 0.2
    lambda1: float = 0.008
    lambda2: float = 100.0
    u_floor: float = 0.01


@dataclass
class LossReport:
    stage: int
    l_rgb: float = 0.0
    l_u: float = 0.0
    l_s: float = 0.0
    l_ncc: float = 0.0
    l_geo: float = 0.0
    total: float = 0.0
    n_rgb: int = 0
    n_u: int = 0
    n_mv: int = 0
    active: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "stage": self.stage,
            "l_rgb": self.l_rgb,
            "l_u": self.l_u,
            "l_s": self.l_s,
            "l_ncc": self.l_ncc,
            "l_geo": self.l_geo,
            "total": self.total,
            "n_rgb": self.n_rgb,
            "n_u": self.n_u,
            "n_mv": self.n_mv,
        }


def stage_flags(stage: int) -> dict:
    """Which terms contribute at a given training stage."""
    if stage not in (1, 2, 3):
        raise ValueError(f"stage must be 1, 2, or 3, got {stage}")
    mv = stage >= 2
    return dict(rgb=True, scale=True, nll=mv, mv=mv, ugnr=stage >= 3)


def total_loss(
    stage: int,
    l_rgb: float,
    l_s: float,
    l_u: float = 0.0,
    l_ncc: float = 0.0,
    l_geo: float = 0.0,
    weights: LossWeights | None = None,
    counts=(0, 0, 0),
) -> LossReport:
    """Stage-gated weighted sum. Stage 1: rgb + lambda2 * scale; stages 2-3
    add lambda1 * nll and the multi-view pair. Stage 3 differs only in which
    normal estimate feeds the NLL upstream, not in the formula.
    """
    w = weights or LossWeights()
    flags = stage_flags(stage)
    total = l_rgb + w.lambda2 * l_s
    if flags["mv"]:
        total += w.lambda1 * l_u + l_ncc + l_geo
    return LossReport(
        stage=stage,
        l_rgb=l_rgb,
        l_u=l_u if flags["nll"] else 0.0,
        l_s=l_s,
        l_ncc=l_ncc if flags["mv"] else 0.0,
        l_geo=l_geo if flags["mv"] else 0.0,
        total=float(total),
        n_rgb=counts[0],
        n_u=counts[1],
        n_mv=counts[2],
        active=flags,
    )
