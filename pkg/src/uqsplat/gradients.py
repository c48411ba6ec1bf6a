"""Reverse-mode derivatives of the full forward graph, hand-written.

render_backward walks the compositing and projection chains for one render;
backward_step assembles the complete training objective (both renders in the
multi-view stages), returning a LossReport and a GradientSet. gradcheck
verifies everything against central differences; it is the oracle this whole
module answers to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import depth_to_normal, depth_to_normal_backward
from .losses import (
    LossWeights,
    MultiViewConfig,
    multiview_backward,
    multiview_loss,
    rgb_loss,
    rgb_loss_backward,
    scale_reg,
    scale_reg_backward,
    stage_flags,
    total_loss,
    uncertainty_nll,
    uncertainty_nll_backward,
)
from .rasterizer import RenderConfig, RenderOutput, cmf_grad, render
from .scene import GaussianSet
from .utils import SH_C0, rotmat_quat_partials

ALL_TERMS = frozenset({"rgb", "scale", "nll", "ncc", "geo"})


@dataclass
class GradientSet:
    """Gradients mirroring the GaussianSet parameter layout, plus exposure.

    absgrad accumulates the per-pixel |NDC positional gradient| sums used by
    densification; visible marks Gaussians that contributed to any render of
    the step (everything culled everywhere stays exactly zero).
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors_dc: np.ndarray
    uncertainty_logits: np.ndarray
    exposure: np.ndarray
    absgrad: np.ndarray
    visible: np.ndarray

    @staticmethod
    def zeros(n: int, n_images: int = 0) -> "GradientSet":
        return GradientSet(
            means=np.zeros((n, 3)),
            quats=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            colors_dc=np.zeros((n, 3)),
            uncertainty_logits=np.zeros(n),
            exposure=np.zeros((n_images, 2)),
            absgrad=np.zeros((n, 2)),
            visible=np.zeros(n, dtype=bool),
        )

    def add_(self, other: "GradientSet") -> "GradientSet":
        self.means += other.means
        self.quats += other.quats
        self.log_scales += other.log_scales
        self.opacity_logits += other.opacity_logits
        self.colors_dc += other.colors_dc
        self.uncertainty_logits += other.uncertainty_logits
        if other.exposure.size:
            self.exposure += other.exposure
        self.absgrad += other.absgrad
        self.visible |= other.visible
        return self

    def param_grads(self) -> dict:
        return {
            "means": self.means,
            "quats": self.quats,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "colors_dc": self.colors_dc,
            "uncertainty_logits": self.uncertainty_logits,
        }

    def finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.param_grads().values()) and bool(
            np.isfinite(self.exposure).all()
        )


def render_backward(
    gaussians: GaussianSet, out: RenderOutput, g_maps: dict, n_images: int = 0
) -> GradientSet:
    """Backpropagate map-level gradients through one recorded render.

    g_maps may contain color (H,W,3), normal (H,W,3), dist (H,W), dist_w
    (H,W), unc (H,W), t_fin (H,W); missing entries are zero. `normal` means
    the RAW composited normal map (any normalization or denominator chain is
    the caller's).
    """
    grads = GradientSet.zeros(len(gaussians), n_images)
    pg = out.pg
    if pg is None or len(pg) == 0:
        return grads
    if not out.tiles:
        raise ValueError("render was not recorded; pass record=True")
    H, W = out.trans.shape
    cfg = out.cfg

    g9 = np.zeros((H, W, 9))
    if (gc := g_maps.get("color")) is not None:
        g9[..., 0:3] = gc
    if (gn := g_maps.get("normal")) is not None:
        g9[..., 3:6] = gn
    if (gd := g_maps.get("dist")) is not None:
        g9[..., 6] = gd
    if (gw := g_maps.get("dist_w")) is not None:
        g9[..., 7] = gw
    if (gu := g_maps.get("unc")) is not None:
        g9[..., 8] = gu
    gT = np.zeros((H, W))
    if (gt := g_maps.get("t_fin")) is not None:
        gT += gt
    bg = np.asarray(cfg.background, dtype=np.float64)
    if gc is not None and bg.any():
        gT += g9[..., 0:3] @ bg

    M = len(pg)
    g_mean2d = np.zeros((M, 2))
    g_conic = np.zeros((M, 3))
    g_attr = np.zeros((M, 9))
    g_alpha = np.zeros(M)
    abs2d = np.zeros((M, 2))
    touched = np.zeros(M, dtype=bool)
    alphas = out.attr_cache["alpha"]

    for tr in out.tiles:
        rows, ahat = tr.rows, tr.ahat
        K, P = ahat.shape
        touched[rows] = True
        g9t = g9[tr.y0 : tr.y1, tr.x0 : tr.x1].reshape(P, 9)
        gTt = gT[tr.y0 : tr.y1, tr.x0 : tr.x1].ravel()
        if not (g9t.any() or gTt.any()):
            continue
        attrs_t = out.attrs[rows]
        e = attrs_t @ g9t.T  # (K,P)

        one_m = 1.0 - ahat
        T_excl = np.cumprod(one_m, axis=0)
        T_fin_t = T_excl[-1]
        T_excl = np.vstack([np.ones((1, P)), T_excl[:-1]])
        w = T_excl * ahat

        c = w * e
        suffix = c[::-1].cumsum(axis=0)[::-1] - c  # sum over later contributors
        g_ahat = T_excl * e - suffix / one_m - gTt[None, :] * T_fin_t[None, :] / one_m
        g_ahat = np.where((ahat > 0.0) & (ahat < cfg.alpha_clamp), g_ahat, 0.0)

        # ahat = alpha * G; alpha and q chains
        g_alpha[rows] += (g_ahat * ahat).sum(axis=1) / alphas[rows]
        g_q = -0.5 * ahat * g_ahat

        xs = np.arange(tr.x0, tr.x1, dtype=np.float64) + 0.5
        ys = np.arange(tr.y0, tr.y1, dtype=np.float64) + 0.5
        px = np.broadcast_to(xs[None, :], (len(ys), len(xs))).ravel()
        py = np.broadcast_to(ys[:, None], (len(ys), len(xs))).ravel()
        dx = px[None, :] - pg.mean2d[rows, 0][:, None]
        dy = py[None, :] - pg.mean2d[rows, 1][:, None]
        A = pg.conic[rows, 0][:, None]
        B = pg.conic[rows, 1][:, None]
        C = pg.conic[rows, 2][:, None]
        g_conic[rows, 0] += (g_q * dx * dx).sum(axis=1)
        g_conic[rows, 1] += 2.0 * (g_q * dx * dy).sum(axis=1)
        g_conic[rows, 2] += (g_q * dy * dy).sum(axis=1)
        gmx = -2.0 * g_q * (A * dx + B * dy)
        gmy = -2.0 * g_q * (B * dx + C * dy)
        g_mean2d[rows, 0] += gmx.sum(axis=1)
        g_mean2d[rows, 1] += gmy.sum(axis=1)
        abs2d[rows, 0] += np.abs(gmx).sum(axis=1)
        abs2d[rows, 1] += np.abs(gmy).sum(axis=1)

        g_attr[rows] += w @ g9t

    # ----- attribute chains (vectorized over projected Gaussians) -----
    cam = out.cam
    cache = out.attr_cache
    u, wu = cache["u"], cache["w"]

    g_raw_color = np.where(cache["color_gate"], g_attr[:, 0:3], 0.0)
    g_dc = SH_C0 * g_raw_color

    # normal_cam = R_wc n_world; dist = d; dist_w = d * w(u); unc = u
    g_n_world = g_attr[:, 3:6] @ cam.R
    g_d = g_attr[:, 6] + g_attr[:, 7] * wu
    g_u = g_attr[:, 7] * pg.plane_d * cmf_grad(u, cfg.cmf) + g_attr[:, 8]

    # d = (O_c - mu) . n_world
    to_cam = cam.center[None, :] - gaussians.means[pg.idx]
    g_means_m = -g_d[:, None] * pg.normal_world
    g_n_world = g_n_world + g_d[:, None] * to_cam

    # n_world = flip * R[:, axis]
    gR = np.zeros((M, 3, 3))
    ar = np.arange(M)
    gR[ar, :, pg.axes] = pg.flip[:, None] * g_n_world

    # conic = inv(cov2d): g_cov = -conic_mat @ Gm @ conic_mat
    Lam = np.empty((M, 2, 2))
    Lam[:, 0, 0] = pg.conic[:, 0]
    Lam[:, 0, 1] = Lam[:, 1, 0] = pg.conic[:, 1]
    Lam[:, 1, 1] = pg.conic[:, 2]
    Gm = np.empty((M, 2, 2))
    Gm[:, 0, 0] = g_conic[:, 0]
    Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * g_conic[:, 1]
    Gm[:, 1, 1] = g_conic[:, 2]
    g_cov = -np.einsum("nij,njk,nkl->nil", Lam, Gm, Lam)  # symmetric

    # cov2d = M2 Sigma M2^T + dilation I, M2 = J R_wc
    M2 = np.einsum("nij,jk->nik", pg.J, cam.R)
    Sig = np.einsum("nij,nj,nkj->nik", pg.R, pg.scales**2, pg.R)
    gM2 = 2.0 * np.einsum("nij,njk,nkl->nil", g_cov, M2, Sig)
    gSig = np.einsum("nji,njk,nkl->nil", M2, g_cov, M2)
    gSig = 0.5 * (gSig + np.swapaxes(gSig, 1, 2))

    # Sigma = R diag(s^2) R^T
    s2 = pg.scales**2
    PR = np.einsum("nij,njk->nik", gSig, pg.R)
    gR += 2.0 * PR * s2[:, None, :]
    g_log_s = 2.0 * s2 * np.einsum("nia,nij,nja->na", pg.R, gSig, pg.R)

    # J chains: M2 and the projected mean
    gJ = np.einsum("nij,kj->nik", gM2, cam.R)
    tx, ty, tz = pg.t_cam[:, 0], pg.t_cam[:, 1], pg.t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.einsum("nij,ni->nj", pg.J, g_mean2d)
    g_t[:, 0] += gJ[:, 0, 2] * (-fx / tz**2)
    g_t[:, 1] += gJ[:, 1, 2] * (-fy / tz**2)
    g_t[:, 2] += (
        gJ[:, 0, 0] * (-fx / tz**2)
        + gJ[:, 1, 1] * (-fy / tz**2)
        + gJ[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + gJ[:, 1, 2] * (2.0 * fy * ty / tz**3)
    )
    g_means_m = g_means_m + g_t @ cam.R

    # quaternion chain: through dR/dq_hat, then the normalization Jacobian
    dR = rotmat_quat_partials(pg.unit_quats)
    g_qhat = np.einsum("nqij,nij->nq", dR, gR)
    q_raw = gaussians.quats[pg.idx]
    q_norm = np.linalg.norm(q_raw, axis=1)
    qh = pg.unit_quats
    g_quat = (g_qhat - np.einsum("nq,nq->n", g_qhat, qh)[:, None] * qh) / q_norm[:, None]

    # opacity logit: alpha = sigmoid(o)
    g_opa = g_alpha * alphas * (1.0 - alphas)
    g_ulog = g_u * u * (1.0 - u)

    idx = pg.idx
    np.add.at(grads.means, idx, g_means_m)
    np.add.at(grads.quats, idx, g_quat)
    np.add.at(grads.log_scales, idx, g_log_s)
    np.add.at(grads.opacity_logits, idx, g_opa)
    np.add.at(grads.colors_dc, idx, g_dc)
    np.add.at(grads.uncertainty_logits, idx, g_ulog)
    # NDC units: mu_ndc = 2 mu_px / extent - 1
    np.add.at(grads.absgrad, idx, abs2d * np.array([W / 2.0, H / 2.0]))
    grads.visible[idx[touched]] = True
    return grads


def _unit_normal_backward(raw, valid, g_unit, eps: float = 1e-12):
    """Adjoint of raw -> raw/|raw| on valid pixels."""
    norm = np.maximum(np.linalg.norm(raw, axis=2, keepdims=True), eps)
    unit = raw / norm
    g = np.where(valid[..., None], g_unit, 0.0)
    gdot = np.einsum("hwc,hwc->hw", g, unit)
    return (g - gdot[..., None] * unit) / norm


@dataclass
class StepResult:
    report: "object"
    grads: GradientSet
    render_ref: RenderOutput
    render_nbr: RenderOutput | None = None
    aux: dict = field(default_factory=dict)


def backward_step(
    gaussians: GaussianSet,
    cameras,
    images,
    cam_i: int,
    nbr_i: int | None,
    stage: int,
    exposure=None,
    weights: LossWeights | None = None,
    render_cfg: RenderConfig | None = None,
    mv_cfg: MultiViewConfig | None = None,
    terms: frozenset | None = None,
    grays=None,
    compute_grads: bool = True,
):
    """Forward + backward for one training step on one camera.

    Stage 1 renders only cam_i; stages 2-3 also render nbr_i for the
    multi-view terms and the uncertainty NLL. Stage 3 turns on the
    uncertainty weighting inside the depth-to-normal estimator. `terms`
    restricts the objective to a subset (for gradcheck); it is intersected
    with what the stage allows.
    """
    weights = weights or LossWeights()
    render_cfg = render_cfg or RenderConfig()
    mv_cfg = mv_cfg or MultiViewConfig()
    flags = stage_flags(stage)
    active = set(terms if terms is not None else ALL_TERMS)
    if not flags["mv"]:
        active -= {"nll", "ncc", "geo"}
    if nbr_i is None:
        active -= {"ncc", "geo"}

    n_images = len(images)
    exposure = np.zeros((n_images, 2)) if exposure is None else np.asarray(exposure, dtype=np.float64)
    out_r = render(gaussians, cameras[cam_i], render_cfg, record=compute_grads)

    l_rgb = l_s = l_u = l_ncc = l_geo = 0.0
    rgb_cache = sr_cache = nll_cache = mv_cache = None
    nd = None
    out_n = None
    n_mv = 0

    if "rgb" in active:
        m_i, b_i = exposure[cam_i]
        l_rgb, rgb_cache = rgb_loss(out_r.color, images[cam_i], m_i, b_i, weights.lam)
    if "scale" in active:
        l_s, sr_cache = scale_reg(gaussians)

    need_nbr = bool(active & {"ncc", "geo"})
    if need_nbr:
        out_n = render(gaussians, cameras[nbr_i], render_cfg, record=compute_grads)

    if "nll" in active:
        nd = depth_to_normal(
            out_r.depth_u, out_r.unc, cameras[cam_i],
            weighted=flags["ugnr"], depth_valid=out_r.valid,
        )
        nll_valid = out_r.valid & nd.valid
        l_u, nll_cache = uncertainty_nll(
            out_r.normal_unit(), nd.n, out_r.unc, nll_valid, weights.u_floor
        )

    if need_nbr:
        if grays is None:
            gray_r = images[cam_i].mean(axis=2)
            gray_n = images[nbr_i].mean(axis=2)
        else:
            gray_r, gray_n = grays[cam_i], grays[nbr_i]
        l_ncc, l_geo, n_mv, mv_cache = multiview_loss(out_r, out_n, gray_r, gray_n, mv_cfg)
        if "ncc" not in active:
            l_ncc = 0.0
        if "geo" not in active:
            l_geo = 0.0

    n_u = nll_cache["M"] if (nll_cache and "M" in nll_cache) else 0
    report = total_loss(
        stage, l_rgb, l_s, l_u, l_ncc, l_geo, weights,
        counts=(out_r.color.size, n_u, n_mv),
    )
    if not compute_grads:
        return StepResult(report, GradientSet.zeros(len(gaussians), n_images), out_r, out_n)

    # ------------------------------ backward ------------------------------
    ref_maps: dict = {}
    nbr_maps: dict = {}
    grads = GradientSet.zeros(len(gaussians), n_images)

    if rgb_cache is not None:
        g_img, g_m, g_b = rgb_loss_backward(rgb_cache, 1.0)
        ref_maps["color"] = g_img
        grads.exposure[cam_i, 0] = g_m
        grads.exposure[cam_i, 1] = g_b
    if sr_cache is not None:
        grads.log_scales += scale_reg_backward(sr_cache, weights.lambda2)

    g_normal = np.zeros(out_r.normal.shape)
    g_dist_w = None
    g_unc = None
    if nll_cache is not None and nll_cache.get("M", 0) > 0:
        g_nr_unit, g_nd, g_unc_nll = uncertainty_nll_backward(nll_cache, weights.lambda1)
        g_normal += _unit_normal_backward(out_r.normal, out_r.valid, g_nr_unit)
        g_unc = g_unc_nll
        g_depth_u, g_unc_ugnr = depth_to_normal_backward(nd, g_nd)
        if flags["ugnr"]:
            g_unc = g_unc + g_unc_ugnr
        # depth_u = dist_w / den (or plain dist_w), den = -(normal . ray)
        gd = np.where(out_r.valid, g_depth_u, 0.0)
        if out_r.cfg.divide_cmf_depth:
            safe_den = np.where(out_r.valid, out_r.den, 1.0)
            g_dist_w = gd / safe_den
            if not out_r.cfg.stop_grad_denominator:
                g_den = -gd * out_r.dist_w / safe_den**2
                rays = cameras[cam_i].pixel_rays()
                g_normal += -g_den[..., None] * rays
        else:
            g_dist_w = gd

    if mv_cache is not None and mv_cache.get("count", 0) > 0:
        mvg = multiview_backward(
            mv_cache,
            g_ncc=1.0 if "ncc" in active else 0.0,
            g_geo=1.0 if "geo" in active else 0.0,
        )
        g_normal += mvg["g_normal_ref"]
        ref_maps["dist"] = mvg["g_dist_ref"]
        nbr_maps["normal"] = mvg["g_normal_nbr"]
        nbr_maps["dist"] = mvg["g_dist_nbr"]

    if g_normal.any():
        ref_maps["normal"] = g_normal
    if g_dist_w is not None:
        ref_maps["dist_w"] = g_dist_w
    if g_unc is not None:
        ref_maps["unc"] = g_unc

    if ref_maps:
        grads.add_(render_backward(gaussians, out_r, ref_maps, n_images))
    if nbr_maps and out_n is not None:
        grads.add_(render_backward(gaussians, out_n, nbr_maps, n_images))

    return StepResult(report, grads, out_r, out_n)


# ---------------------------------------------------------------------------
# finite-difference harness


PARAM_FIELDS = [
    ("means", 3),
    ("quats", 4),
    ("log_scales", 3),
    ("opacity_logits", 1),
    ("colors_dc", 3),
    ("uncertainty_logits", 1),
]


def _get_param(gaussians, name):
    return getattr(gaussians, name)


def gradcheck(
    gaussians: GaussianSet,
    cameras,
    images,
    cam_i: int = 0,
    nbr_i: int | None = None,
    stage: int = 2,
    exposure=None,
    weights: LossWeights | None = None,
    render_cfg: RenderConfig | None = None,
    mv_cfg: MultiViewConfig | None = None,
    terms: frozenset | None = None,
    h: float = 1e-4,
    tol: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict:
    """Central-difference check of backward_step over every scalar parameter.

    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8). Returns a
    JSON-ready report with the worst error per parameter class and overall.
    max_coords subsamples coordinates (seeded) for the expensive scenes.
    """
    render_cfg = render_cfg or RenderConfig.for_gradcheck()
    n_images = len(images)
    exposure = np.zeros((n_images, 2)) if exposure is None else np.asarray(exposure, dtype=np.float64)

    def run(g, expo, compute_grads):
        return backward_step(
            g, cameras, images, cam_i, nbr_i, stage,
            exposure=expo, weights=weights, render_cfg=render_cfg,
            mv_cfg=mv_cfg, terms=terms, compute_grads=compute_grads,
        )

    res = run(gaussians, exposure, True)
    analytic = res.grads

    coords = []
    for name, width in PARAM_FIELDS:
        arr = _get_param(gaussians, name)
        for flat in range(arr.size):
            coords.append((name, flat))
    for flat in range(exposure.size):
        coords.append(("exposure", flat))
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    per_class: dict = {}
    worst = 0.0
    worst_coord = None
    for name, flat in coords:
        if name == "exposure":
            ep = exposure.copy()
            ep.ravel()[flat] += h
            em = exposure.copy()
            em.ravel()[flat] -= h
            lp = run(gaussians, ep, False).report.total
            lm = run(gaussians, em, False).report.total
            a = analytic.exposure.ravel()[flat]
        else:
            gp = gaussians.copy()
            _get_param(gp, name).ravel()[flat] += h
            gm = gaussians.copy()
            _get_param(gm, name).ravel()[flat] -= h
            lp = run(gp, exposure, False).report.total
            lm = run(gm, exposure, False).report.total
            a = getattr(analytic, name).ravel()[flat]
        n = (lp - lm) / (2.0 * h)
        rel = abs(a - n) / max(abs(a), abs(n), 1e-8)
        cls = per_class.setdefault(name, {"max_rel_err": 0.0, "n": 0})
        cls["n"] += 1
        if rel > cls["max_rel_err"]:
            cls["max_rel_err"] = rel
        if rel > worst:
            worst = rel
            worst_coord = [name, int(flat), float(a), float(n)]

    return {
        "max_rel_err": float(worst),
        "tolerance": float(tol),
        "passed": bool(worst < tol),
        "h": float(h),
        "stage": stage,
        "terms": sorted(terms) if terms is not None else sorted(ALL_TERMS),
        "n_coords": len(coords),
        "worst": worst_coord,
        "per_class": {
            k: {"max_rel_err": float(v["max_rel_err"]), "n": v["n"]}
            for k, v in per_class.items()
        },
    }
