"""Tile-based forward rasterizer producing all per-pixel maps.

Compositing is front-to-back over Gaussians sorted by view depth (stable
sort). Per pixel:

    alpha_hat_i = min(alpha_clamp, alpha_i * G(x | mean2d_i, cov2d_i))
    T_i        = prod_{j<i} (1 - alpha_hat_j)

and every map is sum_i T_i alpha_hat_i * attr_i. Attributes per Gaussian are
RGB color, camera-frame plane normal, plane distance d_i, CMF-weighted
distance d_i * w(u_i), and uncertainty u_i. The depth maps divide the
composited distances by (-N_r . K^-1 p~) where N_r is the RAW composited
normal; the compositing mass cancels in that quotient, which is what makes
the depth unbiased (exact ray-plane intersection for a single planar
Gaussian at any coverage).

The math is identical in render() and render_oracle(); the oracle skips the
tiling/binning machinery and loops over all Gaussians per pixel. Both run
f64 internally. Gates (alpha_min, the termination threshold) are part of the
output's definition and are applied identically in both paths; the bounding
radius used for binning is derived from alpha_min so it can never exclude a
contribution the gate would have kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .projection import ProjectedGaussians, project_gaussians
from .scene import Camera, GaussianSet
from .utils import SH_C0, sigmoid


class CmfKind(str, Enum):
    """Confidence modulation functions mapping uncertainty to a depth weight."""

    QUADRATIC = "quadratic"  # w = 1 - 0.5 u^2
    EXP_NEG2 = "exp_neg2"  # w = exp(-2u)
    POW_TENTH = "pow_tenth"  # w = (1 - u)^0.1
    NONE = "none"  # w = 1


def cmf(u, kind: CmfKind):
    """Depth-compositing weight w(u) in (0, 1] for u in [0, 1]."""
    u = np.asarray(u, dtype=np.float64)
    kind = CmfKind(kind)
    if kind is CmfKind.QUADRATIC:
        return 1.0 - 0.5 * u * u
    if kind is CmfKind.EXP_NEG2:
        return np.exp(-2.0 * u)
    if kind is CmfKind.POW_TENTH:
        return (1.0 - u) ** 0.1
    return np.ones_like(u)


def cmf_grad(u, kind: CmfKind):
    """dw/du. Quadratic has the linear gradient -u that keeps updates stable."""
    u = np.asarray(u, dtype=np.float64)
    kind = CmfKind(kind)
    if kind is CmfKind.QUADRATIC:
        return -u
    if kind is CmfKind.EXP_NEG2:
        return -2.0 * np.exp(-2.0 * u)
    if kind is CmfKind.POW_TENTH:
        return -0.1 * (1.0 - u) ** (0.1 - 1.0)
    return np.zeros_like(u)


@dataclass
class RenderConfig:
    tile: int = 16
    near: float = 0.01
    dilation: float = 0.3
    alpha_min: float = 1.0 / 255.0
    alpha_clamp: float = 0.99
    term_threshold: float = 1e-4
    bbox_sigma: float | None = None  # footprint multiple when alpha_min == 0
    den_eps: float = 1e-6
    t_valid_max: float = 0.99  # pixels with T above this are background
    cmf: CmfKind = CmfKind.QUADRATIC
    divide_cmf_depth: bool = True
    stop_grad_denominator: bool = False
    background: tuple = (0.0, 0.0, 0.0)

    @staticmethod
    def for_gradcheck(**overrides) -> "RenderConfig":
        """Config without hard gates, for finite-difference verification.

        alpha_min = 0 and termination off remove the discontinuities that
        central differences would otherwise straddle; the footprint widens so
        binning stays exhaustive on micro scenes.
        """
        cfg = RenderConfig(alpha_min=0.0, term_threshold=0.0, bbox_sigma=8.0)
        return replace(cfg, **overrides)


@dataclass
class TileRecord:
    """Per-tile contributor list retained for the backward pass.

    rows: indices into the ProjectedGaussians arrays. ahat: (K, P) effective
    alphas after the alpha_min gate, the 0.99 clamp, and termination zeroing;
    P runs over the tile's pixels row-major. T_i is recomputable from ahat by
    an exclusive cumprod, so it is not stored.
    """

    y0: int
    y1: int
    x0: int
    x1: int
    rows: np.ndarray
    ahat: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray  # (H,W,3)
    normal: np.ndarray  # (H,W,3) raw composited camera-frame normal
    dist: np.ndarray  # (H,W) composited plane distance
    depth: np.ndarray  # (H,W) unbiased depth D
    depth_u: np.ndarray  # (H,W) CMF-weighted depth D_u
    unc: np.ndarray  # (H,W) composited uncertainty U
    trans: np.ndarray  # (H,W) final transmittance T
    valid: np.ndarray  # (H,W) bool, depth/normal validity
    den: np.ndarray  # (H,W) depth denominator -(N_r . K^-1 p~)
    dist_w: np.ndarray  # (H,W) composited d_i * w_i (D_u numerator)
    cam: Camera = None
    cfg: RenderConfig = None
    pg: ProjectedGaussians = None
    attrs: np.ndarray = None  # (M,9) per-Gaussian composited attributes
    attr_cache: dict = field(default_factory=dict)
    tiles: list = field(default_factory=list)
    n_gaussians: int = 0

    def normal_unit(self, eps: float = 1e-12):
        """Unit rendered normal where valid; zeros elsewhere."""
        norm = np.linalg.norm(self.normal, axis=2, keepdims=True)
        unit = self.normal / np.maximum(norm, eps)
        return np.where(self.valid[..., None], unit, 0.0)


NUM_ATTRS = 9  # rgb(3) + normal(3) + dist + dist*w + u


def build_attributes(gaussians: GaussianSet, pg: ProjectedGaussians, kind: CmfKind):
    """Per-projected-Gaussian composited attributes and backward caches."""
    raw = SH_C0 * gaussians.colors_dc[pg.idx] + 0.5
    colors = np.clip(raw, 0.0, 1.0)
    color_gate = (raw > 0.0) & (raw < 1.0)
    u = sigmoid(gaussians.uncertainty_logits[pg.idx])
    w = cmf(u, kind)
    attrs = np.empty((len(pg), NUM_ATTRS), dtype=np.float64)
    attrs[:, 0:3] = colors
    attrs[:, 3:6] = pg.normal_cam
    attrs[:, 6] = pg.plane_d
    attrs[:, 7] = pg.plane_d * w
    attrs[:, 8] = u
    cache = {
        "color_gate": color_gate,
        "u": u,
        "w": w,
        "alpha": sigmoid(gaussians.opacity_logits[pg.idx]),
    }
    return attrs, cache


def _composite_block(pg, attrs, alphas, rows, ys, xs, cfg):
    """Front-to-back compositing of Gaussians `rows` over a pixel block.

    rows must already be in ascending depth order. Returns (maps (P, 9),
    T_final (P,), ahat_eff (K, P), kept_rows) with P = len(ys)*len(xs).
    """
    px = xs[None, :].repeat(len(ys), axis=0).ravel() + 0.5
    py = ys[:, None].repeat(len(xs), axis=1).ravel() + 0.5
    if len(rows) == 0:
        P = px.shape[0]
        return (
            np.zeros((P, NUM_ATTRS)),
            np.ones(P),
            np.zeros((0, P)),
            rows,
        )
    dx = px[None, :] - pg.mean2d[rows, 0][:, None]
    dy = py[None, :] - pg.mean2d[rows, 1][:, None]
    A = pg.conic[rows, 0][:, None]
    B = pg.conic[rows, 1][:, None]
    C = pg.conic[rows, 2][:, None]
    q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
    G = np.exp(-0.5 * q)
    ahat = np.minimum(alphas[rows][:, None] * G, cfg.alpha_clamp)
    if cfg.alpha_min > 0:
        ahat[ahat < cfg.alpha_min] = 0.0
    # Exclusive transmittance before each contributor, then termination:
    # a contributor is dead once the transmittance ahead of it fell below
    # the threshold. Post-termination alphas are zeroed so the stored record
    # alone reproduces the compositing state.
    one_m = 1.0 - ahat
    T_excl = np.cumprod(one_m, axis=0)
    T_excl = np.vstack([np.ones((1, T_excl.shape[1])), T_excl[:-1]])
    if cfg.term_threshold > 0:
        ahat = np.where(T_excl >= cfg.term_threshold, ahat, 0.0)
    weights = T_excl * ahat
    maps = weights.T @ attrs[rows]
    T_fin = np.prod(1.0 - ahat, axis=0)
    kept = np.any(ahat > 0, axis=1)
    return maps, T_fin, ahat[kept], rows[kept]


def _finalize(maps9, T_fin, cam, cfg, shape):
    H, W = shape
    color = maps9[..., 0:3] + T_fin[..., None] * np.asarray(cfg.background)
    normal = maps9[..., 3:6]
    dist = maps9[..., 6]
    dist_w = maps9[..., 7]
    unc = maps9[..., 8]
    rays = cam.pixel_rays()
    den = -np.einsum("hwc,hwc->hw", normal, rays)
    valid = (T_fin <= cfg.t_valid_max) & (np.abs(den) >= cfg.den_eps)
    safe_den = np.where(valid, den, 1.0)
    depth = np.where(valid, dist / safe_den, 0.0)
    if cfg.divide_cmf_depth:
        depth_u = np.where(valid, dist_w / safe_den, 0.0)
    else:
        depth_u = np.where(valid, dist_w, 0.0)
    return color, normal, dist, dist_w, unc, den, valid, depth, depth_u


def _empty_output(cam, cfg, record):
    H, W = cam.height, cam.width
    maps9 = np.zeros((H, W, NUM_ATTRS))
    T = np.ones((H, W))
    color, normal, dist, dist_w, unc, den, valid, depth, depth_u = _finalize(
        maps9, T, cam, cfg, (H, W)
    )
    return RenderOutput(
        color=color, normal=normal, dist=dist, depth=depth, depth_u=depth_u,
        unc=unc, trans=T, valid=valid, den=den, dist_w=dist_w, cam=cam, cfg=cfg,
        pg=None, attrs=np.zeros((0, NUM_ATTRS)), tiles=[], n_gaussians=0,
    )


def render(
    gaussians: GaussianSet,
    cam: Camera,
    cfg: RenderConfig | None = None,
    record: bool = True,
) -> RenderOutput:
    """Tiled forward render of all per-pixel maps.

    With record=True the per-tile contributor lists needed by the backward
    pass are retained on the output.
    """
    cfg = cfg or RenderConfig()
    pg = project_gaussians(
        gaussians, cam,
        near=cfg.near, dilation=cfg.dilation,
        alpha_min=cfg.alpha_min, bbox_sigma=cfg.bbox_sigma,
    )
    if len(pg) == 0:
        return _empty_output(cam, cfg, record)
    attrs, cache = build_attributes(gaussians, pg, cfg.cmf)
    alphas = cache["alpha"]

    H, W, tile = cam.height, cam.width, cfg.tile
    ny, nx = -(-H // tile), -(-W // tile)
    order = np.argsort(pg.depth_z, kind="stable")

    # Tile rects per Gaussian (in depth order) from the footprint radius.
    mx, my, r = pg.mean2d[order, 0], pg.mean2d[order, 1], pg.radius[order]
    tx0 = np.clip(np.floor((mx - r) / tile).astype(int), 0, nx - 1)
    tx1 = np.clip(np.floor((mx + r) / tile).astype(int), 0, nx - 1)
    ty0 = np.clip(np.floor((my - r) / tile).astype(int), 0, ny - 1)
    ty1 = np.clip(np.floor((my + r) / tile).astype(int), 0, ny - 1)
    pair_tiles, pair_rank = [], []
    max_sy = int((ty1 - ty0).max()) + 1
    max_sx = int((tx1 - tx0).max()) + 1
    ranks = np.arange(order.shape[0])
    for oy in range(max_sy):
        yy = ty0 + oy
        my_ok = yy <= ty1
        for ox in range(max_sx):
            xx = tx0 + ox
            ok = my_ok & (xx <= tx1)
            if not np.any(ok):
                continue
            pair_tiles.append(yy[ok] * nx + xx[ok])
            pair_rank.append(ranks[ok])
    pair_tiles = np.concatenate(pair_tiles)
    pair_rank = np.concatenate(pair_rank)
    srt = np.lexsort((pair_rank, pair_tiles))
    pair_tiles, pair_rank = pair_tiles[srt], pair_rank[srt]
    bounds = np.searchsorted(pair_tiles, np.arange(ny * nx + 1))

    maps9 = np.zeros((H, W, NUM_ATTRS))
    T_fin = np.ones((H, W))
    tiles = []
    for ti in range(ny * nx):
        lo, hi = bounds[ti], bounds[ti + 1]
        if lo == hi:
            continue
        rows = order[pair_rank[lo:hi]]
        ty, tx = divmod(ti, nx)
        y0, y1 = ty * tile, min((ty + 1) * tile, H)
        x0, x1 = tx * tile, min((tx + 1) * tile, W)
        ys = np.arange(y0, y1, dtype=np.float64)
        xs = np.arange(x0, x1, dtype=np.float64)
        m, t, ahat_eff, kept_rows = _composite_block(
            pg, attrs, alphas, rows, ys, xs, cfg
        )
        maps9[y0:y1, x0:x1] = m.reshape(y1 - y0, x1 - x0, NUM_ATTRS)
        T_fin[y0:y1, x0:x1] = t.reshape(y1 - y0, x1 - x0)
        if record and len(kept_rows):
            tiles.append(TileRecord(y0, y1, x0, x1, kept_rows, ahat_eff))

    color, normal, dist, dist_w, unc, den, valid, depth, depth_u = _finalize(
        maps9, T_fin, cam, cfg, (H, W)
    )
    return RenderOutput(
        color=color, normal=normal, dist=dist, depth=depth, depth_u=depth_u,
        unc=unc, trans=T_fin, valid=valid, den=den, dist_w=dist_w,
        cam=cam, cfg=cfg, pg=pg, attrs=attrs, attr_cache=cache, tiles=tiles,
        n_gaussians=len(gaussians),
    )


def render_oracle(
    gaussians: GaussianSet, cam: Camera, cfg: RenderConfig | None = None
) -> RenderOutput:
    """Brute-force reference: every projected Gaussian against every pixel.

    No tiling, no footprint binning; same compositing definition and gates
    as render(). Used as the equivalence oracle in tests.
    """
    cfg = cfg or RenderConfig()
    pg = project_gaussians(
        gaussians, cam,
        near=cfg.near, dilation=cfg.dilation,
        alpha_min=cfg.alpha_min, bbox_sigma=np.inf,
    )
    if len(pg) == 0:
        return _empty_output(cam, cfg, False)
    attrs, cache = build_attributes(gaussians, pg, cfg.cmf)
    H, W = cam.height, cam.width
    order = np.argsort(pg.depth_z, kind="stable")
    maps9 = np.zeros((H, W, NUM_ATTRS))
    T_fin = np.ones((H, W))
    # Row-by-row to bound memory; compositing is per pixel so any block
    # partition gives identical results.
    for y in range(H):
        ys = np.arange(y, y + 1, dtype=np.float64)
        xs = np.arange(W, dtype=np.float64)
        m, t, _, _ = _composite_block(pg, attrs, cache["alpha"], order, ys, xs, cfg)
        maps9[y] = m.reshape(W, NUM_ATTRS)
        T_fin[y] = t
    color, normal, dist, dist_w, unc, den, valid, depth, depth_u = _finalize(
        maps9, T_fin, cam, cfg, (H, W)
    )
    return RenderOutput(
        color=color, normal=normal, dist=dist, depth=depth, depth_u=depth_u,
        unc=unc, trans=T_fin, valid=valid, den=den, dist_w=dist_w,
        cam=cam, cfg=cfg, pg=pg, attrs=attrs, attr_cache=cache, tiles=[],
        n_gaussians=len(gaussians),
    )
