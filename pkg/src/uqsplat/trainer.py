"""Three-stage Adam training loop with AbsGS densification and pruning.

Stage 1 fits photometry and planarity; stage 2 adds the uncertainty NLL and
the multi-view NCC/geometric pair; stage 3 switches the depth-to-normal
estimator to its uncertainty-weighted form. Densification runs during stages
1-2 on accumulated absolute screen-space positional gradients.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .gradients import GradientSet, backward_step
from .losses import LossWeights, MultiViewConfig, rgb_loss, rgb_loss_backward
from .rasterizer import CmfKind, RenderConfig
from .scene import GaussianSet, Scene, build_adjacency, scene_extent
from .utils import quat_normalize, stable_json

PARAM_NAMES = (
    "means", "quats", "log_scales", "opacity_logits", "colors_dc",
    "uncertainty_logits",
)


@dataclass
class TrainConfig:
    iterations: int = 3000
    stage1_end: int | None = None  # default: iterations / 2
    stage2_end: int | None = None  # default: 2 iterations / 3
    preset: str = "default"  # "dtu" moves stage 2 earlier (8/30 of total)

    lr_means: float = 1.6e-4  # x scene extent, exponentially decayed
    lr_means_final: float = 1.6e-6
    lr_quats: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_uncertainty: float = 2.5e-3
    lr_exposure: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15

    lam: float = 0.2
    lambda1: float = 0.008
    lambda2: float = 100.0

    densify_interval: int = 100
    densify_warmup: int = 300
    densify_grad_threshold: float = 4e-4
    densify_stages: int = 2  # densify while stage <= this; 0 disables
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    prune_scale_frac: float = 0.1

    cmf: str = "quadratic"
    mv_patch: int = 11
    mv_stride: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    adjacency_k: int = 2
    checkpoint_every: int = 0  # 0: only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        ratio1, ratio2 = (0.5, 2.0 / 3.0)
        if self.preset == "dtu":
            ratio1 = 8.0 / 30.0
        elif self.preset != "default":
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.stage1_end is None:
            self.stage1_end = int(round(self.iterations * ratio1))
        if self.stage2_end is None:
            self.stage2_end = int(round(self.iterations * ratio2))
        CmfKind(self.cmf)
        if not (0 < self.stage1_end < self.stage2_end <= self.iterations):
            raise ValueError("need 0 < stage1_end < stage2_end <= iterations")
        if self.densify_stages not in (0, 1, 2):
            raise ValueError("densify_stages must be 0, 1 or 2")
        for f in fields(self):
            if f.name.startswith("lr_") and getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")

    def stage(self, step: int) -> int:
        """Training stage for a 1-based step index."""
        if step <= self.stage1_end:
            return 1
        if step <= self.stage2_end:
            return 2
        return 3

    def weights(self) -> LossWeights:
        return LossWeights(lam=self.lam, lambda1=self.lambda1, lambda2=self.lambda2)

    def render_config(self) -> RenderConfig:
        return RenderConfig(cmf=CmfKind(self.cmf), background=tuple(self.background))

    def mv_config(self) -> MultiViewConfig:
        return MultiViewConfig(patch=self.mv_patch, stride=self.mv_stride)

    def to_json(self) -> str:
        d = asdict(self)
        d["background"] = list(self.background)
        return stable_json(d)

    @staticmethod
    def from_json(text: str) -> "TrainConfig":
        d = json.loads(text)
        if "background" in d:
            d["background"] = tuple(d["background"])
        return TrainConfig(**d)


class OptimizerState:
    """Adam moments per parameter class, resized in lockstep with the scene."""

    def __init__(self, gaussians: GaussianSet, n_images: int):
        self.step = 0
        self.m = {n: np.zeros_like(getattr(gaussians, n)) for n in PARAM_NAMES}
        self.v = {n: np.zeros_like(getattr(gaussians, n)) for n in PARAM_NAMES}
        self.m["exposure"] = np.zeros((n_images, 2))
        self.v["exposure"] = np.zeros((n_images, 2))

    def keep_and_extend(self, keep: np.ndarray, n_new: int):
        """Drop moments of removed Gaussians, zero-init the appended ones."""
        for n in PARAM_NAMES:
            for d in (self.m, self.v):
                kept = d[n][keep]
                pad = np.zeros((n_new,) + kept.shape[1:], dtype=kept.dtype)
                d[n] = np.concatenate([kept, pad], axis=0)

    def lengths_match(self, gaussians: GaussianSet) -> bool:
        return all(
            self.m[n].shape[0] == len(gaussians) and self.v[n].shape[0] == len(gaussians)
            for n in PARAM_NAMES
        )


def adam_step(param, grad, m, v, t: int, lr: float, b1: float, b2: float, eps: float):
    """One in-place Adam update; returns the updated parameter array."""
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return param


def means_lr(cfg: TrainConfig, extent: float, step: int) -> float:
    """Exponential decay from lr_means to lr_means_final over the run."""
    t = min(max(step / cfg.iterations, 0.0), 1.0)
    return extent * cfg.lr_means * (cfg.lr_means_final / cfg.lr_means) ** t


@dataclass
class DensifyStats:
    """Accumulated absolute NDC positional gradients between densify calls."""

    grad_sum: np.ndarray  # (N,) sum over steps of |per-pixel NDC grad| norms
    count: np.ndarray  # (N,) steps the Gaussian was visible in

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(np.zeros(n), np.zeros(n))

    def update(self, grads: GradientSet):
        vis = grads.visible
        self.grad_sum[vis] += np.linalg.norm(grads.absgrad[vis], axis=1)
        self.count[vis] += 1

    def mean(self) -> np.ndarray:
        return self.grad_sum / np.maximum(self.count, 1)


def densify_and_prune(
    gaussians: GaussianSet,
    stats: DensifyStats,
    opt: OptimizerState,
    extent: float,
    cfg: TrainConfig,
):
    """AbsGS split/clone plus opacity and size pruning.

    Over-threshold Gaussians are split when their largest scale exceeds
    percent_dense x extent (children at +-0.5 sigma along that axis, scales
    / 1.6) and cloned verbatim otherwise. Pruning removes near-transparent
    or oversized Gaussians. Returns (gaussians, stats, info dict); optimizer
    moments follow the survivors, children start at zero.
    """
    n = len(gaussians)
    over = stats.mean() > cfg.densify_grad_threshold
    smax = gaussians.scales.max(axis=1)
    big = smax > cfg.percent_dense * extent
    split_mask = over & big
    clone_mask = over & ~big

    prune = (gaussians.opacities < cfg.prune_opacity) | (
        smax > cfg.prune_scale_frac * extent
    )
    prune &= ~split_mask  # splits already consume their parent

    children = []
    if split_mask.any():
        parents = gaussians.select(np.flatnonzero(split_mask))
        R = parents.rotmats()
        a = np.argmax(parents.scales, axis=1)
        axis_dir = R[np.arange(len(parents)), :, a]
        offset = 0.5 * parents.scales[np.arange(len(parents)), a]
        for sgn in (+1.0, -1.0):
            child = parents.copy()
            child.means = parents.means + sgn * offset[:, None] * axis_dir
            child.log_scales = parents.log_scales - np.log(1.6)
            children.append(child)
    if clone_mask.any():
        children.append(gaussians.select(np.flatnonzero(clone_mask)))

    keep = ~(prune | split_mask)
    keep_idx = np.flatnonzero(keep)
    parts = [gaussians.select(keep_idx)]
    n_new = 0
    if children:
        new = GaussianSet.concatenate(children)
        n_new = len(new)
        parts.append(new)
    out = GaussianSet.concatenate(parts) if len(parts) > 1 else parts[0]

    opt.keep_and_extend(keep, n_new)
    info = {
        "n_before": n,
        "n_after": len(out),
        "n_split": int(split_mask.sum()),
        "n_clone": int(clone_mask.sum()),
        "n_pruned": int(prune.sum()),
    }
    return out, DensifyStats.zeros(len(out)), info


def fit_exposure(rendered, target, m: float = 0.0, b: float = 0.0, lr: float = 1e-3,
                 lam: float = 0.2):
    """One exposure gradient step for an image pair; (m, b) unchanged when
    the SSIM bypass gate is closed."""
    _, cache = rgb_loss(rendered, target, m, b, lam)
    _, g_m, g_b = rgb_loss_backward(cache)
    return m - lr * g_m, b - lr * g_b


class DivergenceError(RuntimeError):
    pass


def train(
    scene: Scene,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
    callback=None,
):
    """Optimize the scene in place; returns (scene, list of log rows).

    Cameras are visited in seeded shuffled epochs; in stages 2-3 each step
    also renders one sampled adjacent view for the multi-view terms. Aborts
    with DivergenceError after 3 consecutive non-finite losses.
    """
    if scene.images is None or len(scene.images) < 2:
        raise ValueError("training needs at least 2 posed images")
    images = [np.asarray(im, dtype=np.float64) for im in scene.images]
    grays = [im.mean(axis=2) for im in images]
    if scene.adjacency is None:
        scene.adjacency = build_adjacency(scene.cameras, cfg.adjacency_k, symmetric=True)

    rng = np.random.default_rng(cfg.seed)
    extent = scene_extent(scene.cameras)
    weights = cfg.weights()
    render_cfg = cfg.render_config()
    mv_cfg = cfg.mv_config()
    opt = OptimizerState(scene.gaussians, len(scene.cameras))
    stats = DensifyStats.zeros(len(scene.gaussians))
    log: list = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path is not None else None

    lr_static = {
        "quats": cfg.lr_quats,
        "log_scales": cfg.lr_scales,
        "opacity_logits": cfg.lr_opacity,
        "colors_dc": cfg.lr_color,
        "uncertainty_logits": cfg.lr_uncertainty,
    }

    order = np.array([], dtype=int)
    bad_streak = 0
    try:
        for step in range(1, cfg.iterations + 1):
            if order.size == 0:
                order = rng.permutation(len(scene.cameras))
            cam_i = int(order[0])
            order = order[1:]
            stage = cfg.stage(step)
            nbr_i = None
            if stage >= 2:
                nbrs = scene.adjacency[cam_i]
                nbr_i = int(nbrs[rng.integers(len(nbrs))])

            res = backward_step(
                scene.gaussians, scene.cameras, images, cam_i, nbr_i, stage,
                exposure=scene.exposure, weights=weights,
                render_cfg=render_cfg, mv_cfg=mv_cfg, grays=grays,
            )
            report = res.report

            if not np.isfinite(report.total):
                bad_streak += 1
                if bad_streak >= 3:
                    raise DivergenceError(
                        f"loss non-finite for {bad_streak} consecutive steps at {step}"
                    )
            else:
                bad_streak = 0
                opt.step = step
                lrs = dict(lr_static, means=means_lr(cfg, extent, step))
                for name in PARAM_NAMES:
                    adam_step(
                        getattr(scene.gaussians, name), getattr(res.grads, name),
                        opt.m[name], opt.v[name], step, lrs[name],
                        cfg.beta1, cfg.beta2, cfg.adam_eps,
                    )
                adam_step(
                    scene.exposure, res.grads.exposure,
                    opt.m["exposure"], opt.v["exposure"], step, cfg.lr_exposure,
                    cfg.beta1, cfg.beta2, cfg.adam_eps,
                )
                scene.gaussians.quats = quat_normalize(scene.gaussians.quats)
                stats.update(res.grads)

            dinfo = None
            if (
                stage <= cfg.densify_stages
                and step >= cfg.densify_warmup
                and step % cfg.densify_interval == 0
                and step < cfg.iterations
            ):
                scene.gaussians, stats, dinfo = densify_and_prune(
                    scene.gaussians, stats, opt, extent, cfg
                )
                assert opt.lengths_match(scene.gaussians)

            row = dict(step=step, cam=cam_i, n_gaussians=len(scene.gaussians),
                       **report.row())
            if dinfo is not None:
                row.update({f"densify_{k}": v for k, v in dinfo.items()})
            log.append(row)
            if log_file is not None:
                log_file.write(stable_json(row) + "\n")
            if callback is not None:
                callback(step, scene, row)
            if out_dir is not None and (
                step == cfg.iterations
                or (cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0)
            ):
                save_checkpoint(scene, out_dir, step, cfg)
    finally:
        if log_file is not None:
            log_file.close()
    return scene, log


def save_checkpoint(scene: Scene, out_dir: str | Path, step: int, cfg: TrainConfig | None = None):
    """Write gaussians_{step}.ply plus a state JSON next to it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ply = out_dir / f"gaussians_{step:06d}.ply"
    scene.gaussians.save_ply(ply)
    state = {
        "step": step,
        "n_gaussians": len(scene.gaussians),
        "exposure": [[float(x) for x in row] for row in scene.exposure],
    }
    if cfg is not None:
        state["config"] = json.loads(cfg.to_json())
    (out_dir / f"state_{step:06d}.json").write_text(stable_json(state))
    return ply
