"""Procedural test scenes with exact ground truth.

A plane, a sphere, or a sphere resting on a plane, textured procedurally and
viewed from a ring of cameras. Images, depth, normals and visibility come
from closed-form ray intersections, so every ground-truth value is exact to
floating point; nothing here touches the renderer. The same module handles
writing a scene to disk and reading it back (JSON index + PNG/PFM maps),
which is the native dataset format of the CLI.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imgio
from .scene import Camera, GaussianSet, Scene, init_from_points

KINDS = ("plane", "sphere", "plane_sphere")

# Hit labels per pixel.
BG, PLANE, SPHERE = 0, 1, 2

_LIGHT = np.array([0.35, -0.25, 0.9])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_COLOR_A = np.array([0.82, 0.52, 0.28])
_COLOR_B = np.array([0.30, 0.48, 0.72])


@dataclass(frozen=True)
class SynthSpec:
    """Everything needed to regenerate a scene deterministically."""

    kind: str = "plane_sphere"
    n_views: int = 10
    width: int = 96
    height: int = 96
    focal: float = 110.0
    ring_radius: float = 2.6
    ring_height: float = 1.8
    plane_z: float = 0.0
    plane_extent: float = 2.0
    sphere_center: tuple = (0.0, 0.0, 0.6)
    sphere_radius: float = 0.6
    seed: int = 0
    holdout: tuple = ()  # view indices excluded from training
    checker_period: float = 0.4
    noise_cells: int = 9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        bad = [i for i in self.holdout if not 0 <= i < self.n_views]
        if bad:
            raise ValueError(f"holdout indices out of range: {bad}")

    @property
    def has_plane(self) -> bool:
        return self.kind in ("plane", "plane_sphere")

    @property
    def has_sphere(self) -> bool:
        return self.kind in ("sphere", "plane_sphere")


def every_k(items, k: int):
    """Every k-th element starting from the first (32 views, k=4 -> 8)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return list(items)[::k]


def _value_noise(u, v, seed: int, cells: int):
    """Smooth [0,1] noise: bilinear lattice interpolation with a C1 fade."""
    rng = np.random.default_rng(seed)
    lattice = rng.uniform(0.0, 1.0, size=(cells + 1, cells + 1))
    gu = np.clip(u, 0.0, 1.0) * cells
    gv = np.clip(v, 0.0, 1.0) * cells
    i0 = np.minimum(gu.astype(int), cells - 1)
    j0 = np.minimum(gv.astype(int), cells - 1)
    fu = gu - i0
    fv = gv - j0
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    top = lattice[j0, i0] * (1 - fu) + lattice[j0, i0 + 1] * fu
    bot = lattice[j0 + 1, i0] * (1 - fu) + lattice[j0 + 1, i0 + 1] * fu
    return top * (1 - fv) + bot * fv


def shade(points, normals, spec: SynthSpec):
    """Albedo + fixed-light Lambert term at world points; view independent.

    points (...,3), normals (...,3) unit world normals. Returns (...,3) RGB.
    """
    p = np.asarray(points, dtype=np.float64)
    cells = (np.floor(p / spec.checker_period).sum(axis=-1) % 2).astype(np.float64)
    half = spec.plane_extent
    u = (p[..., 0] + half) / (2 * half)
    v = (p[..., 1] + half) / (2 * half)
    noise = _value_noise(u, v, spec.seed + 7, spec.noise_cells)
    albedo = cells[..., None] * _COLOR_A + (1 - cells[..., None]) * _COLOR_B
    albedo = albedo * (0.72 + 0.28 * noise[..., None])
    lambert = 0.55 + 0.45 * np.clip(np.asarray(normals) @ _LIGHT, 0.0, 1.0)
    return np.clip(albedo * lambert[..., None], 0.0, 1.0)


def ring_cameras(spec: SynthSpec):
    """n_views pinhole cameras on a horizontal ring, all fixating the object."""
    cx, cy = spec.width / 2.0, spec.height / 2.0
    K = np.array([[spec.focal, 0, cx], [0, spec.focal, cy], [0, 0, 1.0]])
    if spec.has_sphere:
        target = np.asarray(spec.sphere_center, dtype=np.float64)
    else:
        target = np.array([0.0, 0.0, spec.plane_z])
    cams = []
    for i in range(spec.n_views):
        ang = 2 * np.pi * i / spec.n_views
        eye = np.array(
            [
                target[0] + spec.ring_radius * np.cos(ang),
                target[1] + spec.ring_radius * np.sin(ang),
                spec.ring_height,
            ]
        )
        cams.append(
            Camera.look_at(
                eye, target, up=(0, 0, 1), K=K, width=spec.width,
                height=spec.height, name=f"view_{i:03d}",
            )
        )
    return cams


def trace_view(cam: Camera, spec: SynthSpec):
    """Exact ray intersections for one camera.

    Returns a dict with image (H,W,3), depth (H,W) camera z-depth, normal
    (H,W,3) camera-frame unit normals oriented toward the camera, vis (H,W)
    bool, label (H,W) int in {BG, PLANE, SPHERE}, point (H,W,3) world hits.
    Background pixels carry zeros.
    """
    dirs_c = cam.pixel_rays()  # z component is 1, so the ray parameter s
    dirs_w = dirs_c @ cam.R    # below IS the camera z-depth of the hit
    origin = cam.center

    h, w = cam.height, cam.width
    s_best = np.full((h, w), np.inf)
    label = np.zeros((h, w), dtype=np.int64)
    normal_w = np.zeros((h, w, 3))

    if spec.has_plane:
        dz = dirs_w[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (spec.plane_z - origin[2]) / dz
        p = origin + s[..., None] * dirs_w
        ok = (
            np.isfinite(s)
            & (s > 1e-9)
            & (np.abs(p[..., 0]) <= spec.plane_extent)
            & (np.abs(p[..., 1]) <= spec.plane_extent)
        )
        hit = ok & (s < s_best)
        s_best = np.where(hit, s, s_best)
        label = np.where(hit, PLANE, label)
        plane_n = np.array([0.0, 0.0, 1.0 if origin[2] > spec.plane_z else -1.0])
        normal_w = np.where(hit[..., None], plane_n, normal_w)

    if spec.has_sphere:
        c = np.asarray(spec.sphere_center, dtype=np.float64)
        r = spec.sphere_radius
        oc = origin - c
        a = np.sum(dirs_w * dirs_w, axis=-1)
        b = 2.0 * dirs_w @ oc
        disc = b * b - 4 * a * (oc @ oc - r * r)
        ok = disc > 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s = (-b - sq) / (2 * a)  # near root; cameras sit outside the sphere
        ok &= s > 1e-9
        hit = ok & (s < s_best)
        s_best = np.where(hit, s, s_best)
        label = np.where(hit, SPHERE, label)
        p = origin + s[..., None] * dirs_w
        sn = (p - c) / r
        normal_w = np.where(hit[..., None], sn, normal_w)

    vis = label != BG
    s_best = np.where(vis, s_best, 0.0)
    points = origin + s_best[..., None] * dirs_w
    image = np.zeros((h, w, 3))
    image[vis] = shade(points[vis], normal_w[vis], spec)
    normal_c = normal_w @ cam.R.T
    normal_c[~vis] = 0.0
    return {
        "image": image,
        "depth": s_best,
        "normal": normal_c,
        "vis": vis,
        "label": label,
        "point": np.where(vis[..., None], points, 0.0),
    }


@dataclass
class SyntheticScene:
    """All views of one generated scene plus their exact ground truth."""

    spec: SynthSpec
    cameras: list
    images: list
    depths: list
    normals: list  # camera-frame unit normals per view
    vis: list
    labels: list
    points: list = field(repr=False, default_factory=list)

    @staticmethod
    def generate(spec: SynthSpec) -> "SyntheticScene":
        cams = ring_cameras(spec)
        views = [trace_view(c, spec) for c in cams]
        return SyntheticScene(
            spec=spec,
            cameras=cams,
            images=[v["image"] for v in views],
            depths=[v["depth"] for v in views],
            normals=[v["normal"] for v in views],
            vis=[v["vis"] for v in views],
            labels=[v["label"] for v in views],
            points=[v["point"] for v in views],
        )

    def train_indices(self):
        held = set(self.spec.holdout)
        return [i for i in range(self.spec.n_views) if i not in held]

    def init_gaussians(self, stride: int = 5, max_points: int = 4000) -> GaussianSet:
        """Seed Gaussians from subsampled GT surface points of training views."""
        pts, cols = [], []
        for i in self.train_indices():
            m = self.vis[i][::stride, ::stride]
            pts.append(self.points[i][::stride, ::stride][m])
            cols.append(self.images[i][::stride, ::stride][m])
        pts = np.concatenate(pts)
        cols = np.concatenate(cols)
        if len(pts) > max_points:
            keep = np.random.default_rng(self.spec.seed).choice(
                len(pts), size=max_points, replace=False
            )
            keep.sort()
            pts, cols = pts[keep], cols[keep]
        return init_from_points(pts, cols)

    def to_scene(self, stride: int = 5) -> Scene:
        """Training Scene: train cameras/images and GT-seeded Gaussians."""
        idx = self.train_indices()
        return Scene(
            gaussians=self.init_gaussians(stride=stride),
            cameras=[self.cameras[i] for i in idx],
            images=[self.images[i] for i in idx],
        )

    def holdout_views(self):
        return [
            (self.cameras[i], self.images[i], self.depths[i], self.vis[i])
            for i in self.spec.holdout
        ]


def select_views(ss: SyntheticScene, indices) -> SyntheticScene:
    """Sub-scene keeping the given view indices; holdout marks survive."""
    indices = list(indices)
    remap = {old: new for new, old in enumerate(indices)}
    holdout = tuple(remap[i] for i in ss.spec.holdout if i in remap)
    spec = replace(ss.spec, n_views=len(indices), holdout=holdout)
    pick = lambda xs: [xs[i] for i in indices]
    return SyntheticScene(
        spec=spec, cameras=pick(ss.cameras), images=pick(ss.images),
        depths=pick(ss.depths), normals=pick(ss.normals), vis=pick(ss.vis),
        labels=pick(ss.labels), points=pick(ss.points),
    )


def scene_bbox(spec: SynthSpec, pad_frac: float = 0.1):
    """Axis-aligned box around the analytic surfaces, padded per edge.

    The padding leaves room for the TSDF truncation band so the zero
    crossing never touches the volume boundary.
    """
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    if spec.has_plane:
        e = spec.plane_extent
        lo = np.minimum(lo, [-e, -e, spec.plane_z])
        hi = np.maximum(hi, [e, e, spec.plane_z])
    if spec.has_sphere:
        c = np.asarray(spec.sphere_center, dtype=np.float64)
        lo = np.minimum(lo, c - spec.sphere_radius)
        hi = np.maximum(hi, c + spec.sphere_radius)
    pad = pad_frac * float(np.max(hi - lo))
    return lo - pad, hi + pad


def surface_points(spec: SynthSpec, n: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted samples of the analytic surface, (n,3)."""
    rng = np.random.default_rng(seed)
    areas = []
    if spec.has_plane:
        areas.append(("plane", (2 * spec.plane_extent) ** 2))
    if spec.has_sphere:
        areas.append(("sphere", 4 * np.pi * spec.sphere_radius**2))
    total = sum(a for _, a in areas)
    parts = []
    for name, area in areas:
        m = int(round(n * area / total))
        if name == "plane":
            xy = rng.uniform(-spec.plane_extent, spec.plane_extent, size=(m, 2))
            parts.append(np.column_stack([xy, np.full(m, spec.plane_z)]))
        else:
            d = rng.normal(size=(m, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            parts.append(np.asarray(spec.sphere_center) + spec.sphere_radius * d)
    pts = np.concatenate(parts)
    # shuffle so any truncated prefix is still an unbiased surface sample
    return pts[rng.permutation(len(pts))][:n]


def observed_surface_points(
    ss: SyntheticScene, views, n: int, seed: int = 0, depth_tol: float = 0.01
) -> np.ndarray:
    """Analytic surface samples visible in at least one of the given views.

    A sample counts as observed when it projects inside some view and the GT
    depth at that pixel matches its camera z within depth_tol (relative):
    occluded plane patches behind the sphere and the far hemisphere drop out.
    Oversamples until n observed points are collected.
    """
    out = []
    got = 0
    for round_i in range(12):
        cand = surface_points(ss.spec, max(4 * n, 1000), seed=seed + 101 * round_i)
        seen = np.zeros(len(cand), dtype=bool)
        for vi in views:
            cam = ss.cameras[vi]
            uv, z = cam.project_points(cand)
            iu = np.floor(uv[:, 0]).astype(int)
            iv = np.floor(uv[:, 1]).astype(int)
            inb = (
                (z > 0)
                & (iu >= 0) & (iu < cam.width)
                & (iv >= 0) & (iv < cam.height)
            )
            iu_c = np.clip(iu, 0, cam.width - 1)
            iv_c = np.clip(iv, 0, cam.height - 1)
            gt = ss.depths[vi][iv_c, iu_c]
            vis = ss.vis[vi][iv_c, iu_c]
            seen |= inb & vis & (np.abs(gt - z) <= depth_tol * np.maximum(gt, 1e-9))
        out.append(cand[seen])
        got += int(seen.sum())
        if got >= n:
            break
    if got == 0:
        raise ValueError("no surface point is observed by the given views")
    return np.concatenate(out)[:n]


def occlusion_boundary_mask(label, width_px: int = 2):
    """Plane pixels within width_px of the sphere silhouette, and the interior.

    Returns (boundary, interior): boundary selects plane pixels no more than
    width_px from a sphere pixel; interior selects plane pixels strictly
    farther than 2 * width_px (a guard band in between belongs to neither).
    """
    sphere = label == SPHERE
    plane = label == PLANE
    if not sphere.any():
        return np.zeros_like(plane), plane
    near = ndimage.binary_dilation(sphere, iterations=width_px)
    far = ndimage.binary_dilation(sphere, iterations=2 * width_px)
    return plane & near, plane & ~far


def depth_mae(depth, gt_depth, mask) -> float:
    """Mean absolute depth error over mask pixels."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        return 0.0
    return float(np.mean(np.abs(depth[m] - gt_depth[m])))


# ---------------------------------------------------------------------------
# On-disk format: scene.json next to images/ and gt/ directories.

FORMAT_TAG = "uqsplat-scene-v1"


def write_scene(ss: SyntheticScene, out_dir) -> Path:
    """Write images, GT maps and the JSON index; returns the JSON path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(exist_ok=True)
    cams = []
    for i, cam in enumerate(ss.cameras):
        stem = f"{i:03d}"
        imgio.write_png(out / "images" / f"{stem}.png", ss.images[i])
        imgio.write_pfm(out / "gt" / f"depth_{stem}.pfm", ss.depths[i])
        imgio.write_pfm(out / "gt" / f"normal_{stem}.pfm", ss.normals[i])
        imgio.write_png(out / "gt" / f"vis_{stem}.png", ss.vis[i].astype(np.float64))
        cams.append(
            {
                "name": cam.name,
                "width": cam.width,
                "height": cam.height,
                "K": cam.K.tolist(),
                "R": cam.R.tolist(),
                "t": cam.t.tolist(),
                "image": f"images/{stem}.png",
                "gt_depth": f"gt/depth_{stem}.pfm",
                "gt_normal": f"gt/normal_{stem}.pfm",
                "gt_vis": f"gt/vis_{stem}.png",
            }
        )
    init = ss.init_gaussians()
    init.save_ply(out / "init.ply")
    doc = {
        "format": FORMAT_TAG,
        "kind": ss.spec.kind,
        "spec": {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in vars(ss.spec).items()
        },
        "cameras": cams,
        "train": ss.train_indices(),
        "holdout": list(ss.spec.holdout),
        "init_ply": "init.ply",
    }
    path = out / "scene.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


@dataclass
class LoadedScene:
    """A dataset read back from scene.json."""

    cameras: list
    images: list
    train: list
    holdout: list
    gaussians: GaussianSet
    gt_depths: list | None = None
    gt_vis: list | None = None
    spec: SynthSpec | None = None  # present for generated scenes

    def train_scene(self) -> Scene:
        return Scene(
            gaussians=self.gaussians,
            cameras=[self.cameras[i] for i in self.train],
            images=[self.images[i] for i in self.train],
        )

    def as_synthetic(self) -> SyntheticScene:
        """View the dataset as a SyntheticScene (GT maps required)."""
        if self.spec is None or self.gt_depths is None:
            raise ValueError("dataset lacks generator spec or ground truth")
        return SyntheticScene(
            spec=self.spec, cameras=self.cameras, images=self.images,
            depths=self.gt_depths, normals=[], vis=self.gt_vis, labels=[],
        )


def load_scene(json_path, load_gt: bool = True) -> LoadedScene:
    """Read a scene.json dataset; raises ValueError on malformed input."""
    path = Path(json_path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValueError(f"cannot read scene index {path}: {e}") from e
    if doc.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: unknown scene format {doc.get('format')!r}")
    root = path.parent
    cams, images, depths, vis = [], [], [], []
    for i, c in enumerate(doc["cameras"]):
        try:
            cams.append(
                Camera(
                    K=np.asarray(c["K"], dtype=np.float64),
                    R=np.asarray(c["R"], dtype=np.float64),
                    t=np.asarray(c["t"], dtype=np.float64),
                    width=int(c["width"]),
                    height=int(c["height"]),
                    name=c.get("name", f"view_{i:03d}"),
                )
            )
            images.append(imgio.read_png(root / c["image"]))
        except (KeyError, OSError) as e:
            raise ValueError(f"{path}: camera {i}: {e}") from e
        if load_gt and "gt_depth" in c:
            depths.append(imgio.read_pfm(root / c["gt_depth"]))
            vis.append(imgio.read_png(root / c["gt_vis"]) > 0.5)
    gaussians = GaussianSet.load_ply(root / doc["init_ply"])
    spec = None
    if isinstance(doc.get("spec"), dict):
        try:
            spec = SynthSpec(
                **{
                    k: tuple(v) if isinstance(v, list) else v
                    for k, v in doc["spec"].items()
                }
            )
        except (TypeError, ValueError):
            spec = None  # foreign or stale spec block; GT maps still usable
    n = len(cams)
    return LoadedScene(
        cameras=cams,
        images=images,
        train=[i for i in doc.get("train", list(range(n))) if 0 <= i < n],
        holdout=list(doc.get("holdout", [])),
        gaussians=gaussians,
        gt_depths=depths or None,
        gt_vis=vis or None,
        spec=spec,
    )


def preset(name: str, seed: int = 0, **overrides) -> SynthSpec:
    """Named scene recipes used by tests and the CLI."""
    table = {
        "plane": SynthSpec(kind="plane", n_views=6, ring_height=2.2, seed=seed),
        "sphere": SynthSpec(kind="sphere", n_views=8, seed=seed),
        "plane_sphere": SynthSpec(
            kind="plane_sphere", n_views=10, holdout=(3, 8), seed=seed
        ),
    }
    if name not in table:
        raise ValueError(f"unknown preset {name!r}; have {sorted(table)}")
    return replace(table[name], **overrides)
