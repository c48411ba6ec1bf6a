"""Optimizable Gaussian primitives, cameras, and the scene container.

Parameter storage keeps every constraint by construction: scales live as logs,
opacity and uncertainty as logits, color as a degree-0 SH coefficient. The
quaternion is renormalized by the trainer after each step and normalized on
read everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .utils import SH_C0, inv_sigmoid, quat_normalize, quat_to_rotmat, sigmoid

PARAM_NAMES = (
    "means",
    "quats",
    "log_scales",
    "opacity_logits",
    "colors_dc",
    "uncertainty_logits",
)


@dataclass
class GaussianSet:
    """Structure-of-arrays collection of planar Gaussians.

    means: (N,3) world centers. quats: (N,4) scalar-first rotations.
    log_scales: (N,3). opacity_logits, uncertainty_logits: (N,).
    colors_dc: (N,3) SH degree-0 coefficients.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors_dc: np.ndarray
    uncertainty_logits: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.quats = np.atleast_2d(np.asarray(self.quats, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.opacity_logits = np.atleast_1d(
            np.asarray(self.opacity_logits, dtype=np.float64)
        )
        self.colors_dc = np.atleast_2d(np.asarray(self.colors_dc, dtype=np.float64))
        self.uncertainty_logits = np.atleast_1d(
            np.asarray(self.uncertainty_logits, dtype=np.float64)
        )
        n = self.means.shape[0]
        if self.means.shape != (n, 3):
            raise ValueError(f"means must be (N,3), got {self.means.shape}")
        if self.quats.shape != (n, 4):
            raise ValueError(f"quats must be (N,4), got {self.quats.shape}")
        if self.log_scales.shape != (n, 3):
            raise ValueError(f"log_scales must be (N,3), got {self.log_scales.shape}")
        if self.opacity_logits.shape != (n,):
            raise ValueError("opacity_logits must be (N,)")
        if self.colors_dc.shape != (n, 3):
            raise ValueError("colors_dc must be (N,3)")
        if self.uncertainty_logits.shape != (n,):
            raise ValueError("uncertainty_logits must be (N,)")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")

    def __len__(self) -> int:
        return self.means.shape[0]

    # Derived quantities -------------------------------------------------

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def uncertainties(self):
        return sigmoid(self.uncertainty_logits)

    @property
    def colors(self):
        """Displayable RGB in [0,1]."""
        return np.clip(SH_C0 * self.colors_dc + 0.5, 0.0, 1.0)

    def unit_quats(self):
        return quat_normalize(self.quats)

    def rotmats(self):
        return quat_to_rotmat(self.unit_quats())

    def covariances(self):
        """Sigma = R S S^T R^T, shape (N,3,3)."""
        R = self.rotmats()
        s2 = self.scales**2
        return np.einsum("nij,nj,nkj->nik", R, s2, R)

    def normal_axes(self):
        """Index of the smallest scale per Gaussian (ties: lowest axis)."""
        return np.argmin(self.scales, axis=1)

    def normals(self):
        """World-frame plane normals: the min-scale rotation column, unflipped.

        Orientation toward a camera happens at projection time.
        """
        R = self.rotmats()
        ax = self.normal_axes()
        return R[np.arange(len(self)), :, ax]

    # Structural ops ------------------------------------------------------

    def select(self, idx) -> "GaussianSet":
        return GaussianSet(*(getattr(self, name)[idx] for name in PARAM_NAMES))

    @staticmethod
    def concatenate(sets) -> "GaussianSet":
        sets = list(sets)
        return GaussianSet(
            *(
                np.concatenate([getattr(s, name) for s in sets], axis=0)
                for name in PARAM_NAMES
            )
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(*(getattr(self, name).copy() for name in PARAM_NAMES))

    def param_arrays(self) -> dict:
        """The optimizable leaves, keyed by parameter-class name."""
        return {name: getattr(self, name) for name in PARAM_NAMES}

    # Serialization -------------------------------------------------------

    PLY_PROPS = (
        "x",
        "y",
        "z",
        "f_dc_0",
        "f_dc_1",
        "f_dc_2",
        "opacity",
        "scale_0",
        "scale_1",
        "scale_2",
        "rot_0",
        "rot_1",
        "rot_2",
        "rot_3",
        "uncertainty",
    )

    def save_ply(self, path) -> None:
        """Binary little-endian PLY, one float32 vertex per Gaussian.

        Layout matches common 3DGS checkpoints (scales stored as logs, opacity
        as a logit) plus an extra uncertainty property (logit).
        """
        n = len(self)
        cols = np.column_stack(
            [
                self.means,
                self.colors_dc,
                self.opacity_logits,
                self.log_scales,
                self.quats,
                self.uncertainty_logits,
            ]
        ).astype("<f4")
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        header += [f"property float {p}" for p in self.PLY_PROPS]
        header.append("end_header")
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(cols.tobytes())

    @staticmethod
    def load_ply(path) -> "GaussianSet":
        with open(path, "rb") as f:
            props, count, data = _read_ply_vertices(f)
        missing = [p for p in GaussianSet.PLY_PROPS if p not in props]
        if missing:
            raise ValueError(f"PLY missing Gaussian properties: {missing}")
        col = {p: data[p].astype(np.float64) for p in GaussianSet.PLY_PROPS}
        return GaussianSet(
            means=np.column_stack([col["x"], col["y"], col["z"]]),
            quats=np.column_stack([col[f"rot_{i}"] for i in range(4)]),
            log_scales=np.column_stack([col[f"scale_{i}"] for i in range(3)]),
            opacity_logits=col["opacity"],
            colors_dc=np.column_stack([col[f"f_dc_{i}"] for i in range(3)]),
            uncertainty_logits=col["uncertainty"],
        )


_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "int": "<i4",
    "int32": "<i4",
}


def _read_ply_vertices(f):
    magic = f.readline().strip()
    if magic != b"ply":
        raise ValueError("not a PLY file")
    fmt = f.readline().strip()
    if fmt != b"format binary_little_endian 1.0":
        raise ValueError(f"unsupported PLY format: {fmt.decode(errors='replace')}")
    props, count = [], None
    while True:
        line = f.readline()
        if not line:
            raise ValueError("unexpected end of PLY header")
        tok = line.strip().split()
        if not tok or tok[0] == b"comment":
            continue
        if tok[0] == b"element":
            if tok[1] != b"vertex":
                raise ValueError("only vertex elements supported")
            count = int(tok[2])
        elif tok[0] == b"property":
            props.append((tok[2].decode(), _PLY_DTYPES[tok[1].decode()]))
        elif tok[0] == b"end_header":
            break
    if count is None:
        raise ValueError("PLY header lacks a vertex element")
    dtype = np.dtype([(name, dt) for name, dt in props])
    data = np.frombuffer(f.read(count * dtype.itemsize), dtype=dtype, count=count)
    return [name for name, _ in props], count, data


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    K: (3,3) intrinsics with zero skew. R: (3,3), t: (3,) such that
    X_cam = R @ X_world + t. Continuous pixel coordinates put the center of
    pixel (row r, col c) at (c + 0.5, r + 0.5); that offset is applied here,
    at ray generation and projection, and nowhere else.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    name: str = ""

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("fx, fy must be positive")
        if abs(self.K[0, 1]) > 1e-12:
            raise ValueError("skew not supported")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError("R must be orthonormal")
        if np.linalg.det(self.R) < 0:
            raise ValueError("R must have det +1")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def fy(self):
        return self.K[1, 1]

    @property
    def cx(self):
        return self.K[0, 2]

    @property
    def cy(self):
        return self.K[1, 2]

    @property
    def center(self):
        """Camera center O_c in world coordinates."""
        return -self.R.T @ self.t

    def world_to_cam(self, X):
        X = np.asarray(X, dtype=np.float64)
        return X @ self.R.T + self.t

    def cam_to_world(self, Xc):
        Xc = np.asarray(Xc, dtype=np.float64)
        return (Xc - self.t) @ self.R

    def project_points(self, X):
        """World points (..., 3) to continuous pixel coords (..., 2) and depth."""
        Xc = self.world_to_cam(X)
        z = Xc[..., 2]
        u = self.fx * Xc[..., 0] / z + self.cx
        v = self.fy * Xc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def backproject(self, p):
        """K^{-1} p~ for continuous pixel coords p (..., 2); unnormalized."""
        p = np.asarray(p, dtype=np.float64)
        x = (p[..., 0] - self.cx) / self.fx
        y = (p[..., 1] - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def pixel_rays(self):
        """Camera-frame ray directions K^{-1} p~ at every pixel center, (H,W,3)."""
        us = np.arange(self.width, dtype=np.float64) + 0.5
        vs = np.arange(self.height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(us, vs)
        return self.backproject(np.stack([uu, vv], axis=-1))

    @staticmethod
    def look_at(eye, target, up, K, width, height, name="") -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        up = np.asarray(up, dtype=np.float64)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:
            raise ValueError("up is parallel to the view direction")
        right /= nr
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world coords
        return Camera(K=K, R=R, t=-R @ eye, width=width, height=height, name=name)


@dataclass
class Scene:
    """Cameras, their images, the Gaussian set, and multi-view adjacency."""

    gaussians: GaussianSet
    cameras: list
    images: list | None = None  # per-camera HxWx3 float arrays in [0,1], or None
    adjacency: list | None = None
    exposure: np.ndarray | None = None  # (n_cams, 2) rows (m_i, b_i)

    def __post_init__(self):
        if self.exposure is None:
            self.exposure = np.zeros((len(self.cameras), 2), dtype=np.float64)
        else:
            self.exposure = np.asarray(self.exposure, dtype=np.float64).reshape(
                len(self.cameras), 2
            )

    def extent(self) -> float:
        return scene_extent(self.cameras)


def scene_extent(cameras) -> float:
    """Radius of the camera rig: 1.1 x the max distance to the mean center."""
    centers = np.stack([c.center for c in cameras])
    d = np.linalg.norm(centers - centers.mean(axis=0), axis=1)
    return float(max(1.1 * d.max(), 1e-6))


def build_adjacency(cameras, k: int, min_baseline: float = 1e-6, symmetric: bool = False):
    """k nearest neighbor cameras by center distance, per camera.

    Near-duplicate poses (baseline < min_baseline) are never paired. Raises if
    any camera ends up with zero neighbors.
    """
    n = len(cameras)
    if n < 2:
        raise ValueError("adjacency needs at least 2 cameras")
    centers = np.stack([c.center for c in cameras])
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=2)
    adjacency = []
    for i in range(n):
        order = np.argsort(d[i], kind="stable")
        picks = [int(j) for j in order if j != i and d[i, j] >= min_baseline]
        adjacency.append(picks[:k])
    if symmetric:
        closed = [set(a) for a in adjacency]
        for i, a in enumerate(adjacency):
            for j in a:
                closed[j].add(i)
        adjacency = [sorted(s) for s in closed]
    for i, a in enumerate(adjacency):
        if not a:
            raise ValueError(f"camera {i} has no usable neighbors")
    return adjacency


def init_from_points(
    points,
    colors,
    opacity: float = 0.1,
    uncertainty: float = 0.5,
    rng: np.random.Generator | None = None,
) -> GaussianSet:
    """Seed a GaussianSet from a sparse point cloud.

    Isotropic scale per point = mean distance to its 3 nearest neighbors,
    identity rotations, uniform opacity and uncertainty. colors are RGB in
    [0,1] and are converted to dc coefficients.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise ValueError("need at least one point")
    kq = min(4, n)  # self + up to 3 neighbors
    dist, _ = cKDTree(points).query(points, k=kq)
    if kq > 1:
        mean_nn = dist[:, 1:].mean(axis=1)
        mean_nn = np.maximum(mean_nn, 1e-6)
    else:
        mean_nn = np.full(n, 0.1)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        means=points,
        quats=quats,
        log_scales=np.log(mean_nn)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(n, float(inv_sigmoid(opacity))),
        colors_dc=(np.clip(colors, 0.0, 1.0) - 0.5) / SH_C0,
        uncertainty_logits=np.full(n, float(inv_sigmoid(uncertainty))),
    )
