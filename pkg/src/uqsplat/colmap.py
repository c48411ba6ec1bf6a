"""COLMAP text model ingestion (cameras.txt, images.txt, points3D.txt).

Only the text export is handled, and only PINHOLE and SIMPLE_PINHOLE camera
models; distortion models are rejected rather than silently dropped. COLMAP
already stores world-to-camera rotations as w-first quaternions with
X_cam = R(q) X_world + t, matching this codebase's convention, so poses pass
through unchanged apart from quaternion normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio
from .scene import Camera, Scene, init_from_points
from .utils import quat_to_rotmat

SUPPORTED_MODELS = ("PINHOLE", "SIMPLE_PINHOLE")


class ColmapError(ValueError):
    """Malformed or unsupported COLMAP input; message carries file:line."""


def _fail(path, lineno, msg):
    raise ColmapError(f"{path}:{lineno}: {msg}")


def _data_lines(path):
    """Yield (lineno, tokens) for non-comment, non-blank lines."""
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split()


def _floats(path, lineno, tokens):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        _fail(path, lineno, f"expected numbers, got {tokens!r}")


@dataclass
class ColmapCamera:
    camera_id: int
    model: str
    width: int
    height: int
    params: list

    def K(self) -> np.ndarray:
        if self.model == "PINHOLE":
            fx, fy, cx, cy = self.params
        else:  # SIMPLE_PINHOLE
            f, cx, cy = self.params
            fx = fy = f
        return np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])


@dataclass
class ColmapImage:
    image_id: int
    qvec: np.ndarray  # (4,) w-first, normalized
    tvec: np.ndarray  # (3,)
    camera_id: int
    name: str
    xys: np.ndarray  # (M,2) observed keypoints
    point3d_ids: np.ndarray  # (M,) int, -1 where untriangulated


_PARAM_COUNT = {"PINHOLE": 4, "SIMPLE_PINHOLE": 3}


def read_cameras_txt(path) -> dict:
    cams = {}
    for lineno, tok in _data_lines(path):
        if len(tok) < 5:
            _fail(path, lineno, f"camera line needs >= 5 fields, got {len(tok)}")
        model = tok[1]
        if model not in SUPPORTED_MODELS:
            _fail(path, lineno, f"unsupported camera model {model!r} "
                                f"(supported: {', '.join(SUPPORTED_MODELS)})")
        try:
            cam_id = int(tok[0])
            width, height = int(tok[2]), int(tok[3])
        except ValueError:
            _fail(path, lineno, f"non-integer camera id or size in {tok[:4]!r}")
        params = _floats(path, lineno, tok[4:])
        if len(params) != _PARAM_COUNT[model]:
            _fail(path, lineno,
                  f"{model} takes {_PARAM_COUNT[model]} params, got {len(params)}")
        cams[cam_id] = ColmapCamera(cam_id, model, width, height, params)
    if not cams:
        raise ColmapError(f"{path}: no cameras found")
    return cams


def read_images_txt(path) -> list:
    """Parse image poses; every pose line is followed by its 2D-point line."""
    images = []
    expecting_points = False
    for lineno, tok in _data_lines(path):
        if expecting_points:
            # triples X Y POINT3D_ID; may be empty
            if len(tok) % 3 != 0:
                _fail(path, lineno, "points2D line length must be a multiple of 3")
            vals = _floats(path, lineno, tok)
            arr = np.asarray(vals, dtype=np.float64).reshape(-1, 3)
            images[-1].xys = arr[:, :2]
            images[-1].point3d_ids = arr[:, 2].astype(np.int64)
            expecting_points = False
            continue
        if len(tok) < 10:
            _fail(path, lineno, f"image line needs 10 fields, got {len(tok)}")
        try:
            image_id = int(tok[0])
            camera_id = int(tok[8])
        except ValueError:
            _fail(path, lineno, "non-integer image or camera id")
        q = np.asarray(_floats(path, lineno, tok[1:5]))
        t = np.asarray(_floats(path, lineno, tok[5:8]))
        norm = np.linalg.norm(q)
        if norm < 1e-12:
            _fail(path, lineno, "zero-norm quaternion")
        images.append(
            ColmapImage(
                image_id=image_id, qvec=q / norm, tvec=t, camera_id=camera_id,
                name=" ".join(tok[9:]),
                xys=np.zeros((0, 2)), point3d_ids=np.zeros(0, dtype=np.int64),
            )
        )
        expecting_points = True
    if expecting_points:
        raise ColmapError(f"{path}: file ends before the last points2D line")
    if not images:
        raise ColmapError(f"{path}: no images found")
    return images


def read_points3d_txt(path):
    """Returns (ids (N,), xyz (N,3), rgb (N,3) in [0,1])."""
    ids, xyz, rgb = [], [], []
    for lineno, tok in _data_lines(path):
        if len(tok) < 8:
            _fail(path, lineno, f"point line needs >= 8 fields, got {len(tok)}")
        try:
            ids.append(int(tok[0]))
        except ValueError:
            _fail(path, lineno, "non-integer point id")
        vals = _floats(path, lineno, tok[1:7])
        xyz.append(vals[:3])
        rgb.append(vals[3:6])
    if not ids:
        raise ColmapError(f"{path}: no points found")
    return (
        np.asarray(ids, dtype=np.int64),
        np.asarray(xyz, dtype=np.float64),
        np.asarray(rgb, dtype=np.float64) / 255.0,
    )


def load_colmap(model_dir, images_dir=None) -> Scene:
    """Build a Scene from a COLMAP text model directory.

    One Gaussian per sparse point (the init_from_points defaults: alpha 0.1,
    u 0.5, isotropic 3-NN scale). Cameras are ordered by image id. When
    images_dir is given, the referenced image files are loaded as training
    images; a missing file is a ColmapError.
    """
    model_dir = Path(model_dir)
    for fname in ("cameras.txt", "images.txt", "points3D.txt"):
        if not (model_dir / fname).exists():
            raise ColmapError(f"{model_dir}: missing {fname}")
    cams = read_cameras_txt(model_dir / "cameras.txt")
    images = sorted(read_images_txt(model_dir / "images.txt"), key=lambda im: im.image_id)
    _, xyz, rgb = read_points3d_txt(model_dir / "points3D.txt")

    cameras = []
    pixels = []
    for im in images:
        if im.camera_id not in cams:
            raise ColmapError(
                f"{model_dir / 'images.txt'}: image {im.image_id} references "
                f"unknown camera {im.camera_id}"
            )
        intr = cams[im.camera_id]
        R = quat_to_rotmat(im.qvec[None])[0]
        cameras.append(
            Camera(K=intr.K(), R=R, t=im.tvec.copy(), width=intr.width,
                   height=intr.height, name=im.name)
        )
        if images_dir is not None:
            p = Path(images_dir) / im.name
            if not p.exists():
                raise ColmapError(f"image file not found: {p}")
            pixels.append(imgio.read_png(p))
    return Scene(
        gaussians=init_from_points(xyz, rgb),
        cameras=cameras,
        images=pixels or None,
    )
