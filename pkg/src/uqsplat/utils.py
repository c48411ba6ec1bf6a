"""Small numeric helpers shared across the package."""

from __future__ import annotations

import json

import numpy as np

# Degree-0 spherical harmonics basis constant. Stored color coefficients are
# converted to displayable RGB as clip(SH_C0 * dc + 0.5, 0, 1).
SH_C0 = 0.28209479177387814


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def normalize_rows(v, eps: float = 0.0):
    """Rows of v scaled to unit norm. eps > 0 guards empty directions."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if eps > 0:
        n = np.maximum(n, eps)
    return v / n


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Unit quaternions (..., 4), scalar first, to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_quat_partials(q):
    """dR/dq for unit quaternions: returns (..., 4, 3, 3).

    Partials are taken w.r.t. the (already normalized) quaternion components;
    chain through the normalization Jacobian separately when q is a free
    parameter.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)
    D = np.empty(q.shape[:-1] + (4, 3, 3), dtype=np.float64)
    # dR/dw
    D[..., 0, 0, 0] = zero
    D[..., 0, 0, 1] = -2 * z
    D[..., 0, 0, 2] = 2 * y
    D[..., 0, 1, 0] = 2 * z
    D[..., 0, 1, 1] = zero
    D[..., 0, 1, 2] = -2 * x
    D[..., 0, 2, 0] = -2 * y
    D[..., 0, 2, 1] = 2 * x
    D[..., 0, 2, 2] = zero
    # dR/dx
    D[..., 1, 0, 0] = zero
    D[..., 1, 0, 1] = 2 * y
    D[..., 1, 0, 2] = 2 * z
    D[..., 1, 1, 0] = 2 * y
    D[..., 1, 1, 1] = -4 * x
    D[..., 1, 1, 2] = -2 * w
    D[..., 1, 2, 0] = 2 * z
    D[..., 1, 2, 1] = 2 * w
    D[..., 1, 2, 2] = -4 * x
    # dR/dy
    D[..., 2, 0, 0] = -4 * y
    D[..., 2, 0, 1] = 2 * x
    D[..., 2, 0, 2] = 2 * w
    D[..., 2, 1, 0] = 2 * x
    D[..., 2, 1, 1] = zero
    D[..., 2, 1, 2] = 2 * z
    D[..., 2, 2, 0] = -2 * w
    D[..., 2, 2, 1] = 2 * z
    D[..., 2, 2, 2] = -4 * y
    # dR/dz
    D[..., 3, 0, 0] = -4 * z
    D[..., 3, 0, 1] = -2 * w
    D[..., 3, 0, 2] = 2 * x
    D[..., 3, 1, 0] = 2 * w
    D[..., 3, 1, 1] = -4 * z
    D[..., 3, 1, 2] = 2 * y
    D[..., 3, 2, 0] = 2 * x
    D[..., 3, 2, 1] = 2 * y
    D[..., 3, 2, 2] = zero
    return D


def gaussian_kernel1d(size: int, sigma: float):
    half = (size - 1) / 2.0
    xs = np.arange(size, dtype=np.float64) - half
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def stable_json(obj) -> str:
    """Deterministic JSON text (sorted keys, no whitespace drift)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)
