"""Image file formats and quality metrics.

PFM carries lossless float maps (depth, normals); PNG-8 is for color images
and masks, PNG-16 for viewer-friendly depth. All in-memory images are float64
arrays, color in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .losses import ssim as _ssim


def write_pfm(path, data):
    """Write a (H,W) or (H,W,3) float array as little-endian PFM."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM supports (H,W) or (H,W,3) arrays")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path):
    """Read a PFM file back into float64, (H,W) or (H,W,3)."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"not a PFM file: {path}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    data = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return np.flipud(data).astype(np.float64)


def write_png(path, img):
    """8-bit PNG from a float array in [0,1], gray or RGB."""
    arr = np.asarray(img, dtype=np.float64)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def read_png(path):
    """PNG to float64 in [0,1] (any bit depth Pillow can read)."""
    im = Image.open(path)
    arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype in (np.uint16, np.int32):
        return arr.astype(np.float64) / 65535.0
    return arr.astype(np.float64)


def write_png16(path, data, scale: float):
    """16-bit gray PNG; values are clipped to [0, scale] then quantized."""
    arr = np.clip(np.asarray(data, dtype=np.float64) / scale, 0.0, 1.0)
    u16 = np.round(arr * 65535.0).astype(np.uint16)
    Image.fromarray(u16).save(path)


def psnr(pred, target, cap: float = 100.0) -> float:
    """10 log10(1 / MSE) for [0,1] images; identical inputs report `cap`."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("psnr inputs must share a shape")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


def psnr_ssim(pred, target):
    """(PSNR dB, SSIM) for two [0,1] images of identical shape."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim == 2:
        p = p[..., None]
        t = t[..., None]
    return psnr(p, t), _ssim(p, t)[0]


def save_render_maps(out_dir, stem: str, out, depth_scale: float | None = None):
    """Write color/depth/normal/uncertainty maps for one RenderOutput."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_png(out_dir / f"{stem}_color.png", out.color)
    write_pfm(out_dir / f"{stem}_depth.pfm", out.depth_u)
    write_pfm(out_dir / f"{stem}_normal.pfm", out.normal_unit())
    write_png(out_dir / f"{stem}_uncertainty.png", out.unc)
    if depth_scale:
        write_png16(out_dir / f"{stem}_depth16.png", out.depth_u, depth_scale)
