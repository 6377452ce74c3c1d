"""Image-space primitives shared by the codec and evaluation paths.

Every geometric operation here is linear in the image, and each comes
with its exact adjoint so losses computed after a transformation can be
pulled back to render-space gradients.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

RAW_MAGIC = b"GSIMG\x00"


def bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray):
    """Sample ``img`` (H,W,C) at float coords (sx, sy); zero fill outside."""
    H, W = img.shape[:2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros(sx.shape + (img.shape[2],))
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        xi_c = np.clip(xi, 0, W - 1)
        yi_c = np.clip(yi, 0, H - 1)
        out += (wgt * ok)[..., None] * img[yi_c, xi_c]
    return out


def bilinear_sample_adjoint(grad: np.ndarray, sx, sy, height, width):
    """Adjoint of :func:`bilinear_sample` (scatter-add of the weights)."""
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((height, width, grad.shape[-1]))
    for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                        (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        np.add.at(out, (yi[ok], xi[ok]),
                  grad[ok] * wgt[ok][..., None])
    return out


def _resize_grid(h_out, w_out, h_in, w_in):
    # Area-consistent mapping: output center u maps to (u+0.5)*scale-0.5.
    ys = (np.arange(h_out) + 0.5) * (h_in / h_out) - 0.5
    xs = (np.arange(w_out) + 0.5) * (w_in / w_out) - 0.5
    return np.meshgrid(xs, ys)


def resize_bilinear(img: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    H, W = img.shape[:2]
    if (H, W) == (h_out, w_out):
        return img.copy()
    sx, sy = _resize_grid(h_out, w_out, H, W)
    # Clamp to the border so resizing never invents zero padding.
    sx = np.clip(sx, 0, W - 1)
    sy = np.clip(sy, 0, H - 1)
    return bilinear_sample(img, sx, sy)


def resize_bilinear_adjoint(grad: np.ndarray, h_in: int, w_in: int):
    h_out, w_out = grad.shape[:2]
    if (h_in, w_in) == (h_out, w_out):
        return grad.copy()
    sx, sy = _resize_grid(h_out, w_out, h_in, w_in)
    sx = np.clip(sx, 0, w_in - 1)
    sy = np.clip(sy, 0, h_in - 1)
    return bilinear_sample_adjoint(grad, sx, sy, h_in, w_in)


def rotation_grid(height, width, angle):
    """Source coordinates that rotate the image by ``angle`` about center."""
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    ca, sa = np.cos(angle), np.sin(angle)
    dx, dy = xs - cx, ys - cy
    sx = ca * dx + sa * dy + cx
    sy = -sa * dx + ca * dy + cy
    return sx, sy


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / max(sigma, 1e-12)) ** 2)
    return k / k.sum()


def separable_convolve(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' separable convolution; self-adjoint for the
    symmetric kernels used here."""
    r = len(kernel) // 2
    H, W = img.shape[:2]
    pad = np.zeros((H + 2 * r, W, img.shape[2]))
    pad[r:r + H] = img
    rows = np.zeros_like(img)
    for j, kv in enumerate(kernel):
        rows += kv * pad[j:j + H]
    pad = np.zeros((H, W + 2 * r, img.shape[2]))
    pad[:, r:r + W] = rows
    out = np.zeros_like(img)
    for j, kv in enumerate(kernel):
        out += kv * pad[:, j:j + W]
    return out


def center_crop_mask(height, width, area_fraction):
    side = np.sqrt(area_fraction)
    kh = int(round(height * side))
    kw = int(round(width * side))
    y0 = (height - kh) // 2
    x0 = (width - kw) // 2
    mask = np.zeros((height, width))
    mask[y0:y0 + kh, x0:x0 + kw] = 1.0
    return mask


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_raw(image: np.ndarray, path) -> None:
    """Float dump: magic, uint32 H/W/C, then little-endian f32 data."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(image.tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(RAW_MAGIC))
        if magic != RAW_MAGIC:
            raise ValueError("not a gsmark raw image dump")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4", count=h * w * c)
    return data.reshape(h, w, c).astype(np.float64)
