"""Image tensor conventions and lossless disk I/O.

Images are float32 arrays shaped (H, W, 3) with values in [-1, 1]. Files on
disk are 8-bit PNGs; ``save_image`` quantizes to the 256-level grid and
``load_image`` maps levels back via v/127.5 - 1, so save -> load -> save
round-trips bit-exactly.
"""

import numpy as np
from PIL import Image


def to_uint8(img):
    arr = np.clip(img, -1.0, 1.0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr):
    return (arr.astype(np.float32) / 127.5) - 1.0


def save_image(img, path):
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_uint8(arr)


def clamp(img):
    return np.clip(img, -1.0, 1.0)


def to_nchw(imgs):
    """(N,H,W,C) or (H,W,C) float -> (N,C,H,W) float32."""
    arr = np.asarray(imgs, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def from_nchw(batch):
    return np.ascontiguousarray(np.asarray(batch).transpose(0, 2, 3, 1))


def contact_sheet(rows, pad=2):
    """Tile a list of image rows (each a list of (H,W,3) images) into one sheet."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    sheet = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3),
                    dtype=np.float32)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y0 = pad + i * (h + pad)
            x0 = pad + j * (w + pad)
            sheet[y0:y0 + h, x0:x0 + w] = img
    return sheet
