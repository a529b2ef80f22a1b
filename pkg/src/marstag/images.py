"""Small pixel-grid helpers: loading, saving, resizing, cropping.

Images are plain ``float64`` numpy arrays of shape (rows, cols) holding
grayscale intensities in [0, 255]. All geometry here is deterministic;
resizing uses bilinear interpolation with half-pixel centers so that a
same-size resize is an exact identity.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def load_grayscale(path) -> np.ndarray:
    """Load an image file as a float64 grayscale grid in [0, 255]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64)


def save_grayscale(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 255.0)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def bilinear_resize(img: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Resize with bilinear interpolation (half-pixel aligned sampling)."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = img.shape
    if (out_rows, out_cols) == (rows, cols):
        return img.copy()
    rs = np.clip((np.arange(out_rows) + 0.5) * (rows / out_rows) - 0.5, 0, rows - 1)
    cs = np.clip((np.arange(out_cols) + 0.5) * (cols / out_cols) - 0.5, 0, cols - 1)
    r0 = np.floor(rs).astype(int)
    c0 = np.floor(cs).astype(int)
    r1 = np.minimum(r0 + 1, rows - 1)
    c1 = np.minimum(c0 + 1, cols - 1)
    fr = (rs - r0)[:, None]
    fc = (cs - c0)[None, :]
    top = img[np.ix_(r0, c0)] * (1 - fc) + img[np.ix_(r0, c1)] * fc
    bot = img[np.ix_(r1, c0)] * (1 - fc) + img[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def center_crop(img: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    rows, cols = img.shape
    if out_rows > rows or out_cols > cols:
        raise ValueError(f"crop {out_rows}x{out_cols} larger than image {rows}x{cols}")
    r0 = (rows - out_rows) // 2
    c0 = (cols - out_cols) // 2
    return img[r0 : r0 + out_rows, c0 : c0 + out_cols].copy()


def center_square_crop(img: np.ndarray) -> np.ndarray:
    side = min(img.shape)
    return center_crop(img, side, side)
