"""8-bit PNG helpers for images, masks, and tile grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_rgb(path, img: np.ndarray):
    """Float (H, W, 3) in [0,1] -> 8-bit RGB PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def save_mask(path, mask: np.ndarray):
    """Binary or [0,1] float (H, W) -> 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="L").save(path)


def load_rgb(path) -> np.ndarray:
    """PNG -> float (H, W, 3) in [0,1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_grid(path, tiles, n_cols: int, pad: int = 1):
    """Row-major list of (H, W, 3) floats -> one tiled PNG."""
    tiles = [np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0) for t in tiles]
    h, w = tiles[0].shape[0], tiles[0].shape[1]
    n_rows = (len(tiles) + n_cols - 1) // n_cols
    canvas = np.ones((n_rows * (h + pad) - pad, n_cols * (w + pad) - pad, 3))
    for k, tile in enumerate(tiles):
        r, c = divmod(k, n_cols)
        canvas[r * (h + pad):r * (h + pad) + h, c * (w + pad):c * (w + pad) + w] = tile
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_rgb(path, canvas)
