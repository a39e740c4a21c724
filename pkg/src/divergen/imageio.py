"""PNG helpers. All rasters are (H, W, 3) uint8 RGB; masks are 0/255 grayscale."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .masks import BitMask


def load_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_rgb(image: np.ndarray, path: str | Path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def load_mask_png(path: str | Path) -> BitMask:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return BitMask.from_array(arr >= 128)


def save_mask_png(mask: BitMask, path: str | Path) -> None:
    arr = np.where(mask.bits, 255, 0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
