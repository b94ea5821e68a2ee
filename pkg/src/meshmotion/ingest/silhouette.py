"""Silhouettes from white-background frames, and binary mask PNG IO."""

from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_THRESHOLD = 0.97


def extract_silhouette(frame_rgb: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """A pixel is background iff every channel exceeds ``threshold``; returns a uint8 {0,1} mask."""
    rgb = np.asarray(frame_rgb, dtype=np.float64)
    background = np.all(rgb > threshold, axis=-1)
    return (~background).astype(np.uint8)


def read_frame_rgb(path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def read_mask_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def write_image_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(arr * 255).astype(np.uint8)).save(Path(path))
