"""Tissue masking and patch-grid extraction on RGB raster images."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_BINS = 256


@dataclass
class PatchGrid:
    patch_size: int
    coverage_threshold: float
    width: int
    height: int
    kept: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "patch_size": self.patch_size,
            "coverage_threshold": self.coverage_threshold,
            "width": self.width,
            "height": self.height,
            "patches": [[r, c] for r, c in self.kept],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")


def load_image(path) -> np.ndarray:
    """Read a PNG as an (H, W, 3) float array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.astype(np.float64) / 255.0


def rgb_to_saturation(image: np.ndarray) -> np.ndarray:
    """HSV saturation, (max - min) / max per pixel, with 0 where max is 0."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("channel values must lie in [0, 1]")
    hi = img.max(axis=2)
    lo = img.min(axis=2)
    out = np.zeros_like(hi)
    np.divide(hi - lo, hi, out=out, where=hi > 0)
    return out


def histogram_bins(field: np.ndarray) -> np.ndarray:
    return np.minimum((np.asarray(field) * N_BINS).astype(np.int64), N_BINS - 1)


def otsu_threshold(field: np.ndarray) -> tuple[float, np.ndarray]:
    """Otsu threshold over a 256-bin histogram of values in [0, 1].

    Returns ``(threshold, mask)`` with ``mask = field > threshold``. The
    threshold is the upper edge of the last background bin; among cuts with
    equal between-class variance the lowest wins. A field occupying a single
    bin gives an empty mask.
    """
    f = np.asarray(field, dtype=np.float64)
    bins = histogram_bins(f)
    hist = np.bincount(bins.ravel(), minlength=N_BINS).astype(np.float64)
    centers = (np.arange(N_BINS) + 0.5) / N_BINS
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * centers)[:-1]
    w1 = total - w0
    s1 = (hist * centers).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        var = np.where((w0 > 0) & (w1 > 0), w0 * w1 * (s0 / w0 - s1 / w1) ** 2, 0.0)
    if not np.any(var > 0):
        k = int(bins.max()) if f.size else N_BINS - 1
        return (k + 1) / N_BINS, np.zeros(f.shape, dtype=bool)
    k = int(np.argmax(var))
    return (k + 1) / N_BINS, bins > k


def extract_patches(mask: np.ndarray, patch_size: int, coverage_threshold: float) -> PatchGrid:
    """Keep non-overlapping P x P tiles whose tissue fraction is >= the threshold."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    if not 0.0 <= coverage_threshold <= 1.0:
        raise ValueError("coverage_threshold must lie in [0, 1]")
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    p = patch_size
    rows, cols = h // p, w // p
    grid = PatchGrid(p, coverage_threshold, w, h)
    if rows == 0 or cols == 0:
        return grid
    tiles = m[: rows * p, : cols * p].reshape(rows, p, cols, p)
    counts = tiles.sum(axis=(1, 3))
    keep = counts / float(p * p) >= coverage_threshold
    grid.kept = [(int(r) * p, int(c) * p) for r, c in zip(*np.nonzero(keep))]
    return grid


def preprocess_image(image: np.ndarray, patch_size: int = 512, coverage_threshold: float = 0.5) -> PatchGrid:
    _, mask = otsu_threshold(rgb_to_saturation(image))
    return extract_patches(mask, patch_size, coverage_threshold)
