"""Tissue and epithelium masks.

Tissue is split from glass at x1 with a global two-class Otsu threshold.
The tissue mask is then walked in 256 px patches at x2.5; each patch is
smoothed and thresholded again (Otsu over its tissue pixels only) so the
dark, nuclei-dense epithelium separates from the paler stroma.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .pyramid import PyramidImage, to_grayscale

TISSUE_ZOOM = 1.0
EPITHELIUM_ZOOM = 2.5


class DegenerateHistogram(ValueError):
    """Fewer than two distinct gray values: no threshold separates anything."""


@dataclass(frozen=True)
class SegmentationConfig:
    smoothing_sigma: float = 5.0
    tissue_patch_side: int = 256
    min_tissue_coverage: float = 0.10

    def __post_init__(self):
        if not self.smoothing_sigma > 0:
            raise ValueError("smoothing_sigma must be > 0")
        if self.tissue_patch_side <= 0:
            raise ValueError("tissue_patch_side must be > 0")


@dataclass
class BinaryMask:
    zoom: float
    data: np.ndarray  # bool, shape (height, width)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def empty(cls, zoom: float, width: int, height: int) -> "BinaryMask":
        return cls(zoom, np.zeros((height, width), dtype=bool))

    def fraction(self) -> float:
        return float(self.data.mean()) if self.data.size else 0.0

    def save_png(self, path) -> Path:
        path = Path(path)
        Image.fromarray(self.data).convert("1").save(path)
        return path


def otsu_threshold(hist) -> int:
    """Threshold maximizing between-class variance of a 256-bin histogram.

    Class 0 is ``value <= t``. The criterion ``(N*S0 - n0*S)**2 / (n0*n1)`` is
    proportional to the between-class variance and is evaluated in exact
    integer arithmetic, so plateaus resolve to the lowest maximizing ``t``.
    """
    counts = [int(c) for c in np.asarray(hist).ravel()]
    if len(counts) != 256:
        raise ValueError(f"histogram must have 256 bins, got {len(counts)}")
    if any(c < 0 for c in counts):
        raise ValueError("histogram counts must be non-negative")
    if sum(1 for c in counts if c) < 2:
        raise DegenerateHistogram("histogram has fewer than two distinct values")

    total = sum(counts)
    total_sum = sum(v * c for v, c in enumerate(counts))
    best_t, best_num, best_den = None, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (total * s0 - n0 * total_sum) ** 2
        den = n0 * n1
        if best_t is None or num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with clamp-to-edge borders, float output."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(np.asarray(img, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def _histogram(gray: np.ndarray) -> np.ndarray:
    return np.bincount(gray.ravel(), minlength=256)


def tissue_mask(pyr: PyramidImage) -> BinaryMask:
    """Darker Otsu class of the x1 grayscale level.

    Raises DegenerateHistogram on a blank slide.
    """
    gray = to_grayscale(pyr.read_level(TISSUE_ZOOM))
    t = otsu_threshold(_histogram(gray))
    return BinaryMask(TISSUE_ZOOM, gray <= t)


def tissue_mask_or_empty(pyr: PyramidImage) -> BinaryMask:
    try:
        return tissue_mask(pyr)
    except DegenerateHistogram:
        w, h = pyr.level_size(TISSUE_ZOOM)
        return BinaryMask.empty(TISSUE_ZOOM, w, h)


def upscale_mask(mask: BinaryMask, zoom: float, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resample by pixel centres onto a finer level grid."""
    ratio = mask.zoom / zoom
    ys = np.minimum(((np.arange(height) + 0.5) * ratio).astype(np.int64), mask.height - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * ratio).astype(np.int64), mask.width - 1)
    return mask.data[np.ix_(ys, xs)]


def _segment_patch(gray: np.ndarray, tissue: np.ndarray, sigma: float) -> np.ndarray:
    smooth = np.floor(gaussian_blur(gray, sigma) + 0.5).astype(np.uint8)
    try:
        t = otsu_threshold(_histogram(smooth[tissue]))
    except DegenerateHistogram:
        return np.zeros_like(tissue)
    return tissue & (smooth <= t)


def epithelium_mask(pyr: PyramidImage, tissue: BinaryMask,
                    cfg: SegmentationConfig = SegmentationConfig(),
                    workers: int = 1) -> BinaryMask:
    w, h = pyr.level_size(EPITHELIUM_ZOOM)
    out = np.zeros((h, w), dtype=bool)
    if not tissue.data.any():
        return BinaryMask(EPITHELIUM_ZOOM, out)
    tissue_up = upscale_mask(tissue, EPITHELIUM_ZOOM, w, h)
    side = cfg.tissue_patch_side
    gray = to_grayscale(pyr.read_level(EPITHELIUM_ZOOM))

    jobs = []
    for y in range(0, h, side):
        for x in range(0, w, side):
            t_patch = tissue_up[y:y + side, x:x + side]
            # out-of-level area counts as glass
            if t_patch.sum() >= cfg.min_tissue_coverage * side * side:
                jobs.append((x, y))

    def run(job):
        x, y = job
        return _segment_patch(gray[y:y + side, x:x + side], tissue_up[y:y + side, x:x + side],
                              cfg.smoothing_sigma)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    for (x, y), part in zip(jobs, parts):
        out[y:y + side, x:x + side] = part
    return BinaryMask(EPITHELIUM_ZOOM, out)
