"""x20 patch discard cascade: no nuclei -> blurry -> too little tissue."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .pyramid import PyramidImage, to_grayscale
from .segmentation import EPITHELIUM_ZOOM, BinaryMask, upscale_mask

ANALYSIS_ZOOM = 20.0
NO_NUCLEI = "no_nuclei"
BLURRY = "blurry"
INSUFFICIENT_TISSUE = "insufficient_tissue"
REASONS = (NO_NUCLEI, BLURRY, INSUFFICIENT_TISSUE)

Detector = Callable[[np.ndarray], bool]


class PatchTooSmall(ValueError):
    pass


class DetectorError(RuntimeError):
    """A pluggable nuclei detector raised or returned something unusable."""


@dataclass(frozen=True)
class FilterConfig:
    blur_variance_min: float = 50.0
    thres_1: int = 25
    thres_2: float = 0.9
    nuclei_min_fraction: float = 0.05
    nuclei_dark_cutoff: int = 120
    patch_side: int = 256
    epithelium_coverage: float = 0.25

    def __post_init__(self):
        if not 0 < self.thres_2 <= 1:
            raise ValueError("thres_2 must be in (0, 1]")
        if self.patch_side <= 0:
            raise ValueError("patch_side must be > 0")


@dataclass(frozen=True)
class PatchRef:
    zoom: float
    x: int
    y: int
    side: int = 256
    reason: Optional[str] = None  # None means retained

    @property
    def retained(self) -> bool:
        return self.reason is None

    @property
    def status(self) -> str:
        return "retained" if self.reason is None else f"discarded({self.reason})"

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError("side must be > 0")


@dataclass
class FilterReport:
    total: int = 0
    retained: int = 0
    discarded: dict = field(default_factory=lambda: {r: 0 for r in REASONS})
    stage_ms: dict = field(default_factory=lambda: {"segmentation": 0.0, "read": 0.0, NO_NUCLEI: 0.0,
                                                    BLURRY: 0.0, INSUFFICIENT_TISSUE: 0.0})
    tissue_candidates: Optional[int] = None

    def reconciles(self) -> bool:
        return sum(self.discarded.values()) + self.retained == self.total

    def merge(self, other: "FilterReport") -> "FilterReport":
        tc = None
        if self.tissue_candidates is not None or other.tissue_candidates is not None:
            tc = (self.tissue_candidates or 0) + (other.tissue_candidates or 0)
        return FilterReport(
            total=self.total + other.total,
            retained=self.retained + other.retained,
            discarded={r: self.discarded[r] + other.discarded[r] for r in REASONS},
            stage_ms={k: self.stage_ms.get(k, 0.0) + other.stage_ms.get(k, 0.0)
                      for k in set(self.stage_ms) | set(other.stage_ms)},
            tissue_candidates=tc,
        )

    def to_json(self) -> dict:
        return {"total": self.total, "retained": self.retained,
                "discarded": dict(self.discarded),
                "stage_ms": {k: round(v, 3) for k, v in sorted(self.stage_ms.items())},
                "tissue_candidates": self.tissue_candidates}


def laplacian_variance(patch) -> float:
    """Population variance of the 4-neighbour Laplacian over interior pixels."""
    g = np.asarray(patch, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 3 or g.shape[1] < 3:
        raise PatchTooSmall(f"need a 2-D patch of at least 3x3, got {g.shape}")
    resp = (g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:]) - 4.0 * g[1:-1, 1:-1]
    return float(resp.var())


def blur_filter(patch, cfg: FilterConfig) -> Optional[str]:
    """Returns ``"blurry"`` when the patch should be discarded, else None."""
    return BLURRY if laplacian_variance(patch) < cfg.blur_variance_min else None


def tissue_fraction_filter(patch, cfg: FilterConfig) -> Optional[str]:
    gray = np.asarray(patch, dtype=np.uint8)
    hist = np.bincount(gray.ravel(), minlength=256)
    val = int(np.argmax(hist))  # first max, i.e. smallest value on ties
    lo, hi = max(0, val - cfg.thres_1 + 1), min(255, val + cfg.thres_1 - 1)
    prop = hist[lo:hi + 1].sum() / gray.size
    return INSUFFICIENT_TISSUE if prop > cfg.thres_2 else None


def nuclei_fraction(rgb: np.ndarray, dark_cutoff: int) -> float:
    rgb = np.asarray(rgb)
    dark = to_grayscale(rgb) < dark_cutoff
    blueish = rgb[..., 2] >= rgb[..., 0]
    return float((dark & blueish).mean())


def nuclei_filter(patch, cfg: FilterConfig, detector: Optional[Detector] = None) -> Optional[str]:
    if detector is not None:
        try:
            keep = detector(patch)
        except Exception as exc:
            raise DetectorError(f"nuclei detector failed: {exc}") from exc
        if not isinstance(keep, (bool, np.bool_)):
            raise DetectorError(f"nuclei detector returned {type(keep).__name__}, expected bool")
        return None if keep else NO_NUCLEI
    frac = nuclei_fraction(patch, cfg.nuclei_dark_cutoff)
    return None if frac >= cfg.nuclei_min_fraction else NO_NUCLEI


def _evaluate(pyr: PyramidImage, ref: PatchRef, cfg: FilterConfig,
              detector: Optional[Detector]) -> tuple[PatchRef, dict]:
    timings = {}
    t0 = time.perf_counter()
    rgb = pyr.read_region(ref.zoom, ref.x, ref.y, ref.side, ref.side)
    t1 = time.perf_counter()
    timings["read"] = t1 - t0
    reason = nuclei_filter(rgb, cfg, detector)
    t2 = time.perf_counter()
    timings[NO_NUCLEI] = t2 - t1
    if reason is None:
        gray = to_grayscale(rgb)
        reason = blur_filter(gray, cfg)
        t3 = time.perf_counter()
        timings[BLURRY] = t3 - t2
        if reason is None:
            reason = tissue_fraction_filter(gray, cfg)
            timings[INSUFFICIENT_TISSUE] = time.perf_counter() - t3
    return PatchRef(ref.zoom, ref.x, ref.y, ref.side, reason), timings


def run_cascade(pyr: PyramidImage, candidates: Sequence[PatchRef], cfg: FilterConfig,
                detector: Optional[Detector] = None,
                workers: int = 1) -> tuple[list[PatchRef], FilterReport]:
    """Apply the cascade to explicit candidates; returns every ref with its status."""
    def job(ref):
        return _evaluate(pyr, ref, cfg, detector)

    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, candidates))
    else:
        results = [job(r) for r in candidates]

    report = FilterReport(total=len(candidates))
    evaluated = []
    for ref, timings in results:
        evaluated.append(ref)
        if ref.retained:
            report.retained += 1
        else:
            report.discarded[ref.reason] += 1
        for k, v in timings.items():
            report.stage_ms[k] += v * 1000.0
    return evaluated, report


def epithelial_candidates(pyr: PyramidImage, epi_mask: BinaryMask,
                          cfg: FilterConfig) -> list[PatchRef]:
    """Row-major x20 grid patches whose footprint is at least the configured
    fraction epithelium."""
    w, h = pyr.level_size(ANALYSIS_ZOOM)
    scale = ANALYSIS_ZOOM / epi_mask.zoom
    side = cfg.patch_side
    foot = side / scale
    if not float(foot).is_integer():
        raise ValueError(f"patch side {side} does not map onto whole mask pixels")
    foot = int(foot)
    out = []
    mask = epi_mask.data
    for y in range(0, h, side):
        for x in range(0, w, side):
            mx, my = int(x // scale), int(y // scale)
            covered = mask[my:my + foot, mx:mx + foot].sum()
            if covered >= cfg.epithelium_coverage * foot * foot:
                out.append(PatchRef(ANALYSIS_ZOOM, x, y, side))
    return out


def count_tissue_candidates(pyr: PyramidImage, tissue: BinaryMask, cfg: FilterConfig) -> int:
    """x20 grid patches whose footprint touches any tissue (for discard-rate reporting)."""
    w25, h25 = pyr.level_size(EPITHELIUM_ZOOM)
    up = upscale_mask(tissue, EPITHELIUM_ZOOM, w25, h25)
    w, h = pyr.level_size(ANALYSIS_ZOOM)
    scale = ANALYSIS_ZOOM / EPITHELIUM_ZOOM
    foot = int(cfg.patch_side / scale)
    n = 0
    for y in range(0, h, cfg.patch_side):
        for x in range(0, w, cfg.patch_side):
            mx, my = int(x // scale), int(y // scale)
            if up[my:my + foot, mx:mx + foot].any():
                n += 1
    return n


def filter_patches(pyr: PyramidImage, epi_mask: BinaryMask, cfg: FilterConfig = FilterConfig(),
                   detector: Optional[Detector] = None, workers: int = 1,
                   tissue: Optional[BinaryMask] = None) -> tuple[list[PatchRef], FilterReport]:
    candidates = epithelial_candidates(pyr, epi_mask, cfg)
    evaluated, report = run_cascade(pyr, candidates, cfg, detector, workers)
    if tissue is not None:
        report.tissue_candidates = count_tissue_candidates(pyr, tissue, cfg)
    return [r for r in evaluated if r.retained], report
