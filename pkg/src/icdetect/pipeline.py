"""Slide scoring: segmentation, filter cascade, x5 context inference, S_IC."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .evaluation import IC, REST, slide_score
from .filtering import ANALYSIS_ZOOM, FilterConfig, FilterReport, PatchRef, filter_patches
from .model.hybrid import HybridModel, ingest
from .pyramid import PyramidImage
from .segmentation import (EPITHELIUM_ZOOM, SegmentationConfig, epithelium_mask,
                           tissue_mask_or_empty)

CONTEXT_ZOOM = 5.0
HEATMAP_ZOOM = EPITHELIUM_ZOOM
HEATMAP_ALPHA = 128
INFERENCE_CHUNK = 32

# 256-entry blue -> red ramp: entry k = (k, 0, 255 - k)
COLORMAP = np.stack([np.arange(256), np.zeros(256, dtype=int), 255 - np.arange(256)],
                    axis=1).astype(np.uint8)


@dataclass(frozen=True)
class PipelineConfig:
    segmentation: SegmentationConfig = SegmentationConfig()
    filtering: FilterConfig = FilterConfig()


@dataclass
class PatchScore:
    x: int
    y: int
    score: float


@dataclass
class SlideResult:
    slide_id: str
    patches: list  # PatchScore in row-major patch order
    s_ic: float
    predicted: str
    patch_threshold: float
    slide_threshold: float
    timings: dict = field(default_factory=dict)
    filter_report: Optional[FilterReport] = None
    no_epithelium: bool = False
    inference_patch_count: int = 0
    patch_side: int = 256

    @property
    def n(self) -> int:
        return len(self.patches)

    def to_json(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "S_IC": self.s_ic,
            "class": self.predicted,
            "N": self.n,
            "P0": self.patch_threshold,
            "slide_threshold": self.slide_threshold,
            "no_epithelium": self.no_epithelium,
            "patches": [{"x": p.x, "y": p.y, "score": p.score} for p in self.patches],
            "timings": {k: round(v, 3) for k, v in self.timings.items()},
        }


def extract_context_patch(pyr: PyramidImage, ref: PatchRef) -> np.ndarray:
    """Same-size patch at x5 sharing the centre of an x20 patch (4x the footprint)."""
    if ref.zoom != ANALYSIS_ZOOM:
        raise ValueError(f"context patches are taken around x20 patches, got zoom {ref.zoom}")
    scale = ANALYSIS_ZOOM / CONTEXT_ZOOM
    cx = (ref.x + ref.side // 2) / scale
    cy = (ref.y + ref.side // 2) / scale
    x0 = int(np.floor(cx)) - ref.side // 2
    y0 = int(np.floor(cy)) - ref.side // 2
    return pyr.read_region(CONTEXT_ZOOM, x0, y0, ref.side, ref.side)


def score_refs(pyr: PyramidImage, model: HybridModel, refs: list, workers: int = 1) -> np.ndarray:
    """IC score for each x20 ref, via its x5 context resized to the model side.

    Work is split into fixed chunks so the numeric path does not depend on the
    worker count.
    """
    chunks = [refs[i:i + INFERENCE_CHUNK] for i in range(0, len(refs), INFERENCE_CHUNK)]

    def run(chunk):
        batch = np.stack([ingest(extract_context_patch(pyr, r), model.input_side) for r in chunk])
        return model.predict_proba(batch)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def score_slide(pyr: PyramidImage, model: HybridModel, cfg: PipelineConfig = PipelineConfig(),
                slide_id: str = "slide", workers: int = 1, detector=None) -> SlideResult:
    t0 = time.perf_counter()
    tissue = tissue_mask_or_empty(pyr)
    epi = epithelium_mask(pyr, tissue, cfg.segmentation, workers)
    retained, report = filter_patches(pyr, epi, cfg.filtering, detector, workers, tissue=tissue)
    t1 = time.perf_counter()
    scores = score_refs(pyr, model, retained, workers)
    t2 = time.perf_counter()

    patches = [PatchScore(r.x, r.y, float(s)) for r, s in zip(retained, scores)]
    s_ic = slide_score([p.score for p in patches], model.patch_threshold)
    predicted = IC if s_ic > model.slide_threshold else REST
    t3 = time.perf_counter()
    timings = {"filter_ms": (t1 - t0) * 1000.0, "inference_ms": (t2 - t1) * 1000.0,
               "total_ms": (t3 - t0) * 1000.0}
    return SlideResult(slide_id, patches, s_ic, predicted, model.patch_threshold,
                       model.slide_threshold, timings, report,
                       no_epithelium=not epi.data.any(), inference_patch_count=len(scores),
                       patch_side=cfg.filtering.patch_side)


def render_heatmap(result: SlideResult, pyr: PyramidImage) -> np.ndarray:
    """RGBA overlay at x2.5: each scored x20 patch painted with the colormap."""
    w, h = pyr.level_size(HEATMAP_ZOOM)
    out = np.zeros((h, w, 4), dtype=np.uint8)
    scale = ANALYSIS_ZOOM / HEATMAP_ZOOM
    side = int(result.patch_side // scale)
    for p in result.patches:
        idx = int(np.floor(min(max(p.score, 0.0), 1.0) * 255 + 0.5))
        x0, y0 = int(p.x // scale), int(p.y // scale)
        out[y0:y0 + side, x0:x0 + side, :3] = COLORMAP[idx]
        out[y0:y0 + side, x0:x0 + side, 3] = HEATMAP_ALPHA
    return out


def write_outputs(result: SlideResult, pyr: PyramidImage, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"result": out_dir / "result.json", "heatmap": out_dir / "heatmap.png",
             "filter_report": out_dir / "filter-report.json"}
    paths["result"].write_text(json.dumps(result.to_json(), indent=2))
    Image.fromarray(render_heatmap(result, pyr), "RGBA").save(paths["heatmap"])
    report = result.filter_report.to_json() if result.filter_report else {}
    paths["filter_report"].write_text(json.dumps(report, indent=2))
    return paths
