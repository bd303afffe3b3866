"""CNN feature extractor + random forest, with the two decision thresholds."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from ..pyramid import downsample
from . import convnet
from .convnet import ShapeMismatch
from .forest import ForestModel

MASTER = "master"


def calibrated_tag(center: str) -> str:
    return f"calibrated:{center}"


def ingest(patch: np.ndarray, side: int) -> np.ndarray:
    """Area-resample a square uint8 patch (or batch) down to the model side."""
    patch = np.asarray(patch, dtype=np.uint8)
    src = patch.shape[-2]
    if src == side:
        return patch
    if src < side or patch.shape[-3] != src:
        raise ShapeMismatch(f"cannot resize a {patch.shape[-3]}x{src} patch to {side}")
    factor = Fraction(src, side)
    if patch.ndim == 3:
        return downsample(patch, factor)
    return np.stack([downsample(p, factor) for p in patch])


def extract_features(params: dict, patches) -> np.ndarray:
    """Pooled backbone output (head unused). Accepts one patch or a batch."""
    x = np.asarray(patches)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.dtype == np.uint8:
        x = convnet.to_input(x, params["conv1_w"].dtype)
    _, feats = convnet.predict_logits(params, x)
    feats = feats.astype(np.float64)
    return feats[0] if single else feats


@dataclass
class HybridModel:
    params: dict
    forest: ForestModel
    patch_threshold: float = 0.5
    slide_threshold: float = 0.5
    provenance: str = MASTER
    input_side: int = 64
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("patch_threshold", "slide_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def _check(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:3] != (self.input_side, self.input_side):
            raise ShapeMismatch(f"model expects {self.input_side}x{self.input_side} patches, "
                                f"got {x.shape}")
        return x

    def features(self, patches) -> np.ndarray:
        return extract_features(self.params, self._check(np.asarray(patches)))

    def predict_proba(self, patches) -> np.ndarray:
        """IC score of every patch in a batch."""
        x = self._check(np.asarray(patches))
        if len(x) == 0:
            return np.zeros(0)
        return self.forest.predict_proba(self.features(x))


def predict_proba(model: HybridModel, patch) -> float:
    """IC score in [0, 1] for a single model-side patch."""
    patch = np.asarray(patch)
    if patch.ndim != 3:
        raise ShapeMismatch(f"expected one HxWx3 patch, got {patch.shape}")
    return float(model.predict_proba(patch[None])[0])
