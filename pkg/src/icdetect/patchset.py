"""Labelled patch collections shared by dataset assembly, training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PatchSet:
    images: np.ndarray        # (n, side, side, 3) uint8, model-ready
    labels: np.ndarray        # (n,) uint8, 1 = IC
    slide_ids: np.ndarray     # (n,) str
    patient_ids: np.ndarray   # (n,) str
    coords: np.ndarray        # (n, 2) int64, x20 top-left of the analysed patch
    slide_labels: dict = field(default_factory=dict)  # slide id -> 1 if the slide holds IC

    def __post_init__(self):
        n = len(self.images)
        for name in ("labels", "slide_ids", "patient_ids", "coords"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, images {n}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def side(self) -> int:
        return int(self.images.shape[1]) if len(self) else 0

    def class_counts(self) -> tuple[int, int]:
        pos = int(np.count_nonzero(self.labels))
        return len(self) - pos, pos

    def take(self, idx) -> "PatchSet":
        idx = np.asarray(idx)
        slides = set(self.slide_ids[idx].tolist())
        return PatchSet(self.images[idx], self.labels[idx], self.slide_ids[idx],
                        self.patient_ids[idx], self.coords[idx],
                        {s: v for s, v in self.slide_labels.items() if s in slides})

    def for_slides(self, slide_ids) -> "PatchSet":
        wanted = set(slide_ids)
        out = self.take(np.nonzero(np.isin(self.slide_ids, list(wanted)))[0])
        out.slide_labels = {s: v for s, v in self.slide_labels.items() if s in wanted}
        return out

    @classmethod
    def empty(cls, side: int) -> "PatchSet":
        return cls(np.zeros((0, side, side, 3), dtype=np.uint8), np.zeros(0, dtype=np.uint8),
                   np.zeros(0, dtype=object), np.zeros(0, dtype=object),
                   np.zeros((0, 2), dtype=np.int64))

    @classmethod
    def concat(cls, parts: list, side: int) -> "PatchSet":
        parts = [p for p in parts if p is not None]
        if not parts:
            return cls.empty(side)
        labels = {}
        for p in parts:
            labels.update(p.slide_labels)
        return cls(np.concatenate([p.images for p in parts]) if parts else None,
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.slide_ids for p in parts]),
                   np.concatenate([p.patient_ids for p in parts]),
                   np.concatenate([p.coords for p in parts]),
                   labels)
