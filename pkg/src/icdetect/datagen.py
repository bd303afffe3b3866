"""Synthetic H&E-like slides with polygon ground truth and per-centre stain profiles.

A slide is white glass with one irregular tissue section. Inside the tissue,
stroma is a pale fibrous pink; epithelial nests are polygons filled with
cytoplasm and dark, blue-dominant nuclei. Invasive-carcinoma nests are more
irregular in outline and carry larger, denser, darker nuclei than benign
ones. A :class:`CenterProfile` then shifts hue, saturation and brightness
and rescales the texture grain, which is how two acquisition centres differ.

Everything is a pure function of (profile, layout, seed), so a manifest
holding those values regenerates a dataset bit for bit.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .evaluation import IC, REST, patient_split
from .filtering import ANALYSIS_ZOOM, FilterConfig, FilterReport, PatchRef, run_cascade
from .model.hybrid import ingest
from .patchset import PatchSet
from .pipeline import extract_context_patch
from .pyramid import PyramidImage, build_pyramid, open_pyramid, save_pyramid

MANIFEST_VERSION = 1

IC_LABELS = ("invasive_ductal_carcinoma", "invasive_lobular_carcinoma", "mucinous_carcinoma")
REST_LABELS = ("benign_epithelium", "usual_ductal_hyperplasia", "fibroadenoma", "healthy_tissue")
DEFAULT_GROUPING = {**{lb: IC for lb in IC_LABELS}, **{lb: REST for lb in REST_LABELS}}
# rough ductal/lobular/mucinous mix of a routine caseload
IC_LABEL_WEIGHTS = (0.7, 0.25, 0.05)

# canonical (unshifted) stain colours, RGB
STROMA = np.array([236, 178, 206])
FIBER_DEPTH = np.array([20.0, 26.0, 16.0])
BENIGN_CYTO = np.array([214, 160, 208])
BENIGN_NUCLEUS = np.array([92, 62, 160])
IC_CYTO = np.array([196, 136, 196])
IC_NUCLEUS = np.array([66, 36, 124])
PIXEL_NOISE = 8
# base-pixel clearance between nests of the same / of different class; the
# wider one keeps most x5 context windows single-class
NEST_GAP = 48
CLASS_GAP = 384
MIN_NEST = 0.6
STRIP_ROWS = 256


class InvalidFractions(ValueError):
    pass


class OutOfRange(ValueError):
    pass


class UngroupedLabel(KeyError):
    pass


# ---------------------------------------------------------------------------
# profiles

PROFILE_RANGES = {
    "hue_offset": (-0.5, 0.5),
    "saturation_scale": (0.25, 4.0),
    "brightness_offset": (-80.0, 80.0),
    "grain_scale": (0.5, 3.0),
}


@dataclass(frozen=True)
class CenterProfile:
    center_id: str = "reference"
    hue_offset: float = 0.0
    saturation_scale: float = 1.0
    brightness_offset: float = 0.0
    grain_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name, (lo, hi) in PROFILE_RANGES.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise OutOfRange(f"{name}={v} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class ShiftDelta:
    """Additive hue/brightness offsets, multiplicative saturation/grain factors."""

    hue: float = 0.0
    saturation: float = 1.0
    brightness: float = 0.0
    grain: float = 1.0


def apply_center_shift(profile: CenterProfile, delta: ShiftDelta,
                       center_id: Optional[str] = None) -> CenterProfile:
    return replace(
        profile,
        center_id=center_id or profile.center_id,
        hue_offset=profile.hue_offset + delta.hue,
        saturation_scale=profile.saturation_scale * delta.saturation,
        brightness_offset=profile.brightness_offset + delta.brightness,
        grain_scale=profile.grain_scale * delta.grain,
    )


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class SlideLayout:
    side: int = 2048
    epithelium_fraction: float = 0.2
    ic_fraction: float = 0.0
    tissue_radius: float = 0.38
    nest_radius: tuple = (150.0, 320.0)
    blur_fraction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "nest_radius", tuple(float(r) for r in self.nest_radius))
        for name in ("epithelium_fraction", "ic_fraction", "blur_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidFractions(f"{name}={v} outside [0, 1]")
        if self.ic_fraction > self.epithelium_fraction:
            raise InvalidFractions("ic_fraction cannot exceed epithelium_fraction")
        if self.side < 256:
            raise ValueError("slide side must be at least 256")


@dataclass
class Annotation:
    slide_id: str
    patient_id: str
    polygon: list  # [(x, y), ...] in x20 base pixels
    label: str

    def __post_init__(self):
        if len(self.polygon) < 3:
            raise ValueError("an ROI polygon needs at least 3 vertices")

    def to_json(self) -> dict:
        return {"label": self.label, "polygon": [[float(x), float(y)] for x, y in self.polygon]}


def polygon_area(poly) -> float:
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def star_polygon(cx: float, cy: float, radius: float, n_vertices: int, roughness: float,
                 max_harmonic: int, rng: np.random.Generator) -> np.ndarray:
    """Radially perturbed circle; positive radius everywhere keeps it simple."""
    theta = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    r = np.ones(n_vertices)
    ks = np.arange(2, max_harmonic + 1)
    amps = rng.uniform(0, 1, len(ks))
    amps *= roughness / amps.sum()
    phases = rng.uniform(0, 2 * np.pi, len(ks))
    for k, a, ph in zip(ks, amps, phases):
        r += a * np.cos(k * theta + ph)
    return np.stack([cx + radius * r * np.cos(theta), cy + radius * r * np.sin(theta)], axis=1)


def point_in_polygon(poly, x, y) -> np.ndarray:
    """Even-odd test for many points at once."""
    p = np.asarray(poly, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    x0, y0 = p[:, 0], p[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    crosses = (y0 <= y) != (y1 <= y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return (np.count_nonzero(crosses & (x < xint), axis=-1) % 2).astype(bool)


def rasterize_polygon(poly, width: int, height: int, scale: float = 1.0,
                      rows: Optional[tuple] = None, cols: Optional[tuple] = None) -> np.ndarray:
    """Pixel-centre scanline fill of one polygon.

    ``scale`` maps base coordinates to the target grid; ``rows``/``cols``
    restrict the output to a window ``[start, stop)`` of that grid.
    """
    p = np.asarray(poly, dtype=np.float64) * scale
    r0, r1 = rows or (0, height)
    c0, c1 = cols or (0, width)
    out = np.zeros((r1 - r0, c1 - c0), dtype=bool)
    if r1 <= r0 or c1 <= c0:
        return out
    x0, y0 = p[:, 0], p[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    yc = (np.arange(r0, r1) + 0.5)[:, None]
    crosses = (y0 <= yc) != (y1 <= yc)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = np.where(crosses, x0 + (yc - y0) * (x1 - x0) / (y1 - y0), np.inf)
    xint.sort(axis=1)
    n_cross = crosses.sum(axis=1)
    for i in np.nonzero(n_cross)[0]:
        xs = xint[i, :n_cross[i]]
        for a, b in zip(xs[0::2], xs[1::2]):
            lo = max(int(math.ceil(a - 0.5)), c0)
            hi = min(int(math.ceil(b - 0.5)), c1)
            if hi > lo:
                out[i, lo - c0:hi - c0] = True
    return out


@dataclass
class Nest:
    polygon: np.ndarray
    is_ic: bool
    label: str
    blurred: bool = False

    @property
    def bbox(self) -> tuple:
        lo = np.floor(self.polygon.min(axis=0)).astype(int)
        hi = np.ceil(self.polygon.max(axis=0)).astype(int) + 1
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])


@dataclass
class SlideGeometry:
    tissue: np.ndarray
    nests: list

    def tissue_area(self) -> float:
        return polygon_area(self.tissue)


def _place_nests(tissue: np.ndarray, target_area: float, is_ic: bool, existing: list,
                 layout: SlideLayout, rng: np.random.Generator, labels: tuple,
                 weights: Optional[tuple]) -> list:
    placed = []
    area = 0.0
    lo_r, hi_r = layout.nest_radius
    tx0, ty0 = tissue.min(axis=0)
    tx1, ty1 = tissue.max(axis=0)
    attempts = 0
    while area < target_area and attempts < 400:
        attempts += 1
        radius = rng.uniform(lo_r, hi_r)
        if is_ic:
            poly_shape = dict(n_vertices=40, roughness=0.35, max_harmonic=9)
        else:
            poly_shape = dict(n_vertices=28, roughness=0.12, max_harmonic=4)
        remaining = target_area - area
        # skip slivers, but a non-zero target always gets at least one nest
        if placed and remaining < math.pi * (MIN_NEST * lo_r) ** 2:
            break
        if math.pi * radius ** 2 > remaining:
            radius = max(math.sqrt(remaining / math.pi), MIN_NEST * lo_r)
        cx = rng.uniform(tx0 + radius, tx1 - radius)
        cy = rng.uniform(ty0 + radius, ty1 - radius)
        poly = star_polygon(cx, cy, radius, rng=rng, **poly_shape)
        if not point_in_polygon(tissue, poly[:, 0], poly[:, 1]).all():
            continue
        reach = radius * (1 + poly_shape["roughness"])
        clash = False
        for other in existing + placed:
            oc = other.polygon.mean(axis=0)
            orad = np.max(np.hypot(*(other.polygon - oc).T))
            gap = NEST_GAP if other.is_ic == is_ic else CLASS_GAP
            if math.hypot(cx - oc[0], cy - oc[1]) < reach + orad + gap:
                clash = True
                break
        if clash:
            continue
        if weights is not None:
            label = labels[int(rng.choice(len(labels), p=weights))]
        else:
            label = labels[int(rng.integers(len(labels)))]
        placed.append(Nest(poly, is_ic, label, bool(rng.random() < layout.blur_fraction)))
        area += polygon_area(poly)
    return placed


def slide_geometry(layout: SlideLayout, seed: int) -> SlideGeometry:
    rng = np.random.default_rng([int(seed), 1])
    side = layout.side
    jitter = rng.uniform(-0.03, 0.03, 2) * side
    tissue = star_polygon(side / 2 + jitter[0], side / 2 + jitter[1], layout.tissue_radius * side,
                          n_vertices=72, roughness=0.18, max_harmonic=5, rng=rng)
    t_area = polygon_area(tissue)
    ic = _place_nests(tissue, layout.ic_fraction * t_area, True, [], layout, rng,
                      IC_LABELS, IC_LABEL_WEIGHTS)
    benign_target = (layout.epithelium_fraction - layout.ic_fraction) * t_area
    benign = _place_nests(tissue, benign_target, False, ic, layout, rng,
                          REST_LABELS[:3], None)
    return SlideGeometry(tissue, ic + benign)


# ---------------------------------------------------------------------------
# rendering

def _smooth_noise(rng: np.random.Generator, shape: tuple, sigma) -> np.ndarray:
    """Unit-variance smoothed white noise."""
    white = rng.standard_normal(shape, dtype=np.float32)
    field_ = ndimage.gaussian_filter(white, sigma, mode="reflect", truncate=3.0)
    return field_ / max(float(field_.std()), 1e-6)


def _stain(rgb: np.ndarray, profile: CenterProfile) -> np.ndarray:
    """Hue/saturation shift then brightness offset on an (n, 3) float array."""
    out = rgb
    if profile.hue_offset != 0.0 or profile.saturation_scale != 1.0:
        hsv = rgb_to_hsv(np.clip(out, 0, 255) / np.float32(255))
        hsv[..., 0] = np.mod(hsv[..., 0] + profile.hue_offset, 1.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * profile.saturation_scale, 0.0, 1.0)
        out = hsv_to_rgb(hsv) * np.float32(255)
    if profile.brightness_offset != 0.0:
        out = out + np.float32(profile.brightness_offset)
    return out


def render_slide(geometry: SlideGeometry, layout: SlideLayout, profile: CenterProfile,
                 seed: int) -> np.ndarray:
    side = layout.side
    grain = profile.grain_scale
    img = np.full((side, side, 3), 255, dtype=np.uint8)

    # stroma fibres, generated at quarter resolution and expanded
    coarse_n = -(-side // 4)
    fibers = _smooth_noise(np.random.default_rng([seed, 2]), (coarse_n, coarse_n),
                           (0.6 * grain, 3.0 * grain))
    fibers = np.clip(fibers, 0, None)

    # fibre darkening is quantised once; strips then work in int16
    depth = np.floor(STROMA - fibers[..., None] * FIBER_DEPTH + 0.5).astype(np.int16)
    cols = np.arange(side) // 4
    for s, r0 in enumerate(range(0, side, STRIP_ROWS)):
        r1 = min(side, r0 + STRIP_ROWS)
        tissue = rasterize_polygon(geometry.tissue, side, side, rows=(r0, r1))
        if not tissue.any():
            continue
        rng = np.random.default_rng([seed, 3, s])
        noise = rng.integers(-PIXEL_NOISE, PIXEL_NOISE, (r1 - r0, side, 3), dtype=np.int16,
                             endpoint=True)
        noise += depth[r0 // 4:(r1 + 3) // 4].repeat(4, axis=0)[r0 % 4:r0 % 4 + r1 - r0][:, cols]
        strip = noise
        np.clip(strip, 0, 255, out=strip)
        np.copyto(img[r0:r1], strip.astype(np.uint8), where=tissue[..., None])

    for k, nest in enumerate(geometry.nests):
        x0, y0, x1, y1 = nest.bbox
        margin = int(math.ceil(3 * 4.0 * grain)) + 2
        bx0, by0 = max(0, x0 - margin), max(0, y0 - margin)
        bx1, by1 = min(side, x1 + margin), min(side, y1 + margin)
        shape = (by1 - by0, bx1 - bx0)
        mask = rasterize_polygon(nest.polygon, side, side, rows=(by0, by1), cols=(bx0, bx1))
        rng = np.random.default_rng([seed, 4, k])
        if nest.is_ic:
            field_ = _smooth_noise(rng, shape, 3.2 * grain)
            pleo = _smooth_noise(rng, shape, 12.0 * grain)
            # ~45% nuclear coverage with locally varying nucleus size
            nuclei = field_ > (-0.12 + 0.45 * pleo)
            cyto, nuc = IC_CYTO, IC_NUCLEUS
        else:
            field_ = _smooth_noise(rng, shape, 2.0 * grain)
            nuclei = field_ > 0.67  # ~25% coverage
            cyto, nuc = BENIGN_CYTO, BENIGN_NUCLEUS
        colour = np.where(nuclei[..., None], nuc.astype(np.int16), cyto.astype(np.int16))
        colour += rng.integers(-PIXEL_NOISE, PIXEL_NOISE, shape + (3,), dtype=np.int16, endpoint=True)
        if nest.blurred:
            smooth = ndimage.gaussian_filter(colour.astype(np.float32), (4.0, 4.0, 0.0), mode="nearest")
            colour = np.floor(smooth + 0.5).astype(np.int16)
        np.clip(colour, 0, 255, out=colour)
        np.copyto(img[by0:by1, bx0:bx1], colour.astype(np.uint8), where=mask[..., None])

    if profile.hue_offset or profile.saturation_scale != 1.0 or profile.brightness_offset:
        for r0 in range(0, side, STRIP_ROWS):
            strip = img[r0:r0 + STRIP_ROWS]
            # white glass has no hue; only the brightness offset reaches it
            stained = ~np.all(strip == 255, axis=-1)
            glass = np.clip(255 + profile.brightness_offset, 0, 255)
            strip[~stained] = np.uint8(np.floor(glass + 0.5))
            if not stained.any():
                continue
            px = _stain(strip[stained].astype(np.float32), profile)
            strip[stained] = np.clip(np.floor(px + 0.5), 0, 255).astype(np.uint8)
    return img


@dataclass
class SyntheticSlide:
    slide_id: str
    patient_id: str
    pyramid: PyramidImage
    annotations: list
    geometry: SlideGeometry
    profile: CenterProfile
    layout: SlideLayout
    seed: int

    @property
    def is_ic(self) -> bool:
        return any(DEFAULT_GROUPING.get(a.label) == IC for a in self.annotations)

    def region_mask(self, which: str, zoom: float = ANALYSIS_ZOOM) -> np.ndarray:
        """Ground-truth mask at a pyramid level: 'tissue', 'epithelium' or 'ic'."""
        w, h = self.pyramid.level_size(zoom)
        scale = zoom / ANALYSIS_ZOOM
        if which == "tissue":
            return rasterize_polygon(self.geometry.tissue, w, h, scale)
        out = np.zeros((h, w), dtype=bool)
        for nest in self.geometry.nests:
            if which == "epithelium" or (which == "ic" and nest.is_ic):
                out |= rasterize_polygon(nest.polygon, w, h, scale)
        return out


def generate_slide(profile: CenterProfile, layout: SlideLayout, seed: int,
                   slide_id: str = "slide", patient_id: str = "patient",
                   tile_size: int = 512) -> SyntheticSlide:
    geometry = slide_geometry(layout, seed)
    base = render_slide(geometry, layout, profile, seed)
    annotations = [Annotation(slide_id, patient_id, [tuple(map(float, v)) for v in n.polygon], n.label)
                   for n in geometry.nests]
    return SyntheticSlide(slide_id, patient_id, build_pyramid(base, tile_size), annotations,
                          geometry, profile, layout, int(seed))


# ---------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class CenterSpec:
    """Size and composition of one centre's synthetic cohort."""

    n_patients: int = 20
    slides_per_patient: tuple = (1, 3)
    slide_side: int = 2048
    ic_slide_probability: float = 0.5
    epithelium_fraction: tuple = (0.25, 0.35)
    ic_fraction: tuple = (0.12, 0.22)
    train_ratio: float = 0.8

    def __post_init__(self):
        for name in ("slides_per_patient", "epithelium_fraction", "ic_fraction"):
            object.__setattr__(self, name, tuple(getattr(self, name)))


@dataclass
class SlideRecord:
    slide_id: str
    patient_id: str
    center: str
    seed: int
    layout: SlideLayout
    annotations: list
    split: Optional[str] = None
    pyramid_path: Optional[str] = None

    def is_ic(self, grouping: dict) -> bool:
        return any(grouping.get(a.label) == IC for a in self.annotations)

    def to_json(self) -> dict:
        return {"slide_id": self.slide_id, "patient_id": self.patient_id, "center": self.center,
                "seed": self.seed, "layout": asdict(self.layout), "split": self.split,
                "pyramid_path": self.pyramid_path,
                "annotations": [a.to_json() for a in self.annotations]}

    @classmethod
    def from_json(cls, d: dict) -> "SlideRecord":
        anns = [Annotation(d["slide_id"], d["patient_id"], [tuple(v) for v in a["polygon"]], a["label"])
                for a in d["annotations"]]
        return cls(d["slide_id"], d["patient_id"], d["center"], int(d["seed"]),
                   SlideLayout(**d["layout"]), anns, d.get("split"), d.get("pyramid_path"))


@dataclass
class DatasetManifest:
    centers: dict                    # center id -> CenterProfile
    slides: list                     # SlideRecord
    grouping: dict = field(default_factory=lambda: dict(DEFAULT_GROUPING))
    seed: int = 0
    specs: dict = field(default_factory=dict)  # center id -> CenterSpec as dict

    def __post_init__(self):
        self.check_grouping()

    def check_grouping(self) -> None:
        present = {a.label for s in self.slides for a in s.annotations}
        missing = present - set(self.grouping)
        if missing:
            raise UngroupedLabel(f"labels without an IC/Rest group: {sorted(missing)}")

    def slides_for(self, center: Optional[str] = None, split: Optional[str] = None) -> list:
        return [s for s in self.slides
                if (center is None or s.center == center) and (split is None or s.split == split)]

    def patient_slides(self, center: Optional[str] = None) -> dict:
        out: dict = {}
        for s in self.slides_for(center):
            out.setdefault(s.patient_id, []).append(s.slide_id)
        return out

    def slide(self, slide_id: str) -> SlideRecord:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)

    def to_json(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "seed": self.seed,
            "grouping": dict(sorted(self.grouping.items())),
            "centers": {k: asdict(v) for k, v in self.centers.items()},
            "specs": self.specs,
            "patients": self.patient_slides(),
            "slides": [s.to_json() for s in self.slides],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        if d.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('format_version')}")
        centers = {k: CenterProfile(**v) for k, v in d["centers"].items()}
        slides = [SlideRecord.from_json(s) for s in d["slides"]]
        return cls(centers, slides, dict(d["grouping"]), int(d["seed"]), d.get("specs", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def plan_center(profile: CenterProfile, spec: CenterSpec, seed: int,
                ic_fraction_override: Optional[float] = None) -> list:
    """Draw patients, slides and layouts for one centre (no rendering)."""
    rng = np.random.default_rng([int(seed), profile.seed, 7])
    records = []
    lo, hi = spec.slides_per_patient
    for p in range(spec.n_patients):
        pid = f"{profile.center_id}-p{p:03d}"
        for s in range(int(rng.integers(lo, hi + 1))):
            sid = f"{pid}-s{s:02d}"
            epi = float(rng.uniform(*spec.epithelium_fraction))
            ic = float(rng.uniform(*spec.ic_fraction)) if rng.random() < spec.ic_slide_probability else 0.0
            if ic_fraction_override is not None:
                ic = float(ic_fraction_override)
            layout = SlideLayout(side=spec.slide_side, epithelium_fraction=max(epi, ic), ic_fraction=ic)
            slide_seed = int(rng.integers(0, 2 ** 31 - 1))
            records.append(SlideRecord(sid, pid, profile.center_id, slide_seed, layout, []))
    return records


def render_record(record: SlideRecord, profile: CenterProfile) -> SyntheticSlide:
    return generate_slide(profile, record.layout, record.seed, record.slide_id, record.patient_id)


def plan_dataset(profiles: dict, specs: dict, seed: int = 0,
                 ic_fraction_override: Optional[float] = None) -> DatasetManifest:
    """Every slide's layout, seed and patient-disjoint split; nothing rendered.

    Annotations are filled in by rendering (they depend on the drawn geometry).
    """
    records = []
    for cid, profile in profiles.items():
        records.extend(plan_center(profile, specs[cid], seed, ic_fraction_override))
    plain = {k: {f: list(x) if isinstance(x, tuple) else x for f, x in asdict(v).items()}
             for k, v in specs.items()}
    manifest = DatasetManifest(dict(profiles), records, dict(DEFAULT_GROUPING), int(seed), plain)
    for cid in profiles:
        split = patient_split(manifest.patient_slides(cid), specs[cid].train_ratio, seed)
        train = set(split.train_slides)
        for rec in manifest.slides_for(cid):
            rec.split = "train" if rec.slide_id in train else "test"
    return manifest


SlideSink = Callable[[SyntheticSlide, SlideRecord], Optional[str]]


def generate_dataset(profiles: dict, specs: dict, seed: int = 0,
                     ic_fraction_override: Optional[float] = None, workers: int = 1,
                     sink: Optional[SlideSink] = None, keep: bool = True) -> tuple[DatasetManifest, dict]:
    """Plan, render and split every centre.

    ``sink(slide, record)`` sees each rendered slide with its planned split and
    may return a pyramid path to record. Rendered pyramids are returned only
    when ``keep`` is set.
    """
    manifest = plan_dataset(profiles, specs, seed, ic_fraction_override)

    def run(rec):
        slide = render_record(rec, profiles[rec.center])
        rec.annotations = slide.annotations
        rec.pyramid_path = sink(slide, rec) if sink else None
        return slide.pyramid if keep else None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rendered = list(pool.map(run, manifest.slides))
    else:
        rendered = [run(r) for r in manifest.slides]
    manifest.check_grouping()
    pyramids = {r.slide_id: p for r, p in zip(manifest.slides, rendered) if p is not None}
    return manifest, pyramids


def write_dataset(out_dir, profiles: dict, specs: dict, seed: int = 0,
                  ic_fraction_override: Optional[float] = None, workers: int = 1) -> DatasetManifest:
    out_dir = Path(out_dir)
    (out_dir / "slides").mkdir(parents=True, exist_ok=True)

    def sink(slide: SyntheticSlide, rec: SlideRecord) -> str:
        rel = Path("slides") / slide.slide_id
        save_pyramid(slide.pyramid, out_dir / rel)
        return rel.as_posix()

    manifest, _ = generate_dataset(profiles, specs, seed, ic_fraction_override, workers, sink,
                                   keep=False)
    manifest.save(out_dir / "manifest.json")
    return manifest


class PyramidStore:
    """Resolves slide ids to pyramids, from memory or from a dataset directory."""

    def __init__(self, root: Optional[Union[str, Path]] = None, pyramids: Optional[dict] = None,
                 manifest: Optional[DatasetManifest] = None):
        self.root = Path(root) if root else None
        self.pyramids = dict(pyramids or {})
        self.manifest = manifest

    def __getitem__(self, slide_id: str) -> PyramidImage:
        if slide_id in self.pyramids:
            return self.pyramids[slide_id]
        if self.root is None or self.manifest is None:
            raise KeyError(slide_id)
        rec = self.manifest.slide(slide_id)
        return open_pyramid(self.root / rec.pyramid_path)


@dataclass
class SlideCase:
    """A labelled slide for slide-level evaluation; the pyramid loads on access."""

    slide_id: str
    label: int
    store: object

    @property
    def pyramid(self) -> PyramidImage:
        return self.store[self.slide_id]


def slide_cases(manifest: DatasetManifest, store, center: Optional[str] = None,
                split: Optional[str] = None) -> list:
    return [SlideCase(r.slide_id, int(r.is_ic(manifest.grouping)), store)
            for r in manifest.slides_for(center, split)]


# ---------------------------------------------------------------------------
# patch datasets

def annotated_candidates(record: SlideRecord, pyr: PyramidImage, grouping: dict,
                         side: int = 256) -> list:
    """x20 grid patches whose centre falls inside an ROI, with grouped labels."""
    w, h = pyr.level_size(ANALYSIS_ZOOM)
    out = []
    xs, ys = np.meshgrid(np.arange(0, w, side), np.arange(0, h, side))
    cx, cy = xs.ravel() + side / 2, ys.ravel() + side / 2
    owner = np.full(len(cx), -1)
    for k, ann in enumerate(record.annotations):
        if ann.label not in grouping:
            raise UngroupedLabel(f"{record.slide_id}: label {ann.label!r} has no group")
        inside = point_in_polygon(ann.polygon, cx, cy) & (owner < 0)
        owner[inside] = k
    for i in np.nonzero(owner >= 0)[0]:
        label = grouping[record.annotations[owner[i]].label]
        out.append((PatchRef(ANALYSIS_ZOOM, int(xs.ravel()[i]), int(ys.ravel()[i]), side), label))
    return out


@dataclass
class SlidePatches:
    patches: PatchSet
    report: FilterReport


def slide_patch_set(record: SlideRecord, pyr: PyramidImage, grouping: dict, model_side: int,
                    cfg: FilterConfig = FilterConfig(), detector=None) -> SlidePatches:
    cands = annotated_candidates(record, pyr, grouping, cfg.patch_side)
    refs = [r for r, _ in cands]
    evaluated, report = run_cascade(pyr, refs, cfg, detector)
    keep = [(r, lab) for r, (_, lab) in zip(evaluated, cands) if r.retained]
    n = len(keep)
    images = np.zeros((n, model_side, model_side, 3), dtype=np.uint8)
    for i, (ref, _) in enumerate(keep):
        images[i] = ingest(extract_context_patch(pyr, ref), model_side)
    ps = PatchSet(
        images,
        np.array([1 if lab == IC else 0 for _, lab in keep], dtype=np.uint8),
        np.array([record.slide_id] * n, dtype=object),
        np.array([record.patient_id] * n, dtype=object),
        np.array([[r.x, r.y] for r, _ in keep], dtype=np.int64).reshape(n, 2),
        {record.slide_id: int(record.is_ic(grouping))},
    )
    return SlidePatches(ps, report)


def build_patch_dataset(manifest: DatasetManifest, store, model_side: int = 64,
                        cfg: FilterConfig = FilterConfig(), center: Optional[str] = None,
                        split: Optional[str] = None, slide_ids: Optional[Iterable[str]] = None,
                        workers: int = 1, detector=None) -> tuple[PatchSet, FilterReport]:
    """Labelled x5 context patches for annotated, cascade-retained x20 patches."""
    if slide_ids is not None:
        wanted = set(slide_ids)
        records = [s for s in manifest.slides if s.slide_id in wanted]
    else:
        records = manifest.slides_for(center, split)

    def run(rec):
        return slide_patch_set(rec, store[rec.slide_id], manifest.grouping, model_side, cfg, detector)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, records))
    else:
        parts = [run(r) for r in records]
    report = FilterReport()
    for p in parts:
        report = report.merge(p.report)
    return PatchSet.concat([p.patches for p in parts], model_side), report


def measure_hue(img: np.ndarray, mask: Optional[np.ndarray] = None, min_saturation: float = 0.1) -> float:
    """Circular mean hue (in turns) of saturated pixels."""
    hsv = rgb_to_hsv(np.asarray(img, dtype=np.float64) / 255.0)
    sel = hsv[..., 1] >= min_saturation
    if mask is not None:
        sel &= mask
    angles = hsv[..., 0][sel] * 2 * np.pi
    return float(np.mod(np.arctan2(np.sin(angles).mean(), np.cos(angles).mean()) / (2 * np.pi), 1.0))


# ---------------------------------------------------------------------------
# default cohorts

REFERENCE = "reference"
TARGET = "target"


# a cooler, darker stain with coarser texture; brightness and grain go
# beyond what training-time augmentation covers
DEFAULT_SHIFT = ShiftDelta(hue=-0.04, saturation=1.1, brightness=-30.0, grain=1.8)


def default_profiles(seed: int = 0, delta: ShiftDelta = DEFAULT_SHIFT) -> dict:
    ref = CenterProfile(REFERENCE, seed=seed)
    tgt = apply_center_shift(replace(ref, seed=seed + 1), delta, center_id=TARGET)
    return {REFERENCE: ref, TARGET: tgt}


def default_specs() -> dict:
    return {
        REFERENCE: CenterSpec(n_patients=20, slides_per_patient=(2, 2), slide_side=4096,
                              ic_slide_probability=0.5, train_ratio=0.8),
        # smaller slides; the training side holds about a tenth of the
        # reference training patches, the held-out side enough IC slides
        TARGET: CenterSpec(n_patients=32, slides_per_patient=(1, 1), slide_side=2048,
                           ic_slide_probability=0.75, train_ratio=0.4),
    }


def validation_split(patches: PatchSet, ratio: float = 0.8, seed: int = 0) -> tuple[PatchSet, PatchSet]:
    """Patient-disjoint (train, validation) split of a training patch set."""
    by_patient: dict = {}
    for sid, pid in zip(patches.slide_ids.tolist(), patches.patient_ids.tolist()):
        by_patient.setdefault(pid, set()).add(sid)
    for sid in patches.slide_labels:
        # slides with no retained patch still belong to a patient split
        if not any(sid in v for v in by_patient.values()):
            by_patient.setdefault(f"_{sid}", set()).add(sid)
    split = patient_split({p: sorted(v) for p, v in sorted(by_patient.items())}, ratio, seed)
    return patches.for_slides(split.train_slides), patches.for_slides(split.test_slides)
