"""Multi-resolution RGB pyramid with tiled storage.

Levels are addressed by their magnification (20, 5, 2.5 and 1). The x20
level is the base image; every other level is resampled from it with an
exact rational area-average filter, so a level's pixel dimensions are always
``ceil(base * zoom / 20)``.

On disk a pyramid is a directory holding ``manifest.json`` and one
``level_<zoom>/tile_<col>_<row>.png`` file per tile.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image
from scipy import sparse

BASE_ZOOM = 20.0
ZOOMS = (20.0, 5.0, 2.5, 1.0)
FORMAT_VERSION = 1
WHITE = 255

Factor = Union[int, float, Fraction]


class UnknownZoom(ValueError):
    pass


class PyramidFormatError(ValueError):
    pass


def zoom_label(zoom: float) -> str:
    """Directory-friendly zoom name: ``20``, ``5``, ``2.5``, ``1``."""
    zoom = float(zoom)
    if zoom.is_integer():
        return str(int(zoom))
    return f"{zoom:.1f}"


def _fraction(value: Factor) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        # 2.5, 0.25 etc. are exact binary floats; anything else is snapped
        return Fraction(value).limit_denominator(10_000)
    return Fraction(value)


def level_dimensions(base_width: int, base_height: int, zoom: float) -> tuple[int, int]:
    ratio = _fraction(zoom) / _fraction(BASE_ZOOM)
    return math.ceil(base_width * ratio), math.ceil(base_height * ratio)


# ---------------------------------------------------------------------------
# resampling

def _axis_weights(n_in: int, factor: Fraction) -> sparse.csr_matrix:
    """Integer box weights mapping ``n_in`` samples onto ``ceil(n_in / factor)``.

    Coordinates are scaled by the factor's denominator ``q`` so that both the
    output cells (width ``p``) and the input pixels (width ``q``) have integer
    edges, which makes every overlap an exact integer.
    """
    p, q = factor.numerator, factor.denominator
    end = n_in * q
    n_out = -(-end // p)
    rows, cols, vals = [], [], []
    for i in range(n_out):
        lo, hi = i * p, min((i + 1) * p, end)
        for j in range(lo // q, -(-hi // q)):
            overlap = min(hi, (j + 1) * q) - max(lo, j * q)
            if overlap > 0:
                rows.append(i)
                cols.append(j)
                vals.append(overlap)
    return sparse.csr_matrix(
        (np.asarray(vals, dtype=np.int64), (rows, cols)), shape=(n_out, n_in)
    )


def downsample(img: np.ndarray, factor: Factor) -> np.ndarray:
    """Area-average an image by a rational factor >= 1.

    Each output pixel is the coverage-weighted mean of the input pixels under
    its footprint, rounded half-up. Partial cells at the right and bottom
    edges average only the pixels they actually cover.
    """
    factor = _fraction(factor)
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    img = np.asarray(img)
    if img.ndim not in (2, 3) or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"malformed image of shape {img.shape}")
    if factor == 1:
        return img.copy()

    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    wy = _axis_weights(h, factor)
    wx = _axis_weights(w, factor)
    ysum = np.asarray(wy.sum(axis=1)).ravel()
    xsum = np.asarray(wx.sum(axis=1)).ravel()
    out_h, out_w = wy.shape[0], wx.shape[0]
    out = np.empty((out_h, out_w, c), dtype=np.uint8)

    # bounded working set: ~256 input rows per band
    band = max(1, int(256 // math.ceil(factor)))
    for a in range(0, out_h, band):
        b = min(out_h, a + band)
        wy_band = wy[a:b]
        used = wy_band.indices
        r0, r1 = int(used.min()), int(used.max()) + 1
        rows = img[r0:r1].reshape(r1 - r0, w * c).astype(np.int64)
        tmp = (wy_band[:, r0:r1] @ rows).reshape(b - a, w, c)
        tmp = tmp.transpose(1, 0, 2).reshape(w, (b - a) * c)
        num = (wx @ tmp).reshape(out_w, b - a, c).transpose(1, 0, 2)
        den = np.outer(ysum[a:b], xsum)[:, :, None]
        out[a:b] = (2 * num + den) // (2 * den)
    return out[:, :, 0] if squeeze else out


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma, rounded half-up to uint8."""
    img = np.asarray(img, dtype=np.float64)
    luma = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# tile stores

class MemoryTileStore:
    """Holds each level as one white-padded array; tiles are views into it."""

    def __init__(self, tile_size: int):
        self.tile_size = tile_size
        self._levels: dict[float, np.ndarray] = {}

    def put_level(self, zoom: float, arr: np.ndarray) -> None:
        t = self.tile_size
        h, w = arr.shape[:2]
        ph, pw = -(-h // t) * t, -(-w // t) * t
        padded = np.full((ph, pw, 3), WHITE, dtype=np.uint8)
        padded[:h, :w] = arr
        padded.setflags(write=False)
        self._levels[float(zoom)] = padded

    def tile(self, zoom: float, col: int, row: int) -> np.ndarray:
        t = self.tile_size
        return self._levels[float(zoom)][row * t:(row + 1) * t, col * t:(col + 1) * t]


class DiskTileStore:
    """Lazily decodes PNG tiles from a pyramid directory."""

    def __init__(self, root: Path, tile_size: int, cache_tiles: int = 256):
        self.root = Path(root)
        self.tile_size = tile_size
        self._cache: dict[tuple, np.ndarray] = {}
        self._order: list[tuple] = []
        self._limit = cache_tiles
        self._lock = threading.Lock()

    def tile(self, zoom: float, col: int, row: int) -> np.ndarray:
        key = (float(zoom), col, row)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        path = self.root / f"level_{zoom_label(zoom)}" / f"tile_{col}_{row}.png"
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if arr.shape != (self.tile_size, self.tile_size, 3):
            raise PyramidFormatError(f"{path}: unexpected tile shape {arr.shape}")
        arr.setflags(write=False)
        with self._lock:
            if key not in self._cache:
                self._cache[key] = arr
                self._order.append(key)
                if len(self._order) > self._limit:
                    self._cache.pop(self._order.pop(0), None)
        return arr


# ---------------------------------------------------------------------------

@dataclass
class PyramidImage:
    base_width: int
    base_height: int
    tile_size: int
    levels: dict[float, tuple[int, int]]
    store: object = field(repr=False)

    def level_size(self, zoom: float) -> tuple[int, int]:
        try:
            return self.levels[float(zoom)]
        except (KeyError, TypeError, ValueError):
            raise UnknownZoom(f"zoom {zoom!r} not in pyramid levels {sorted(self.levels)}")

    def grid(self, zoom: float) -> tuple[int, int]:
        """Number of tile columns and rows at a level."""
        w, h = self.level_size(zoom)
        t = self.tile_size
        return -(-w // t), -(-h // t)

    def tile(self, zoom: float, col: int, row: int) -> np.ndarray:
        cols, rows = self.grid(zoom)
        if not (0 <= col < cols and 0 <= row < rows):
            raise IndexError(f"tile ({col}, {row}) outside {cols}x{rows} grid")
        return self.store.tile(float(zoom), col, row)

    def read_region(self, zoom: float, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Read a ``w`` x ``h`` RGB window; pixels outside the level are white."""
        lw, lh = self.level_size(zoom)
        if w <= 0 or h <= 0:
            raise ValueError(f"region size must be positive, got {w}x{h}")
        out = np.full((h, w, 3), WHITE, dtype=np.uint8)
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, lw), min(y + h, lh)
        if x0 >= x1 or y0 >= y1:
            return out
        t = self.tile_size
        for row in range(y0 // t, (y1 - 1) // t + 1):
            for col in range(x0 // t, (x1 - 1) // t + 1):
                tile = self.store.tile(float(zoom), col, row)
                tx0, ty0 = col * t, row * t
                sx0, sx1 = max(x0, tx0), min(x1, tx0 + t)
                sy0, sy1 = max(y0, ty0), min(y1, ty0 + t)
                out[sy0 - y:sy1 - y, sx0 - x:sx1 - x] = tile[sy0 - ty0:sy1 - ty0, sx0 - tx0:sx1 - tx0]
        return out

    def read_level(self, zoom: float) -> np.ndarray:
        w, h = self.level_size(zoom)
        return self.read_region(zoom, 0, 0, w, h)


def build_pyramid(base: np.ndarray, tile_size: int = 512) -> PyramidImage:
    base = np.asarray(base, dtype=np.uint8)
    if base.ndim != 3 or base.shape[2] != 3 or base.size == 0:
        raise ValueError(f"base must be a non-empty HxWx3 image, got {base.shape}")
    if tile_size <= 0 or tile_size & (tile_size - 1):
        raise ValueError(f"tile_size must be a power of two, got {tile_size}")
    h, w = base.shape[:2]
    store = MemoryTileStore(tile_size)
    levels = {}
    for zoom in ZOOMS:
        arr = downsample(base, _fraction(BASE_ZOOM) / _fraction(zoom))
        expected = level_dimensions(w, h, zoom)
        assert (arr.shape[1], arr.shape[0]) == expected, (arr.shape, expected)
        store.put_level(zoom, arr)
        levels[zoom] = expected
    return PyramidImage(w, h, tile_size, levels, store)


def _manifest(pyr: PyramidImage) -> dict:
    levels = []
    for zoom in sorted(pyr.levels, reverse=True):
        w, h = pyr.levels[zoom]
        cols, rows = pyr.grid(zoom)
        levels.append({"zoom": zoom, "name": f"level_{zoom_label(zoom)}",
                       "width": w, "height": h, "columns": cols, "rows": rows})
    return {"format_version": FORMAT_VERSION, "base_width": pyr.base_width,
            "base_height": pyr.base_height, "tile_size": pyr.tile_size, "levels": levels}


def save_pyramid(pyr: PyramidImage, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for zoom in pyr.levels:
        level_dir = path / f"level_{zoom_label(zoom)}"
        level_dir.mkdir(exist_ok=True)
        cols, rows = pyr.grid(zoom)
        for row in range(rows):
            for col in range(cols):
                Image.fromarray(np.ascontiguousarray(pyr.tile(zoom, col, row))).save(
                    level_dir / f"tile_{col}_{row}.png", compress_level=1)
    (path / "manifest.json").write_text(json.dumps(_manifest(pyr), indent=2))
    return path


def open_pyramid(path: Union[str, Path]) -> PyramidImage:
    path = Path(path)
    try:
        meta = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise PyramidFormatError(f"{path}: no manifest.json")
    if meta.get("format_version") != FORMAT_VERSION:
        raise PyramidFormatError(f"{path}: unsupported format_version {meta.get('format_version')}")
    levels = {float(lv["zoom"]): (int(lv["width"]), int(lv["height"])) for lv in meta["levels"]}
    bw, bh = int(meta["base_width"]), int(meta["base_height"])
    for zoom, dims in levels.items():
        if dims != level_dimensions(bw, bh, zoom):
            raise PyramidFormatError(f"{path}: level {zoom} has dimensions {dims}")
    store = DiskTileStore(path, int(meta["tile_size"]))
    return PyramidImage(bw, bh, int(meta["tile_size"]), levels, store)


def iter_grid(width: int, height: int, side: int) -> Iterable[tuple[int, int]]:
    """Row-major top-left corners of a non-overlapping ``side`` grid covering a level."""
    for y in range(0, height, side):
        for x in range(0, width, side):
            yield x, y
