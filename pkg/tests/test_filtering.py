import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from icdetect.datagen import CenterProfile, SlideLayout, generate_slide
from icdetect.filtering import (BLURRY, INSUFFICIENT_TISSUE, NO_NUCLEI, REASONS, DetectorError,
                                FilterConfig, FilterReport, PatchRef, PatchTooSmall, blur_filter,
                                filter_patches, laplacian_variance, nuclei_filter, run_cascade,
                                tissue_fraction_filter)
from icdetect.pyramid import build_pyramid
from icdetect.segmentation import epithelium_mask, tissue_mask, tissue_mask_or_empty

from oracles import dense_correlate, gaussian_kernel_1d

LAPLACE = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], float)


def checkerboard(n=16):
    return ((np.indices((n, n)).sum(axis=0) % 2) * 255).astype(np.uint8)


def test_laplacian_constant_and_ramp():
    assert laplacian_variance(np.full((10, 10), 93, np.uint8)) == 0.0
    ramp = np.tile(np.arange(12, dtype=np.uint8), (8, 1))
    assert laplacian_variance(ramp) == 0.0


def test_laplacian_checkerboard():
    board = checkerboard()
    resp = dense_correlate(board, LAPLACE, clamp=False)
    assert set(np.unique(resp)) == {-1020.0, 1020.0}
    assert resp.mean() == 0.0
    assert laplacian_variance(board) == pytest.approx(1_040_400.0)
    assert laplacian_variance(board) == pytest.approx(resp.var())


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(3, 12), st.integers(3, 12))))
def test_laplacian_matches_dense_oracle(patch):
    assert laplacian_variance(patch) == pytest.approx(dense_correlate(patch, LAPLACE, clamp=False).var(),
                                                      rel=1e-9, abs=1e-9)


def test_laplacian_too_small():
    with pytest.raises(PatchTooSmall):
        laplacian_variance(np.zeros((2, 5)))
    with pytest.raises(PatchTooSmall):
        blur_filter(np.zeros((5, 2)), FilterConfig())


def test_blur_filter_examples():
    cfg = FilterConfig()
    assert blur_filter(np.full((8, 8), 40, np.uint8), cfg) == BLURRY
    assert blur_filter(checkerboard(), cfg) is None


def test_blurred_texture_has_lower_variance():
    from scipy import ndimage
    rng = np.random.default_rng(0)
    k = gaussian_kernel_1d(8.0)
    for _ in range(5):
        tex = rng.integers(0, 256, (96, 96)).astype(float)
        smooth = ndimage.correlate1d(ndimage.correlate1d(tex, k, axis=0, mode="nearest"), k, axis=1,
                                     mode="nearest")
        assert laplacian_variance(smooth) < laplacian_variance(tex)


def mixed(values: dict, n=100):
    flat = np.concatenate([np.full(int(round(f * n)), v, np.uint8) for v, f in values.items()])
    return flat.reshape(10, -1)


def test_tissue_fraction_examples():
    cfg = FilterConfig()
    assert tissue_fraction_filter(np.full((16, 16), 255, np.uint8), cfg) == INSUFFICIENT_TISSUE
    assert tissue_fraction_filter(mixed({255: 0.6, 80: 0.4}), cfg) is None
    assert tissue_fraction_filter(mixed({240: 0.95, 50: 0.05}), cfg) == INSUFFICIENT_TISSUE


def tissue_oracle(gray, thres_1, thres_2):
    counts = {}
    for v in gray.ravel().tolist():
        counts[v] = counts.get(v, 0) + 1
    top = max(counts.values())
    val = min(v for v, c in counts.items() if c == top)
    prop = sum(1 for i in gray.ravel().tolist() if abs(val - i) < thres_1) / gray.size
    return prop > thres_2


@settings(max_examples=80, deadline=None)
@given(arrays(np.uint8, (8, 8), elements=st.integers(200, 255)), st.integers(1, 40),
       st.floats(0.05, 1.0))
def test_tissue_fraction_matches_direct_count(gray, t1, t2):
    cfg = FilterConfig(thres_1=t1, thres_2=t2)
    assert (tissue_fraction_filter(gray, cfg) == INSUFFICIENT_TISSUE) == tissue_oracle(gray, t1, t2)


def test_tissue_fraction_is_symmetric_around_mode():
    # pixels just below the mode count the same as pixels just above it
    cfg = FilterConfig(thres_1=10, thres_2=0.9)
    below = mixed({200: 0.5, 191: 0.45, 100: 0.05})
    above = mixed({200: 0.5, 209: 0.45, 100: 0.05})
    assert tissue_fraction_filter(below, cfg) == tissue_fraction_filter(above, cfg) == INSUFFICIENT_TISSUE


def test_nuclei_examples():
    cfg = FilterConfig()
    white = np.full((20, 20, 3), 255, np.uint8)
    assert nuclei_filter(white, cfg) == NO_NUCLEI
    patch = white.copy()
    patch.reshape(-1, 3)[:80] = (40, 30, 120)  # 20% dark, blue-dominant
    assert nuclei_filter(patch, cfg) is None
    red = white.copy()
    red.reshape(-1, 3)[:80] = (120, 30, 40)   # dark but red-dominant
    assert nuclei_filter(red, cfg) == NO_NUCLEI
    assert nuclei_filter(white, cfg, detector=lambda p: True) is None


def test_detector_failures_surface():
    cfg = FilterConfig()
    white = np.full((4, 4, 3), 255, np.uint8)

    def broken(_):
        raise RuntimeError("boom")

    with pytest.raises(DetectorError):
        nuclei_filter(white, cfg, detector=broken)
    with pytest.raises(DetectorError):
        nuclei_filter(white, cfg, detector=lambda p: 0.7)


def test_cascade_order_and_single_reason():
    side = 64
    texture = np.random.default_rng(3).integers(0, 256, (side, side, 3)).astype(np.uint8)
    texture[..., 2] = np.maximum(texture[..., 2], texture[..., 0])
    tiles = [
        np.full((side, side, 3), 255, np.uint8),        # fails nuclei, blur and tissue
        np.full((side, side, 3), (40, 30, 120), np.uint8),  # has "nuclei", flat: blurry
        texture,                                        # passes everything
    ]
    half = np.full((side, side, 3), 250, np.uint8)
    half[::4, ::4] = (20, 10, 90)                       # 6% nuclei, sharp, but mostly glass
    tiles.append(half)
    base = np.concatenate(tiles, axis=1)
    pyr = build_pyramid(base, tile_size=64)
    refs = [PatchRef(20.0, i * side, 0, side) for i in range(len(tiles))]
    cfg = FilterConfig(patch_side=side)
    evaluated, report = run_cascade(pyr, refs, cfg)
    assert [r.reason for r in evaluated] == [NO_NUCLEI, BLURRY, None, INSUFFICIENT_TISSUE]
    assert report.reconciles()
    assert report.total == 4 and report.retained == 1


def test_patch_ref_status():
    assert PatchRef(20.0, 0, 0).status == "retained"
    assert PatchRef(20.0, 0, 0, reason=BLURRY).status == "discarded(blurry)"
    with pytest.raises(ValueError):
        PatchRef(20.0, 0, 0, side=0)


def test_blank_slide_filters_to_nothing():
    pyr = build_pyramid(np.full((1024, 1024, 3), 255, np.uint8))
    tissue = tissue_mask_or_empty(pyr)
    retained, report = filter_patches(pyr, epithelium_mask(pyr, tissue), tissue=tissue)
    assert retained == [] and report.total == 0 and report.reconciles()


@pytest.fixture(scope="module")
def slide():
    s = generate_slide(CenterProfile(), SlideLayout(side=2048, epithelium_fraction=0.25,
                                                    ic_fraction=0.1, blur_fraction=0.2), seed=11)
    tissue = tissue_mask(s.pyramid)
    return s.pyramid, tissue, epithelium_mask(s.pyramid, tissue)


def test_filter_patches_is_deterministic_row_major(slide):
    pyr, tissue, epi = slide
    a, rep_a = filter_patches(pyr, epi, tissue=tissue)
    b, rep_b = filter_patches(pyr, epi, tissue=tissue)
    c, _ = filter_patches(pyr, epi, tissue=tissue, workers=8)
    assert a == b == c
    assert [(r.y, r.x) for r in a] == sorted((r.y, r.x) for r in a)
    assert rep_a.reconciles() and rep_a.retained == len(a)
    assert rep_a.total >= rep_a.retained > 0
    assert rep_a.discarded == rep_b.discarded


@pytest.mark.parametrize("knob,values", [("blur_variance_min", [0.0, 50.0, 200.0, 800.0, 3000.0]),
                                         ("nuclei_min_fraction", [0.0, 0.05, 0.15, 0.3, 0.6])])
def test_retained_set_shrinks_monotonically(slide, knob, values):
    pyr, tissue, epi = slide
    previous = None
    for v in values:
        kept, _ = filter_patches(pyr, epi, FilterConfig(**{knob: v}))
        kept = {(r.x, r.y) for r in kept}
        if previous is not None:
            assert kept <= previous
        previous = kept


def test_report_merge_is_associative():
    def rep(seed):
        rng = np.random.default_rng(seed)
        d = {r: int(rng.integers(0, 9)) for r in REASONS}
        kept = int(rng.integers(0, 9))
        return FilterReport(total=sum(d.values()) + kept, retained=kept, discarded=d,
                            tissue_candidates=int(rng.integers(0, 50)))
    a, b, c = rep(1), rep(2), rep(3)
    left, right = a.merge(b).merge(c), a.merge(b.merge(c))
    assert left.to_json()["discarded"] == right.to_json()["discarded"]
    assert (left.total, left.retained, left.tissue_candidates) == (right.total, right.retained,
                                                                   right.tissue_candidates)
    assert left.reconciles()
