"""Lattice selection, patch centers, extraction windows, and offsets."""

from fractions import Fraction

import numpy as np
import pytest

from graph_iqa.errors import DataError
from graph_iqa.grid import (
    GridSpec,
    ImageDims,
    extract_patches,
    offset_layout,
    patch_centers,
    select_grid,
)

UHD = ImageDims(3840, 2160)


def oracle_select(n, dims):
    """Exact-rational aspect comparison, independent of the implementation."""
    best = None
    best_ratio = None
    for g_w in range(1, n + 1):
        if n % g_w:
            continue
        g_h = n // g_w
        r = Fraction(g_w * dims.height, g_h * dims.width)
        score = max(r, 1 / r)
        if best is None or score < best_ratio or (score == best_ratio and g_w > best[0]):
            best = (g_w, g_h)
            best_ratio = score
    return best


class TestSelectGrid:
    def test_reported_configurations(self):
        assert (select_grid(216, UHD).g_w, select_grid(216, UHD).g_h) == (18, 12)
        assert (select_grid(150, UHD).g_w, select_grid(150, UHD).g_h) == (15, 10)
        assert (select_grid(294, UHD).g_w, select_grid(294, UHD).g_h) == (21, 14)

    def test_single_patch(self):
        spec = select_grid(1, ImageDims(123, 456))
        assert (spec.g_w, spec.g_h) == (1, 1)

    def test_exact_factorization_all_budgets(self):
        for n in range(1, 1001):
            spec = select_grid(n, UHD)
            assert spec.g_w * spec.g_h == n

    def test_matches_rational_oracle(self, rng):
        for _ in range(300):
            n = int(rng.integers(1, 1000))
            dims = ImageDims(int(rng.integers(1, 8000)), int(rng.integers(1, 8000)))
            spec = select_grid(n, dims)
            assert (spec.g_w, spec.g_h) == oracle_select(n, dims)

    def test_square_tie_breaks_to_wider_grid(self):
        spec = select_grid(24, ImageDims(100, 100))
        assert (spec.g_w, spec.g_h) == (6, 4)


class TestPatchCenters:
    def test_single_cell_midpoint(self):
        layout = patch_centers(GridSpec(1, 1, 1), ImageDims(100, 100))
        np.testing.assert_allclose(layout.centers_px, [[50.0, 50.0]])
        np.testing.assert_allclose(layout.centers_norm, [[0.5, 0.5]])

    def test_two_by_two_lattice(self):
        layout = patch_centers(GridSpec(2, 2, 1), ImageDims(100, 100))
        np.testing.assert_allclose(
            layout.centers_px, [[25, 25], [75, 25], [25, 75], [75, 75]]
        )

    def test_uhd_first_center(self):
        layout = patch_centers(GridSpec(18, 12, 256), UHD)
        np.testing.assert_allclose(layout.centers_norm[0], [0.5 / 18, 0.5 / 12])
        assert layout.n_patches == 216

    def test_normalized_centers_strictly_interior(self, rng):
        for _ in range(50):
            g_w = int(rng.integers(1, 30))
            g_h = int(rng.integers(1, 30))
            dims = ImageDims(int(rng.integers(10, 5000)), int(rng.integers(10, 5000)))
            layout = patch_centers(GridSpec(g_w, g_h, 1), dims)
            assert np.all(layout.centers_norm > 0.0)
            assert np.all(layout.centers_norm < 1.0)

    def test_row_major_order(self):
        layout = patch_centers(GridSpec(3, 2, 1), ImageDims(30, 20))
        xs = layout.centers_px[:, 0]
        ys = layout.centers_px[:, 1]
        assert list(xs[:3]) == [5, 15, 25]
        assert ys[0] == ys[1] == ys[2] == 5
        assert ys[3] == ys[4] == ys[5] == 15


class TestExtractPatches:
    def test_whole_image_patch(self, rng):
        image = rng.random((256, 256, 3))
        layout = patch_centers(GridSpec(1, 1, 256), ImageDims(256, 256))
        (patch,) = extract_patches(image, layout, 256)
        np.testing.assert_array_equal(patch, image)

    def test_border_clamping(self, rng):
        image = rng.random((100, 100, 3))
        layout = patch_centers(GridSpec(1, 1, 32), ImageDims(100, 100))
        clamped = type(layout)(
            centers_norm=np.array([[0.1, 0.1]]),
            centers_px=np.array([[10.0, 10.0]]),
            grid=layout.grid,
            dims=layout.dims,
        )
        (patch,) = extract_patches(image, clamped, 32)
        np.testing.assert_array_equal(patch, image[0:32, 0:32])

    def test_uhd_grid_windows_all_inside(self):
        # 216 windows of 256 px on a 3840x2160 canvas: verify in-bounds by scan
        layout = patch_centers(GridSpec(18, 12, 256), UHD)
        for cx, cy in layout.centers_px:
            x0 = min(max(int(np.floor(cx - 128 + 0.5)), 0), 3840 - 256)
            y0 = min(max(int(np.floor(cy - 128 + 0.5)), 0), 2160 - 256)
            assert 0 <= x0 <= 3840 - 256
            assert 0 <= y0 <= 2160 - 256
        image = np.zeros((2160, 3840, 3), dtype=np.float32)
        patches = extract_patches(image, layout, 256)
        assert len(patches) == 216
        assert all(p.shape == (256, 256, 3) for p in patches)

    def test_oversized_patch_rejected(self, rng):
        image = rng.random((64, 64, 3))
        layout = patch_centers(GridSpec(1, 1, 128), ImageDims(64, 64))
        with pytest.raises(DataError, match="patch exceeds image"):
            extract_patches(image, layout, 128)

    def test_byte_for_byte_determinism(self, rng):
        image = rng.random((128, 128, 3))
        layout = patch_centers(GridSpec(3, 3, 48), ImageDims(128, 128))
        first = extract_patches(image, layout, 48)
        second = extract_patches(image, layout, 48)
        for a, b in zip(first, second):
            assert a.tobytes() == b.tobytes()


class TestOffsetLayout:
    def test_zero_fraction_is_identity(self):
        layout = patch_centers(GridSpec(4, 3, 16), ImageDims(200, 150))
        assert offset_layout(layout, ImageDims(200, 150), 0.0) is layout

    def test_half_cell_shift_before_clamp(self):
        dims = ImageDims(100, 100)
        layout = patch_centers(GridSpec(2, 2, 10), dims)
        shifted = offset_layout(layout, dims, 0.5)
        # pitch is 50 px, so x centers move 25 px right; the right column
        # at 75 + 25 = 100 clamps to 95 so its 10 px window stays inside
        assert shifted.centers_px[0, 0] == 50.0
        assert shifted.centers_px[1, 0] == 95.0

    def test_windows_remain_extractable(self, rng):
        dims = ImageDims(120, 90)
        image = rng.random((90, 120, 3))
        layout = patch_centers(GridSpec(5, 4, 24), dims)
        for fraction in (0.0, 0.25, 0.5, 0.9):
            shifted = offset_layout(layout, dims, fraction)
            patches = extract_patches(image, shifted, 24)
            assert len(patches) == 20
            half = 12.0
            assert np.all(shifted.centers_px[:, 0] >= half - 1e-9)
            assert np.all(shifted.centers_px[:, 0] <= 120 - half + 1e-9)
