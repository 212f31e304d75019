"""Aspect-ratio-aligned patch lattices and patch extraction.

A patch budget N is factored into a rectangular grid (g_w, g_h) whose
aspect ratio tracks the image's, patch centers sit at cell midpoints,
and fixed-size windows are clamped inside the image near borders.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class ImageDims:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image dims must be >= 1, got {self.width}x{self.height}")


@dataclass(frozen=True)
class GridSpec:
    g_w: int
    g_h: int
    patch_size: int

    def __post_init__(self):
        if self.g_w < 1 or self.g_h < 1 or self.patch_size < 1:
            raise ValueError("grid dimensions and patch size must be >= 1")

    @property
    def n_patches(self):
        return self.g_w * self.g_h


@dataclass(frozen=True)
class PatchLayout:
    """Patch centers in pixel and normalized coordinates, row-major.

    `grid` and `dims` are None for layouts reconstructed from a feature
    cache, where only normalized centers survive; operations that need
    the lattice geometry (offsets, extraction) reject such layouts.
    """

    centers_norm: np.ndarray  # (N, 2) in [0, 1]^2
    centers_px: np.ndarray | None = None  # (N, 2) pixel coords
    grid: GridSpec | None = None
    dims: ImageDims | None = None

    @property
    def n_patches(self):
        return self.centers_norm.shape[0]


def select_grid(n_patches, dims, patch_size=1):
    """Pick the factor pair (g_w, g_h) of n_patches closest in log-aspect
    to the image's width/height ratio; ties go to the larger g_w.

    The comparison |ln(g_w/g_h) - ln(W/H)| is carried out exactly with
    integer cross-multiplication so that exact ties never depend on
    floating-point rounding.
    """
    if n_patches < 1:
        raise ValueError("n_patches must be >= 1")
    best = None
    best_key = None
    for g_w in range(1, n_patches + 1):
        if n_patches % g_w:
            continue
        g_h = n_patches // g_w
        # |ln((g_w*H)/(g_h*W))| ranks like max(p,q)/min(p,q) for p=g_w*H, q=g_h*W
        p = g_w * dims.height
        q = g_h * dims.width
        hi, lo = (p, q) if p >= q else (q, p)
        if best is None or hi * best_key[1] < best_key[0] * lo or (
            hi * best_key[1] == best_key[0] * lo and g_w > best[0]
        ):
            best = (g_w, g_h)
            best_key = (hi, lo)
    return GridSpec(g_w=best[0], g_h=best[1], patch_size=patch_size)


def patch_centers(grid, dims):
    """Centers of a g_w x g_h lattice of equal cells, row-major order."""
    xs = (np.arange(grid.g_w) + 0.5) * (dims.width / grid.g_w)
    ys = (np.arange(grid.g_h) + 0.5) * (dims.height / grid.g_h)
    gx, gy = np.meshgrid(xs, ys)  # rows vary over y
    px = np.stack([gx.ravel(), gy.ravel()], axis=1)
    norm = px / np.array([dims.width, dims.height], dtype=np.float64)
    return PatchLayout(centers_norm=norm, centers_px=px, grid=grid, dims=dims)


def _window_origin(center, patch_size, extent):
    """Integer window start for a patch centered at `center`, clamped in-bounds."""
    left = int(np.floor(center - patch_size / 2.0 + 0.5))
    return min(max(left, 0), extent - patch_size)


def extract_patches(image, layout, patch_size):
    """Cut P x P windows around each center, shifting windows flush with the
    border when a center sits within P/2 of it. Output order = layout order.
    """
    image = np.asarray(image)
    h, w = image.shape[0], image.shape[1]
    if patch_size > w or patch_size > h:
        raise DataError(
            f"patch exceeds image: patch_size={patch_size}, image={w}x{h}"
        )
    if layout.centers_px is None:
        raise DataError("layout carries no pixel centers (loaded from cache?)")
    patches = []
    for cx, cy in layout.centers_px:
        x0 = _window_origin(cx, patch_size, w)
        y0 = _window_origin(cy, patch_size, h)
        patches.append(image[y0 : y0 + patch_size, x0 : x0 + patch_size].copy())
    return patches


def offset_layout(layout, dims, fraction):
    """Shift every center by `fraction` of one cell pitch in x and y, then
    clamp centers so their patch windows stay inside the image.

    fraction = 0 returns the layout unchanged.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if fraction == 0.0:
        return layout
    if layout.grid is None or layout.dims is None:
        raise DataError("offset_layout needs a lattice-backed layout")
    grid = layout.grid
    p_half = grid.patch_size / 2.0
    dx = fraction * dims.width / grid.g_w
    dy = fraction * dims.height / grid.g_h
    shifted = layout.centers_px + np.array([dx, dy])
    shifted[:, 0] = np.clip(shifted[:, 0], p_half, dims.width - p_half)
    shifted[:, 1] = np.clip(shifted[:, 1], p_half, dims.height - p_half)
    norm = shifted / np.array([dims.width, dims.height], dtype=np.float64)
    return PatchLayout(centers_norm=norm, centers_px=shifted, grid=grid, dims=dims)
