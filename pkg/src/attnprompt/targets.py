"""Gaussian attention targets over the token grid.

The desired attention distribution for a placement is an isotropic Gaussian
in token coordinates, centered at the real-valued token position of the patch
center and normalized to sum to 1 over the t x t grid. The width comes from
interpreting the patch size in token space as a full width at half maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import ContractError, InvalidSpecError
from .geometry import PixelLocation

# FWHM = 2 sqrt(2 ln 2) * sigma for a Gaussian.
_FWHM_FACTOR = 2.0 * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class TokenGrid:
    """Token tiling of an image: t tokens per side, n_t pixels per tile."""

    tokens_per_side: int
    tile_pixels: int

    def __post_init__(self):
        if self.tokens_per_side < 2:
            raise InvalidSpecError(f"need at least 2 tokens per side, got {self.tokens_per_side}")
        if self.tile_pixels < 1:
            raise InvalidSpecError(f"tile_pixels must be positive, got {self.tile_pixels}")

    @property
    def image_pixels(self) -> int:
        return self.tokens_per_side * self.tile_pixels


@dataclass(frozen=True)
class TargetMap:
    """Normalized t x t attention target with its center and width."""

    grid: np.ndarray
    center: tuple[float, float]
    sigma: float


def sigma_from_patch(m: int, n_t: int) -> float:
    """Gaussian width for a patch of m pixels on n_t-pixel tiles.

    The patch size in token space, m / n_t, is treated as the FWHM.
    """
    if m <= 0 or n_t <= 0:
        raise InvalidSpecError(f"patch and tile sizes must be positive, got m={m}, n_t={n_t}")
    return (m / n_t) / _FWHM_FACTOR


def gaussian_target_map(loc: PixelLocation, grid: TokenGrid, sigma: float) -> TargetMap:
    """Normalized Gaussian over token tiles for a patch centered at ``loc``.

    The center keeps sub-token precision: (x, y) = (i / n_t, j / n_t). Each
    tile is evaluated at its center (u + 0.5, v + 0.5) in token units.
    """
    if sigma <= 0:
        raise InvalidSpecError(f"sigma must be positive, got {sigma}")
    n = grid.image_pixels
    if not (0 <= loc.i < n and 0 <= loc.j < n):
        raise ContractError(f"location ({loc.i}, {loc.j}) outside the {n}x{n} image")
    x = loc.i / grid.tile_pixels
    y = loc.j / grid.tile_pixels
    t = grid.tokens_per_side
    centers = np.arange(t, dtype=np.float64) + 0.5
    du = centers - x
    dv = centers - y
    log_w = -(du[:, None] ** 2 + dv[None, :] ** 2) / (2.0 * sigma * sigma)
    # Shift by the max before exponentiating so narrow Gaussians cannot
    # underflow to an all-zero grid; ratios (and the normalized map) are
    # unchanged.
    weights = np.exp(log_w - log_w.max())
    return TargetMap(grid=weights / weights.sum(), center=(x, y), sigma=float(sigma))


def target_query_row(tmap: TargetMap, has_query_slot: bool) -> np.ndarray:
    """Flatten a target map into a row aligned with the encoder's query row.

    Encoders with a class/query token get a zero-mass slot prepended for the
    query's self-attention position; the spatial entries are unchanged, so
    the row still sums to 1.
    """
    flat = np.asarray(tmap.grid, dtype=np.float64).reshape(-1)
    if not has_query_slot:
        return flat.copy()
    return np.concatenate(([0.0], flat))


def save_target_png(tmap: TargetMap, path) -> None:
    """Export a target map as a lossless grayscale PNG, scaled so the peak
    entry maps to 255."""
    grid = np.asarray(tmap.grid, dtype=np.float64)
    peak = grid.max()
    raster = np.zeros_like(grid) if peak <= 0 else grid / peak
    Image.fromarray((raster * 255).round().astype(np.uint8), mode="L").save(path, format="PNG")
