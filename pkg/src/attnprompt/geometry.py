"""Patch geometry: shape masks, placement validity, insertion, token overlap.

Conventions used throughout the package:

* Images are torch tensors of shape (n, n, 3) with values in [0, 1].
* Coordinates are (row, col) = (i, j) pixels; a patch of even size m centered
  at (i, j) occupies the half-open window [i - m/2, i + m/2) x [j - m/2, j + m/2).
* Masks are binary (m, m) uint8 rasters. The boundary test places pixel
  centers on integer coordinates, puts the grid center at ((m-1)/2, (m-1)/2),
  and keeps a pixel when its distance from the center is >= the inner radius
  (lambda * m / 2) and < the outer radius (m / 2). No anti-aliasing.

Everything here is a pure function on immutable inputs; all randomness comes
from an explicitly passed numpy Generator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .errors import BoundaryError, ConfigurationError, ContractError, InvalidSpecError

PATCH_SHAPES = ("filled_square", "hollow_square", "hollow_circle")


@dataclass(frozen=True)
class PatchSpec:
    """Size, outline shape and thickness ratio of a prompt patch.

    ``thickness_ratio`` is the inner diameter of a hollow shape divided by its
    outer diameter; 0 degenerates to the filled shape.
    """

    size: int
    shape: str = "filled_square"
    thickness_ratio: float = 0.0

    def __post_init__(self):
        if self.shape not in PATCH_SHAPES:
            raise InvalidSpecError(
                f"unknown patch shape {self.shape!r}; expected one of {PATCH_SHAPES}"
            )
        if self.size <= 0 or self.size % 2 != 0:
            raise InvalidSpecError(f"patch size must be a positive even integer, got {self.size}")
        if not 0.0 <= self.thickness_ratio < 1.0:
            raise InvalidSpecError(
                f"thickness_ratio must lie in [0, 1), got {self.thickness_ratio}"
            )


@dataclass(frozen=True)
class PixelLocation:
    """Center pixel (row i, col j) of a patch placement."""

    i: int
    j: int


def make_shape_mask(spec: PatchSpec) -> np.ndarray:
    """Rasterize the binary (m, m) mask for a patch spec.

    Hollow squares measure distance from the grid center with the Chebyshev
    metric, hollow circles with the Euclidean metric; the kept ring is
    [inner radius, outer radius) as described in the module docstring.
    """
    m = spec.size
    if spec.shape == "filled_square":
        return np.ones((m, m), dtype=np.uint8)
    center = (m - 1) / 2.0
    offsets = np.abs(np.arange(m, dtype=np.float64) - center)
    di, dj = np.meshgrid(offsets, offsets, indexing="ij")
    if spec.shape == "hollow_square":
        dist = np.maximum(di, dj)
    else:
        dist = np.hypot(di, dj)
    inner = spec.thickness_ratio * m / 2.0
    outer = m / 2.0
    return ((dist >= inner) & (dist < outer)).astype(np.uint8)


def location_bounds(n: int, m: int) -> tuple[int, int]:
    """Inclusive [lo, hi] range of valid center coordinates on each axis.

    Raises ConfigurationError when no interior placement exists.
    """
    half = m // 2
    lo, hi = half + 1, n - half - 1
    if lo > hi:
        raise ConfigurationError(
            f"no valid interior placement for patch size {m} on a {n}x{n} image"
        )
    return lo, hi


def is_valid_location(loc: PixelLocation, n: int, m: int) -> bool:
    half = m // 2
    return 0 < loc.i - half and 0 < loc.j - half and loc.i + half < n and loc.j + half < n


def sample_valid_location(n: int, m: int, rng: np.random.Generator) -> PixelLocation:
    """Draw one placement uniformly over the valid integer box."""
    lo, hi = location_bounds(n, m)
    i, j = rng.integers(lo, hi + 1, size=2)
    return PixelLocation(int(i), int(j))


def sample_valid_locations(
    n: int, m: int, count: int, rng: np.random.Generator
) -> list[PixelLocation]:
    """Vectorized batch form of sample_valid_location (same distribution)."""
    lo, hi = location_bounds(n, m)
    coords = rng.integers(lo, hi + 1, size=(count, 2))
    return [PixelLocation(int(i), int(j)) for i, j in coords]


def patch_window(loc: PixelLocation, m: int) -> tuple[int, int, int, int]:
    """Half-open pixel window (r0, r1, c0, c1) covered by the patch."""
    half = m // 2
    return loc.i - half, loc.i + half, loc.j - half, loc.j + half


def _as_bool_mask(mask, m: int, device) -> torch.Tensor:
    mask_t = torch.as_tensor(np.asarray(mask), device=device)
    if mask_t.shape != (m, m):
        raise ContractError(f"mask shape {tuple(mask_t.shape)} does not match patch size {m}")
    return mask_t != 0


def insert_patch(
    image: torch.Tensor,
    prompt_rgb: torch.Tensor,
    mask,
    loc: PixelLocation,
) -> torch.Tensor:
    """Replace image pixels with prompt pixels where the mask is set.

    Pure function: the input image is never modified. Replacement is exact
    (no blending); pixels outside the mask-1 window keep their input values
    bit for bit. Differentiable with respect to both image and prompt.
    """
    if image.ndim != 3 or image.shape[0] != image.shape[1] or image.shape[2] != 3:
        raise ContractError(f"expected an (n, n, 3) image, got shape {tuple(image.shape)}")
    if prompt_rgb.ndim != 3 or prompt_rgb.shape[0] != prompt_rgb.shape[1] or prompt_rgb.shape[2] != 3:
        raise ContractError(f"expected an (m, m, 3) prompt, got shape {tuple(prompt_rgb.shape)}")
    if prompt_rgb.dtype != image.dtype:
        raise ContractError(
            f"prompt dtype {prompt_rgb.dtype} does not match image dtype {image.dtype}"
        )
    n = image.shape[0]
    m = prompt_rgb.shape[0]
    if not is_valid_location(loc, n, m):
        raise BoundaryError(
            f"patch of size {m} centered at ({loc.i}, {loc.j}) leaves the {n}x{n} interior"
        )
    mask_b = _as_bool_mask(mask, m, image.device)
    r0, r1, c0, c1 = patch_window(loc, m)
    out = image.clone()
    out[r0:r1, c0:c1, :] = torch.where(mask_b[:, :, None], prompt_rgb, image[r0:r1, c0:c1, :])
    return out


def overlaid_token_set(
    loc: PixelLocation, m: int, n_t: int, t: int
) -> set[tuple[int, int]]:
    """Token tiles whose pixel footprint intersects the patch window.

    Tile (u, v) covers pixels [u*n_t, (u+1)*n_t) x [v*n_t, (v+1)*n_t); the
    patch window is the half-open box from patch_window().
    """
    n = t * n_t
    if not is_valid_location(loc, n, m):
        raise BoundaryError(
            f"patch of size {m} centered at ({loc.i}, {loc.j}) leaves the {n}x{n} interior"
        )
    r0, r1, c0, c1 = patch_window(loc, m)
    u0, u1 = r0 // n_t, (r1 - 1) // n_t
    v0, v1 = c0 // n_t, (c1 - 1) // n_t
    return {(u, v) for u in range(u0, u1 + 1) for v in range(v0, v1 + 1)}


def save_mask_png(mask: np.ndarray, path) -> None:
    """Export a binary mask as a lossless single-channel PNG (0 / 255)."""
    raster = (np.asarray(mask, dtype=np.uint8) * 255).astype(np.uint8)
    Image.fromarray(raster, mode="L").save(path, format="PNG")


def load_mask_png(path) -> np.ndarray:
    raster = np.asarray(Image.open(path).convert("L"))
    return (raster >= 128).astype(np.uint8)
