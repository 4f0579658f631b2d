"""Rendering: prompted images and attention heatmaps as lossless PNGs.

Heatmaps are the head-averaged final-layer query attention over spatial
tokens, reshaped to t x t, bilinearly upsampled to the image size
(align_corners=False) and colorized with matplotlib's viridis colormap. The
original/prompted pair shares one color scale (0 to the pair's maximum) so
the two panels are directly comparable.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from matplotlib import colormaps
from PIL import Image

from .encoders.config import query_attention_mean
from .encoders.vit import VisionEncoder
from .geometry import PixelLocation, insert_patch
from .prior import Prompt, save_prompt_rgba

_COLORMAP = "viridis"


def tensor_to_png(image: torch.Tensor, path) -> None:
    arr = (image.detach().cpu().numpy().clip(0.0, 1.0) * 255).round().astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def upsample_token_grid(grid: torch.Tensor, n: int) -> torch.Tensor:
    """Bilinear t x t -> n x n upsampling of a token-space map."""
    x = grid.reshape(1, 1, *grid.shape).to(torch.float32)
    return F.interpolate(x, size=(n, n), mode="bilinear", align_corners=False)[0, 0]


def colorize(values: torch.Tensor, vmax: float) -> np.ndarray:
    """Map nonnegative values to RGB uint8 with a shared [0, vmax] scale."""
    scaled = (values / vmax if vmax > 0 else torch.zeros_like(values)).clamp(0.0, 1.0)
    rgba = colormaps[_COLORMAP](scaled.detach().cpu().numpy())
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def attention_heatmap_pair(
    row_original: torch.Tensor, row_prompted: torch.Tensor, t: int, n: int
) -> np.ndarray:
    """Side-by-side colorized heatmaps (original left, prompted right)."""
    panels = []
    maps = [row.reshape(t, t) for row in (row_original, row_prompted)]
    upsampled = [upsample_token_grid(m, n) for m in maps]
    vmax = max(float(u.max()) for u in upsampled)
    for u in upsampled:
        panels.append(colorize(u, vmax))
    separator = np.full((n, 4, 3), 255, dtype=np.uint8)
    return np.concatenate([panels[0], separator, panels[1]], axis=1)


def render_outputs(
    prompt: Prompt,
    encoder: VisionEncoder,
    image: torch.Tensor,
    loc: PixelLocation,
    out_dir,
) -> dict[str, str]:
    """Write the prompt (RGBA), the prompted image, and the original-vs-
    prompted final-layer heatmap pair; returns the written file paths."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    cfg = encoder.config
    offset = 1 if cfg.has_query_slot else 0
    prompted = insert_patch(image, prompt.rgb, prompt.mask, loc)
    with torch.no_grad():
        _, trace_orig = encoder.forward_with_attention(image)
        _, trace_prompt = encoder.forward_with_attention(prompted)
    row_orig = query_attention_mean(trace_orig, cfg.layers)[offset:]
    row_prompt = query_attention_mean(trace_prompt, cfg.layers)[offset:]
    pair = attention_heatmap_pair(row_orig, row_prompt, cfg.tokens_per_side, cfg.image_size)

    paths = {
        "prompt_rgba": str(out_dir / "prompt_rgba.png"),
        "original_image": str(out_dir / "original_image.png"),
        "prompted_image": str(out_dir / "prompted_image.png"),
        "attention_heatmaps": str(out_dir / "attention_heatmaps.png"),
    }
    save_prompt_rgba(prompt, paths["prompt_rgba"])
    tensor_to_png(image, paths["original_image"])
    tensor_to_png(prompted, paths["prompted_image"])
    Image.fromarray(pair).save(paths["attention_heatmaps"], format="PNG")
    return paths
