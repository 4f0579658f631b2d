"""Prompt effectiveness metrics and the reference baseline transforms.

Covers per-layer relative attention gain on the overlaid tokens, an argmax
localization hit rate, crop/blur/red-circle/random-location baseline image
transforms, and keypoint naming against precomputed label embeddings.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from safetensors import safe_open
from safetensors.torch import save_file

from .encoders.config import AttentionTrace, EncoderConfig, query_attention_mean
from .encoders.vit import VisionEncoder
from .errors import ContractError, DatasetError
from .geometry import (
    PatchSpec,
    PixelLocation,
    insert_patch,
    is_valid_location,
    make_shape_mask,
    overlaid_token_set,
    sample_valid_location,
)
from .prior import Prompt

logger = logging.getLogger(__name__)

BASELINE_KINDS = ("random_loc", "crop", "blur", "red_circle")
_EVAL_BATCH = 32


@dataclass
class GainProfile:
    """Relative attention gain per layer for one placement.

    gain_l = (prompted - original) / original, where both sides are the mean
    query-attention mass over the tokens overlaid by the patch. Layers whose
    original mass is zero (or that expose no query row) carry NaN.
    """

    gains: list[float]
    loc: PixelLocation
    overlaid: set[tuple[int, int]]


def _overlaid_flat_indices(
    loc: PixelLocation, m: int, config: EncoderConfig
) -> tuple[set[tuple[int, int]], torch.Tensor]:
    tokens = overlaid_token_set(loc, m, config.tile_size, config.tokens_per_side)
    offset = 1 if config.has_query_slot else 0
    t = config.tokens_per_side
    idx = torch.tensor(sorted(offset + u * t + v for u, v in tokens), dtype=torch.long)
    return tokens, idx


def gain_profile_from_traces(
    trace_original: AttentionTrace,
    trace_prompted: AttentionTrace,
    loc: PixelLocation,
    m: int,
    config: EncoderConfig,
) -> GainProfile:
    """Compute the gain profile from two already-extracted traces."""
    tokens, idx = _overlaid_flat_indices(loc, m, config)
    gains = []
    for layer in range(1, trace_original.layers + 1):
        try:
            row_orig = query_attention_mean(trace_original, layer)
            row_prompt = query_attention_mean(trace_prompted, layer)
        except ContractError:
            gains.append(math.nan)
            continue
        orig = float(row_orig[idx].mean())
        prompted = float(row_prompt[idx].mean())
        gains.append((prompted - orig) / orig if orig > 0 else math.nan)
    return GainProfile(gains=gains, loc=loc, overlaid=tokens)


def attention_gain_profile(
    encoder: VisionEncoder, image: torch.Tensor, prompt: Prompt, loc: PixelLocation
) -> GainProfile:
    """Per-layer gain for one prompt placement on one image; both forward
    passes share the exact same preprocessing path."""
    with torch.no_grad():
        _, trace_original = encoder.forward_with_attention(image)
        prompted_image = insert_patch(image, prompt.rgb, prompt.mask, loc)
        _, trace_prompted = encoder.forward_with_attention(prompted_image)
    return gain_profile_from_traces(
        trace_original, trace_prompted, loc, prompt.spec.size, encoder.config
    )


def argmax_hit_rate(
    encoder: VisionEncoder,
    prompt: Prompt,
    images: Sequence[torch.Tensor],
    trials: int,
    rng: np.random.Generator,
) -> float:
    """Fraction of random placements whose overlaid tokens contain the argmax
    of the final-layer query attention over spatial entries.

    Trials are drawn up front from ``rng``, so reusing a generator state
    reproduces the exact trial list (e.g. to measure an unprompted base rate
    with an all-zero mask prompt on the same placements).
    """
    if trials < 1:
        raise ContractError(f"trials must be >= 1, got {trials}")
    cfg = encoder.config
    n, m = cfg.image_size, prompt.spec.size
    image_idx = rng.integers(0, len(images), size=trials)
    locs = [sample_valid_location(n, m, rng) for _ in range(trials)]
    t = cfg.tokens_per_side
    offset = 1 if cfg.has_query_slot else 0
    hits = 0
    with torch.no_grad():
        for lo in range(0, trials, _EVAL_BATCH):
            chunk = range(lo, min(lo + _EVAL_BATCH, trials))
            batch = torch.stack(
                [insert_patch(images[image_idx[k]], prompt.rgb, prompt.mask, locs[k]) for k in chunk]
            )
            _, trace = encoder.forward_with_attention(batch)
            rows = query_attention_mean(trace, cfg.layers)[:, offset:]
            winners = rows.argmax(dim=-1)
            for row_in_chunk, k in enumerate(chunk):
                u, v = divmod(int(winners[row_in_chunk]), t)
                if (u, v) in overlaid_token_set(locs[k], m, cfg.tile_size, t):
                    hits += 1
    return hits / trials


def _validate_region(region: tuple[int, int, int, int], n: int) -> tuple[int, int, int, int]:
    r0, c0, r1, c1 = (int(v) for v in region)
    if not (0 <= r0 < r1 <= n and 0 <= c0 < c1 <= n):
        raise ContractError(f"region {region} invalid for a {n}x{n} image")
    return r0, c0, r1, c1


def _box_blur5(image: torch.Tensor) -> torch.Tensor:
    # 5x5 averaging kernel with replicated (edge-clamped) borders.
    x = image.permute(2, 0, 1).unsqueeze(0)
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    return F.avg_pool2d(x, kernel_size=5, stride=1).squeeze(0).permute(1, 2, 0)


def baseline_transform(
    image: torch.Tensor,
    kind: str,
    region: tuple[int, int, int, int],
    params: Optional[dict] = None,
    rng: Optional[np.random.Generator] = None,
) -> torch.Tensor:
    """Reference comparison transforms, all pure functions of their inputs.

    crop        -- keep the region, zero out everything around it.
    blur        -- replace pixels outside the region with a 5x5 box average
                   of the original image (clamped borders); region untouched.
    red_circle  -- rasterize a circle outline (default pure red, diameter =
                   region size, thickness ratio 0.75) over the image, using
                   the same rasterization as the hollow-circle shape mask.
    random_loc  -- resample the region position uniformly (size preserved),
                   then apply the sub-transform named in params["kind"].
    """
    if kind not in BASELINE_KINDS:
        raise ContractError(f"unknown baseline kind {kind!r}; expected one of {BASELINE_KINDS}")
    params = dict(params or {})
    n = image.shape[0]
    r0, c0, r1, c1 = _validate_region(region, n)
    if kind == "random_loc":
        if rng is None:
            raise ContractError("random_loc requires an rng")
        sub = params.pop("kind", "crop")
        h, w = r1 - r0, c1 - c0
        nr0 = int(rng.integers(0, n - h + 1))
        nc0 = int(rng.integers(0, n - w + 1))
        return baseline_transform(image, sub, (nr0, nc0, nr0 + h, nc0 + w), params, rng)
    if kind == "crop":
        out = torch.zeros_like(image)
        out[r0:r1, c0:c1, :] = image[r0:r1, c0:c1, :]
        return out
    if kind == "blur":
        blurred = _box_blur5(image)
        out = blurred.clone()
        out[r0:r1, c0:c1, :] = image[r0:r1, c0:c1, :]
        return out
    # red_circle
    diameter = int(params.get("diameter", min(r1 - r0, c1 - c0)))
    thickness = float(params.get("thickness_ratio", 0.75))
    color = params.get("color", (1.0, 0.0, 0.0))
    ring = make_shape_mask(PatchSpec(diameter, "hollow_circle", thickness))
    cr, cc = (r0 + r1) // 2, (c0 + c1) // 2
    w0, w1 = cr - diameter // 2, cr + diameter // 2
    v0, v1 = cc - diameter // 2, cc + diameter // 2
    if w0 < 0 or v0 < 0 or w1 > n or v1 > n:
        raise ContractError(f"circle of diameter {diameter} at ({cr}, {cc}) leaves the image")
    out = image.clone()
    ring_b = torch.from_numpy(ring.astype(bool))
    out[w0:w1, v0:v1, :][ring_b] = torch.tensor(color, dtype=image.dtype)
    return out


@dataclass(frozen=True)
class KeypointAnnotation:
    """One named keypoint on one image."""

    image_id: str
    part: str
    i: int
    j: int
    visible: bool = True


class LabelEmbeddingTable:
    """Precomputed unit-norm embedding per label name (the text-tower
    stand-in); classification is argmax of the inner product."""

    def __init__(self, names: Sequence[str], matrix: torch.Tensor):
        if len(names) != len(set(names)):
            raise ContractError("label names must be unique")
        if matrix.ndim != 2 or matrix.shape[0] != len(names):
            raise ContractError(
                f"embedding matrix shape {tuple(matrix.shape)} does not match {len(names)} names"
            )
        norms = matrix.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-4):
            worst = float((norms - 1).abs().max())
            raise ContractError(f"label embeddings must be unit norm (worst deviation {worst:.2e})")
        self.names = list(names)
        self.matrix = matrix.to(torch.float32)

    def __contains__(self, name: str) -> bool:
        return name in self.names

    def predict(self, embeddings: torch.Tensor) -> list[str]:
        """Argmax label for each row of an (N, d) embedding batch."""
        emb = F.normalize(embeddings.to(self.matrix.dtype), dim=-1)
        scores = emb @ self.matrix.T
        return [self.names[int(k)] for k in scores.argmax(dim=-1)]

    def save(self, path) -> None:
        save_file({name: self.matrix[k].contiguous() for k, name in enumerate(self.names)}, str(path))

    @classmethod
    def from_file(cls, path) -> "LabelEmbeddingTable":
        names, rows = [], []
        with safe_open(str(path), framework="pt") as f:
            for name in sorted(f.keys()):
                names.append(name)
                rows.append(f.get_tensor(name))
        if not names:
            raise DatasetError(f"label embedding file {path} is empty")
        return cls(names, torch.stack(rows))


def make_stub_label_table(names: Sequence[str], dim: int, seed: int = 0) -> LabelEmbeddingTable:
    """Random orthonormal label embeddings for desk-scale runs and tests."""
    if len(names) > dim:
        raise ContractError(f"cannot fit {len(names)} orthonormal labels in {dim} dimensions")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, len(names))))
    return LabelEmbeddingTable(names, torch.from_numpy(q.T[: len(names)].copy()).to(torch.float32))


@dataclass
class KeypointAccuracy:
    accuracy: float
    evaluated: int
    skipped: int


def keypoint_naming_accuracy(
    encoder,
    prompt: Prompt,
    samples: Iterable[tuple[torch.Tensor, KeypointAnnotation]],
    labels: LabelEmbeddingTable,
) -> KeypointAccuracy:
    """Insert the prompt at each keypoint, embed, and name it by nearest
    label embedding; returns top-1 accuracy over the evaluable annotations.

    Invisible keypoints and keypoints without a valid interior placement are
    skipped (counted and logged), never scored.
    """
    cfg = encoder.config
    n, m = cfg.image_size, prompt.spec.size
    pending: list[tuple[torch.Tensor, str]] = []
    skipped = 0
    correct = 0
    evaluated = 0

    def flush():
        nonlocal correct, evaluated
        if not pending:
            return
        batch = torch.stack([img for img, _ in pending])
        with torch.no_grad():
            embeddings, _ = encoder.forward_with_attention(batch)
        for pred, (_, part) in zip(labels.predict(embeddings), pending):
            evaluated += 1
            correct += int(pred == part)
        pending.clear()

    for image, ann in samples:
        if ann.part not in labels:
            raise ContractError(f"annotation part {ann.part!r} has no label embedding")
        loc = PixelLocation(ann.i, ann.j)
        if not ann.visible or not is_valid_location(loc, n, m):
            skipped += 1
            continue
        pending.append((insert_patch(image, prompt.rgb, prompt.mask, loc), ann.part))
        if len(pending) >= _EVAL_BATCH:
            flush()
    flush()
    if evaluated == 0:
        raise DatasetError("no evaluable keypoint annotations (all skipped or none given)")
    if skipped:
        logger.info("keypoint naming: skipped %d of %d annotations", skipped, skipped + evaluated)
    return KeypointAccuracy(accuracy=correct / evaluated, evaluated=evaluated, skipped=skipped)
