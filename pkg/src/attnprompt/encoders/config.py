"""Encoder contract: configuration and attention-trace containers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from ..errors import ContractError, InvalidSpecError


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and preprocessing contract of a vision encoder.

    ``has_query_slot`` is True for encoders with a class token whose attention
    row is the steering target; pooling-head encoders set it False and expose
    their attention-pooling weights instead.
    """

    image_size: int
    tile_size: int
    layers: int
    heads: int
    dim: int
    has_query_slot: bool = True
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if self.image_size % self.tile_size != 0:
            raise InvalidSpecError(
                f"image size {self.image_size} is not divisible by tile size {self.tile_size}"
            )
        if min(self.layers, self.heads, self.dim) < 1:
            raise InvalidSpecError("layers, heads and dim must all be >= 1")
        if self.dim % self.heads != 0:
            raise InvalidSpecError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def tokens_per_side(self) -> int:
        return self.image_size // self.tile_size

    @property
    def spatial_tokens(self) -> int:
        return self.tokens_per_side ** 2

    @property
    def seq_len(self) -> int:
        return self.spatial_tokens + (1 if self.has_query_slot else 0)


@dataclass
class AttentionTrace:
    """Post-softmax attention from one forward pass.

    ``attn`` has shape (L, H, T, T), or (B, L, H, T, T) for batched input,
    where T = seq_len. Pooling-head encoders additionally carry the pooling
    attention row(s) with shape (H, t^2) (or batched).
    """

    attn: torch.Tensor
    has_query_slot: bool
    pooling: Optional[torch.Tensor] = None

    @property
    def layers(self) -> int:
        return self.attn.shape[-4]


def query_attention_mean(trace: AttentionTrace, layer: int) -> torch.Tensor:
    """Head-averaged attention row of the query token at ``layer`` (1-based).

    For class-token encoders this is the CLS row; averaging distributions
    keeps the result a distribution. Pooling-head encoders expose their
    pooling attention as the query row of the final layer only.
    """
    n_layers = trace.layers
    if not 1 <= layer <= n_layers:
        raise ContractError(f"layer {layer} outside 1..{n_layers}")
    if trace.has_query_slot:
        rows = trace.attn.select(-4, layer - 1)[..., 0, :]
        return rows.mean(dim=-2)
    if trace.pooling is None:
        raise ContractError("encoder without a query slot carries no pooling attention")
    if layer != n_layers:
        raise ContractError(
            "pooling-head encoders expose a query row only at the final layer; "
            f"layer {layer} has no designated query"
        )
    return trace.pooling.mean(dim=-2)
