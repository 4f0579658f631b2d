"""Vision transformer with full attention traces.

One implementation serves two purposes: a self-contained toy encoder for
desk-scale verification, and the execution backbone that external pretrained
weights are loaded into via the adapter layouts. Attention is computed
explicitly (post-softmax, no dropout) so every row stays in the autograd
graph and gradients can flow from any scalar on the trace back to the input
pixels, while the encoder's own parameters stay frozen.
"""

from __future__ import annotations

import hashlib
import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ContractError
from .config import AttentionTrace, EncoderConfig, query_attention_mean

_ACTIVATIONS = {
    "gelu": lambda: nn.GELU(),
    "gelu_tanh": lambda: nn.GELU(approximate="tanh"),
    "quickgelu": lambda: _QuickGELU(),
}


class _QuickGELU(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(1.702 * x)


class SelfAttention(nn.Module):
    """Fused-QKV multi-head self-attention that returns its softmax map."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, activation: str):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = _ACTIVATIONS[activation]()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block, optionally with layer-scale gains."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, activation: str, layerscale: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), activation)
        if layerscale:
            self.ls1 = nn.Parameter(torch.ones(dim))
            self.ls2 = nn.Parameter(torch.ones(dim))
        else:
            self.ls1 = None
            self.ls2 = None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        a, attn = self.attn(self.norm1(x))
        x = x + (a * self.ls1 if self.ls1 is not None else a)
        m = self.mlp(self.norm2(x))
        x = x + (m * self.ls2 if self.ls2 is not None else m)
        return x, attn


class AttentionPoolingHead(nn.Module):
    """Probe-token attention pooling (for encoders without a class token).

    A learned probe queries all spatial tokens once; the resulting softmax
    row is exposed as the encoder's query attention.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float, activation: str):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.probe = nn.Parameter(torch.zeros(1, 1, dim))
        self.in_proj_weight = nn.Parameter(torch.zeros(3 * dim, dim))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * dim))
        self.out_proj = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), activation)

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, t, d = tokens.shape
        wq, wk, wv = self.in_proj_weight.chunk(3, dim=0)
        bq, bk, bv = self.in_proj_bias.chunk(3, dim=0)
        q = F.linear(self.probe.expand(b, -1, -1), wq, bq)
        k = F.linear(tokens, wk, bk)
        v = F.linear(tokens, wv, bv)
        q = q.reshape(b, 1, self.heads, self.head_dim).transpose(1, 2)
        k = k.reshape(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.reshape(b, t, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        pooled = (attn @ v).transpose(1, 2).reshape(b, 1, d)
        pooled = self.out_proj(pooled)
        pooled = pooled + self.mlp(self.norm(pooled))
        return pooled[:, 0], attn[:, :, 0, :]


class VisionEncoder(nn.Module):
    """ViT exposing embeddings plus the full per-layer, per-head attention.

    Inputs are (n, n, 3) images in [0, 1] (or a (B, n, n, 3) batch); the
    encoder applies its own channel normalization internally, so prompts
    operate in display pixel space.
    """

    def __init__(
        self,
        config: EncoderConfig,
        mlp_ratio: float = 4.0,
        activation: str = "gelu",
        pre_norm: bool = False,
        layerscale: bool = False,
        output_proj_dim: Optional[int] = None,
    ):
        super().__init__()
        self.config = config
        d = config.dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.tile_size, stride=config.tile_size)
        if config.has_query_slot:
            self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
            self.pool = None
        else:
            self.cls_token = None
            self.pool = AttentionPoolingHead(d, config.heads, mlp_ratio, activation)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.seq_len, d))
        self.pre_ln = nn.LayerNorm(d) if pre_norm else None
        self.blocks = nn.ModuleList(
            Block(d, config.heads, mlp_ratio, activation, layerscale) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(d)
        self.proj = (
            nn.Parameter(torch.zeros(d, output_proj_dim)) if output_proj_dim is not None else None
        )
        mean = torch.tensor(config.mean, dtype=torch.get_default_dtype())
        std = torch.tensor(config.std, dtype=torch.get_default_dtype())
        self.register_buffer("pix_mean", mean)
        self.register_buffer("pix_std", std)

    @property
    def embed_dim(self) -> int:
        return self.config.dim if self.proj is None else self.proj.shape[1]

    def forward_with_attention(self, image: torch.Tensor) -> tuple[torch.Tensor, AttentionTrace]:
        cfg = self.config
        single = image.ndim == 3
        imgs = image.unsqueeze(0) if single else image
        n = cfg.image_size
        if imgs.ndim != 4 or imgs.shape[1:] != (n, n, 3):
            raise ContractError(
                f"expected image shape ({n}, {n}, 3) (optionally batched), got {tuple(image.shape)}"
            )
        x = (imgs - self.pix_mean) / self.pix_std
        x = self.patch_embed(x.permute(0, 3, 1, 2))
        x = x.flatten(2).transpose(1, 2)
        if self.cls_token is not None:
            x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.pos_embed
        if self.pre_ln is not None:
            x = self.pre_ln(x)
        maps = []
        for block in self.blocks:
            x, attn = block(x)
            maps.append(attn)
        x = self.norm(x)
        pooling = None
        if self.cls_token is not None:
            emb = x[:, 0]
        else:
            emb, pooling = self.pool(x)
        if self.proj is not None:
            emb = emb @ self.proj
        trace = torch.stack(maps, dim=1)
        if single:
            emb = emb[0]
            trace = trace[0]
            pooling = pooling[0] if pooling is not None else None
        return emb, AttentionTrace(attn=trace, has_query_slot=cfg.has_query_slot, pooling=pooling)

    def freeze(self) -> "VisionEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()


TOY_CONFIG = EncoderConfig(image_size=64, tile_size=8, layers=4, heads=4, dim=64)


def _deterministic_init(encoder: VisionEncoder, generator: torch.Generator) -> None:
    # Fan-in scaled normals keep attention logits O(1), so the toy encoder's
    # attention responds to image content straight from random init.
    for module in encoder.modules():
        if isinstance(module, (nn.Linear, nn.Conv2d)):
            fan_in = module.weight.shape[1:].numel()
            module.weight.data.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=generator)
            if module.bias is not None:
                module.bias.data.zero_()
        elif isinstance(module, nn.LayerNorm):
            module.weight.data.fill_(1.0)
            module.bias.data.zero_()
        elif isinstance(module, AttentionPoolingHead):
            d = module.out_proj.in_features
            module.probe.data.normal_(0.0, 0.5, generator=generator)
            module.in_proj_weight.data.normal_(0.0, 1.0 / math.sqrt(d), generator=generator)
            module.in_proj_bias.data.zero_()
    if encoder.cls_token is not None:
        encoder.cls_token.data.normal_(0.0, 0.5, generator=generator)
    encoder.pos_embed.data.normal_(0.0, 0.02, generator=generator)
    if encoder.proj is not None:
        encoder.proj.data.normal_(0.0, 1.0 / math.sqrt(encoder.proj.shape[0]), generator=generator)


def build_toy_vit(config: EncoderConfig = TOY_CONFIG, seed: int = 0) -> VisionEncoder:
    """Deterministically initialized, frozen desk-scale encoder."""
    encoder = VisionEncoder(config)
    generator = torch.Generator().manual_seed(int(seed))
    _deterministic_init(encoder, generator)
    return encoder.freeze()


def parameter_checksum(encoder: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in encoder.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def warmup_toy_vit(
    encoder: VisionEncoder,
    steps: int = 200,
    batch_size: int = 16,
    lr: float = 1e-3,
    seed: int = 0,
) -> VisionEncoder:
    """Brief synthetic pretraining: teach the toy encoder to look at a bright
    square, as a stand-in for pretrained localization behavior.

    Each step draws noisy dark backgrounds with one tile-aligned bright
    square and maximizes the CLS attention mass on that tile. The encoder is
    re-frozen afterwards.
    """
    cfg = encoder.config
    if not cfg.has_query_slot:
        raise ContractError("warm-up requires a class-token encoder")
    rng = np.random.default_rng(seed)
    for p in encoder.parameters():
        p.requires_grad_(True)
    encoder.train()
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    t, n_t = cfg.tokens_per_side, cfg.tile_size
    dtype = encoder.pos_embed.dtype
    for _ in range(steps):
        batch = rng.uniform(0.0, 0.35, size=(batch_size, cfg.image_size, cfg.image_size, 3))
        tiles = rng.integers(0, t, size=(batch_size, 2))
        for b, (u, v) in enumerate(tiles):
            batch[b, u * n_t : (u + 1) * n_t, v * n_t : (v + 1) * n_t, :] = rng.uniform(0.85, 1.0)
        images = torch.from_numpy(batch).to(dtype)
        _, trace = encoder.forward_with_attention(images)
        rows = query_attention_mean(trace, cfg.layers)
        idx = torch.from_numpy(1 + tiles[:, 0] * t + tiles[:, 1])
        hit = rows[torch.arange(batch_size), idx]
        loss = -(hit.clamp_min(1e-12).log()).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return encoder.freeze()
