"""Loading pretrained encoder weights from safetensors containers.

Each adapter declares a tensor-name layout (role -> name template) plus the
architectural flags needed to rebuild the encoder around those tensors. The
file's metadata must carry the head count (``heads``); everything else is
inferred from tensor shapes. Weights themselves are never shipped here: the
package consumes whatever file the descriptor points at.

Declared adapters:

* ``toy``    - this package's own state-dict names (round-trips build_toy_vit).
* ``clip``   - an exported CLIP visual tower (``conv1.weight``,
  ``transformer.resblocks.{i}...``, fused ``attn.in_proj_weight``, QuickGELU,
  pre-norm, output projection).
* ``dinov2`` - DINOv2-style (``blocks.{i}.attn.qkv...``, layer-scale gains,
  GELU).
* ``siglip`` - SigLIP-style pooling-head tower (``vision_model...``, separate
  q/k/v projections, tanh-approximated GELU, no class token; the probe-head
  attention becomes the query row).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from ..errors import CheckpointLoadError
from .config import EncoderConfig
from .vit import VisionEncoder

_CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
_CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class EncoderLayout:
    """Tensor-name table and architecture flags for one encoder family."""

    name: str
    activation: str
    pre_norm: bool
    layerscale: bool
    has_query_slot: bool
    fused_qkv: bool
    output_proj: bool
    pooling_head: bool
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    tensors: dict[str, str] = field(default_factory=dict)


LAYOUTS: dict[str, EncoderLayout] = {
    "toy": EncoderLayout(
        name="toy",
        activation="gelu",
        pre_norm=False,
        layerscale=False,
        has_query_slot=True,
        fused_qkv=True,
        output_proj=False,
        pooling_head=False,
        mean=(0.5, 0.5, 0.5),
        std=(0.5, 0.5, 0.5),
        tensors={
            "patch_weight": "patch_embed.weight",
            "patch_bias": "patch_embed.bias",
            "cls_token": "cls_token",
            "pos_embed": "pos_embed",
            "ln1_weight": "blocks.{i}.norm1.weight",
            "ln1_bias": "blocks.{i}.norm1.bias",
            "qkv_weight": "blocks.{i}.attn.qkv.weight",
            "qkv_bias": "blocks.{i}.attn.qkv.bias",
            "attn_out_weight": "blocks.{i}.attn.proj.weight",
            "attn_out_bias": "blocks.{i}.attn.proj.bias",
            "ln2_weight": "blocks.{i}.norm2.weight",
            "ln2_bias": "blocks.{i}.norm2.bias",
            "mlp1_weight": "blocks.{i}.mlp.fc1.weight",
            "mlp1_bias": "blocks.{i}.mlp.fc1.bias",
            "mlp2_weight": "blocks.{i}.mlp.fc2.weight",
            "mlp2_bias": "blocks.{i}.mlp.fc2.bias",
            "norm_weight": "norm.weight",
            "norm_bias": "norm.bias",
        },
    ),
    "clip": EncoderLayout(
        name="clip",
        activation="quickgelu",
        pre_norm=True,
        layerscale=False,
        has_query_slot=True,
        fused_qkv=True,
        output_proj=True,
        pooling_head=False,
        mean=_CLIP_MEAN,
        std=_CLIP_STD,
        tensors={
            "patch_weight": "conv1.weight",
            "cls_token": "class_embedding",
            "pos_embed": "positional_embedding",
            "pre_norm_weight": "ln_pre.weight",
            "pre_norm_bias": "ln_pre.bias",
            "ln1_weight": "transformer.resblocks.{i}.ln_1.weight",
            "ln1_bias": "transformer.resblocks.{i}.ln_1.bias",
            "qkv_weight": "transformer.resblocks.{i}.attn.in_proj_weight",
            "qkv_bias": "transformer.resblocks.{i}.attn.in_proj_bias",
            "attn_out_weight": "transformer.resblocks.{i}.attn.out_proj.weight",
            "attn_out_bias": "transformer.resblocks.{i}.attn.out_proj.bias",
            "ln2_weight": "transformer.resblocks.{i}.ln_2.weight",
            "ln2_bias": "transformer.resblocks.{i}.ln_2.bias",
            "mlp1_weight": "transformer.resblocks.{i}.mlp.c_fc.weight",
            "mlp1_bias": "transformer.resblocks.{i}.mlp.c_fc.bias",
            "mlp2_weight": "transformer.resblocks.{i}.mlp.c_proj.weight",
            "mlp2_bias": "transformer.resblocks.{i}.mlp.c_proj.bias",
            "norm_weight": "ln_post.weight",
            "norm_bias": "ln_post.bias",
            "proj": "proj",
        },
    ),
    "dinov2": EncoderLayout(
        name="dinov2",
        activation="gelu",
        pre_norm=False,
        layerscale=True,
        has_query_slot=True,
        fused_qkv=True,
        output_proj=False,
        pooling_head=False,
        mean=_IMAGENET_MEAN,
        std=_IMAGENET_STD,
        tensors={
            "patch_weight": "patch_embed.proj.weight",
            "patch_bias": "patch_embed.proj.bias",
            "cls_token": "cls_token",
            "pos_embed": "pos_embed",
            "ln1_weight": "blocks.{i}.norm1.weight",
            "ln1_bias": "blocks.{i}.norm1.bias",
            "qkv_weight": "blocks.{i}.attn.qkv.weight",
            "qkv_bias": "blocks.{i}.attn.qkv.bias",
            "attn_out_weight": "blocks.{i}.attn.proj.weight",
            "attn_out_bias": "blocks.{i}.attn.proj.bias",
            "ls1": "blocks.{i}.ls1.gamma",
            "ls2": "blocks.{i}.ls2.gamma",
            "ln2_weight": "blocks.{i}.norm2.weight",
            "ln2_bias": "blocks.{i}.norm2.bias",
            "mlp1_weight": "blocks.{i}.mlp.fc1.weight",
            "mlp1_bias": "blocks.{i}.mlp.fc1.bias",
            "mlp2_weight": "blocks.{i}.mlp.fc2.weight",
            "mlp2_bias": "blocks.{i}.mlp.fc2.bias",
            "norm_weight": "norm.weight",
            "norm_bias": "norm.bias",
        },
    ),
    "siglip": EncoderLayout(
        name="siglip",
        activation="gelu_tanh",
        pre_norm=False,
        layerscale=False,
        has_query_slot=False,
        fused_qkv=False,
        output_proj=False,
        pooling_head=True,
        mean=(0.5, 0.5, 0.5),
        std=(0.5, 0.5, 0.5),
        tensors={
            "patch_weight": "vision_model.embeddings.patch_embedding.weight",
            "patch_bias": "vision_model.embeddings.patch_embedding.bias",
            "pos_embed": "vision_model.embeddings.position_embedding.weight",
            "ln1_weight": "vision_model.encoder.layers.{i}.layer_norm1.weight",
            "ln1_bias": "vision_model.encoder.layers.{i}.layer_norm1.bias",
            "q_weight": "vision_model.encoder.layers.{i}.self_attn.q_proj.weight",
            "q_bias": "vision_model.encoder.layers.{i}.self_attn.q_proj.bias",
            "k_weight": "vision_model.encoder.layers.{i}.self_attn.k_proj.weight",
            "k_bias": "vision_model.encoder.layers.{i}.self_attn.k_proj.bias",
            "v_weight": "vision_model.encoder.layers.{i}.self_attn.v_proj.weight",
            "v_bias": "vision_model.encoder.layers.{i}.self_attn.v_proj.bias",
            "attn_out_weight": "vision_model.encoder.layers.{i}.self_attn.out_proj.weight",
            "attn_out_bias": "vision_model.encoder.layers.{i}.self_attn.out_proj.bias",
            "ln2_weight": "vision_model.encoder.layers.{i}.layer_norm2.weight",
            "ln2_bias": "vision_model.encoder.layers.{i}.layer_norm2.bias",
            "mlp1_weight": "vision_model.encoder.layers.{i}.mlp.fc1.weight",
            "mlp1_bias": "vision_model.encoder.layers.{i}.mlp.fc1.bias",
            "mlp2_weight": "vision_model.encoder.layers.{i}.mlp.fc2.weight",
            "mlp2_bias": "vision_model.encoder.layers.{i}.mlp.fc2.bias",
            "norm_weight": "vision_model.post_layernorm.weight",
            "norm_bias": "vision_model.post_layernorm.bias",
            "pool_probe": "vision_model.head.probe",
            "pool_in_proj_weight": "vision_model.head.attention.in_proj_weight",
            "pool_in_proj_bias": "vision_model.head.attention.in_proj_bias",
            "pool_out_weight": "vision_model.head.attention.out_proj.weight",
            "pool_out_bias": "vision_model.head.attention.out_proj.bias",
            "pool_norm_weight": "vision_model.head.layernorm.weight",
            "pool_norm_bias": "vision_model.head.layernorm.bias",
            "pool_mlp1_weight": "vision_model.head.mlp.fc1.weight",
            "pool_mlp1_bias": "vision_model.head.mlp.fc1.bias",
            "pool_mlp2_weight": "vision_model.head.mlp.fc2.weight",
            "pool_mlp2_bias": "vision_model.head.mlp.fc2.bias",
        },
    ),
}

_PER_BLOCK_ROLES = (
    "ln1_weight", "ln1_bias",
    "qkv_weight", "qkv_bias",
    "q_weight", "q_bias", "k_weight", "k_bias", "v_weight", "v_bias",
    "attn_out_weight", "attn_out_bias",
    "ls1", "ls2",
    "ln2_weight", "ln2_bias",
    "mlp1_weight", "mlp1_bias", "mlp2_weight", "mlp2_bias",
)


def _count_blocks(layout: EncoderLayout, names: set[str]) -> int:
    probe = layout.tensors["ln1_weight"]
    i = 0
    while probe.format(i=i) in names:
        i += 1
    return i


def _required_names(layout: EncoderLayout, layers: int) -> dict[str, str]:
    wanted = {}
    for role, template in layout.tensors.items():
        if role in _PER_BLOCK_ROLES:
            for i in range(layers):
                wanted[f"{role}@{i}"] = template.format(i=i)
        else:
            wanted[role] = template
    return wanted


def load_external_encoder(path, adapter: str) -> VisionEncoder:
    """Build a frozen encoder from a safetensors file and an adapter name.

    The file metadata must provide ``heads``; ``mean``/``std`` entries (JSON
    lists) override the adapter defaults. Every tensor the layout declares
    must be present, otherwise the error lists the missing names.
    """
    if adapter not in LAYOUTS:
        raise CheckpointLoadError(f"unknown adapter {adapter!r}; declared: {sorted(LAYOUTS)}")
    layout = LAYOUTS[adapter]
    tensors: dict[str, torch.Tensor] = {}
    with safe_open(str(path), framework="pt") as f:
        names = set(f.keys())
        metadata = f.metadata() or {}
        layers = _count_blocks(layout, names)
        if layers == 0:
            raise CheckpointLoadError(
                f"no transformer blocks found in {path} with adapter {adapter!r} "
                f"(expected tensors like {layout.tensors['ln1_weight'].format(i=0)!r})"
            )
        wanted = _required_names(layout, layers)
        missing = sorted(name for name in wanted.values() if name not in names)
        if missing:
            raise CheckpointLoadError(
                f"{path} is missing {len(missing)} tensor(s) required by adapter "
                f"{adapter!r}: {', '.join(missing)}"
            )
        for key, name in wanted.items():
            tensors[key] = f.get_tensor(name)

    if "heads" not in metadata:
        raise CheckpointLoadError(
            f"{path} metadata must declare 'heads' (attention head count)"
        )
    heads = int(metadata["heads"])
    dim, _, tile, _ = tensors["patch_weight"].shape
    pos = tensors["pos_embed"]
    seq_len = pos.shape[-2]
    spatial = seq_len - (1 if layout.has_query_slot else 0)
    tokens_per_side = int(round(spatial ** 0.5))
    if tokens_per_side ** 2 != spatial:
        raise CheckpointLoadError(
            f"positional embedding length {seq_len} does not describe a square token grid"
        )
    mean = tuple(json.loads(metadata["mean"])) if "mean" in metadata else layout.mean
    std = tuple(json.loads(metadata["std"])) if "std" in metadata else layout.std
    config = EncoderConfig(
        image_size=tokens_per_side * tile,
        tile_size=tile,
        layers=layers,
        heads=heads,
        dim=dim,
        has_query_slot=layout.has_query_slot,
        mean=mean,
        std=std,
    )
    hidden = tensors["mlp1_weight@0"].shape[0]
    encoder = VisionEncoder(
        config,
        mlp_ratio=hidden / dim,
        activation=layout.activation,
        pre_norm=layout.pre_norm,
        layerscale=layout.layerscale,
        output_proj_dim=tensors["proj"].shape[1] if layout.output_proj else None,
    )
    _fill_parameters(encoder, layout, tensors, layers)
    return encoder.freeze()


def _fill_parameters(
    encoder: VisionEncoder,
    layout: EncoderLayout,
    tensors: dict[str, torch.Tensor],
    layers: int,
) -> None:
    params = dict(encoder.named_parameters())

    def put(our_name: str, value: torch.Tensor):
        target = params[our_name]
        if value.shape != target.shape:
            value = value.reshape(target.shape)
        target.data.copy_(value)

    put("patch_embed.weight", tensors["patch_weight"])
    if "patch_bias" in tensors:
        put("patch_embed.bias", tensors["patch_bias"])
    put("pos_embed", tensors["pos_embed"])
    if layout.has_query_slot:
        put("cls_token", tensors["cls_token"])
    if layout.pre_norm:
        put("pre_ln.weight", tensors["pre_norm_weight"])
        put("pre_ln.bias", tensors["pre_norm_bias"])
    for i in range(layers):
        pre = f"blocks.{i}"
        put(f"{pre}.norm1.weight", tensors[f"ln1_weight@{i}"])
        put(f"{pre}.norm1.bias", tensors[f"ln1_bias@{i}"])
        if layout.fused_qkv:
            put(f"{pre}.attn.qkv.weight", tensors[f"qkv_weight@{i}"])
            put(f"{pre}.attn.qkv.bias", tensors[f"qkv_bias@{i}"])
        else:
            put(
                f"{pre}.attn.qkv.weight",
                torch.cat([tensors[f"{r}@{i}"] for r in ("q_weight", "k_weight", "v_weight")]),
            )
            put(
                f"{pre}.attn.qkv.bias",
                torch.cat([tensors[f"{r}@{i}"] for r in ("q_bias", "k_bias", "v_bias")]),
            )
        put(f"{pre}.attn.proj.weight", tensors[f"attn_out_weight@{i}"])
        put(f"{pre}.attn.proj.bias", tensors[f"attn_out_bias@{i}"])
        if layout.layerscale:
            put(f"{pre}.ls1", tensors[f"ls1@{i}"])
            put(f"{pre}.ls2", tensors[f"ls2@{i}"])
        put(f"{pre}.norm2.weight", tensors[f"ln2_weight@{i}"])
        put(f"{pre}.norm2.bias", tensors[f"ln2_bias@{i}"])
        put(f"{pre}.mlp.fc1.weight", tensors[f"mlp1_weight@{i}"])
        put(f"{pre}.mlp.fc1.bias", tensors[f"mlp1_bias@{i}"])
        put(f"{pre}.mlp.fc2.weight", tensors[f"mlp2_weight@{i}"])
        put(f"{pre}.mlp.fc2.bias", tensors[f"mlp2_bias@{i}"])
    put("norm.weight", tensors["norm_weight"])
    put("norm.bias", tensors["norm_bias"])
    if layout.output_proj:
        put("proj", tensors["proj"])
    if layout.pooling_head:
        put("pool.probe", tensors["pool_probe"])
        put("pool.in_proj_weight", tensors["pool_in_proj_weight"])
        put("pool.in_proj_bias", tensors["pool_in_proj_bias"])
        put("pool.out_proj.weight", tensors["pool_out_weight"])
        put("pool.out_proj.bias", tensors["pool_out_bias"])
        put("pool.norm.weight", tensors["pool_norm_weight"])
        put("pool.norm.bias", tensors["pool_norm_bias"])
        put("pool.mlp.fc1.weight", tensors["pool_mlp1_weight"])
        put("pool.mlp.fc1.bias", tensors["pool_mlp1_bias"])
        put("pool.mlp.fc2.weight", tensors["pool_mlp2_weight"])
        put("pool.mlp.fc2.bias", tensors["pool_mlp2_bias"])


def save_encoder_weights(encoder: VisionEncoder, path) -> None:
    """Write an encoder in the ``toy`` layout (plus the metadata the loader
    needs), so encoders round-trip through the container format."""
    cfg = encoder.config
    state = {k: v.detach().cpu().contiguous() for k, v in encoder.state_dict().items()}
    state.pop("pix_mean", None)
    state.pop("pix_std", None)
    metadata = {
        "heads": str(cfg.heads),
        "mean": json.dumps(list(cfg.mean)),
        "std": json.dumps(list(cfg.std)),
    }
    save_file(state, str(path), metadata=metadata)
