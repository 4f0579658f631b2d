"""Prompt checkpoints in the safetensors container format.

A checkpoint is self-contained: the composed prompt (pixels + mask), the
generator weights and the frozen noise that produced it, plus a metadata
record (encoder id, patch geometry, seed, config digest). File bytes are a
pure function of that content, so equal runs yield equal digests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import CheckpointLoadError
from .geometry import PatchSpec
from .prior import PriorNetwork, PriorNoise, Prompt

_PRIOR_PREFIX = "prior."


@dataclass
class PromptCheckpoint:
    prompt: Prompt
    prior_state: dict[str, torch.Tensor]
    noise: PriorNoise
    meta: dict


def save_prompt_checkpoint(path, prompt: Prompt, net: PriorNetwork, noise: PriorNoise) -> str:
    """Write a checkpoint and return the file's SHA-256 digest."""
    tensors = {
        "prompt_rgb": prompt.rgb.detach().cpu().to(torch.float32).contiguous(),
        "mask": torch.from_numpy(np.ascontiguousarray(prompt.mask.astype(np.uint8))),
        "prior_noise": noise.tensor.detach().cpu().to(torch.float32).contiguous(),
    }
    for name, param in net.state_dict().items():
        tensors[_PRIOR_PREFIX + name] = param.detach().cpu().to(torch.float32).contiguous()
    meta = {
        "patch_size": str(prompt.spec.size),
        "patch_shape": prompt.spec.shape,
        "thickness_ratio": repr(prompt.spec.thickness_ratio),
        "noise_seed": str(noise.seed),
    }
    for key, value in prompt.meta.items():
        meta[key] = value if isinstance(value, str) else json.dumps(value)
    save_file(tensors, str(path), metadata=meta)
    return file_digest(path)


def load_prompt_checkpoint(path) -> PromptCheckpoint:
    tensors: dict[str, torch.Tensor] = {}
    with safe_open(str(path), framework="pt") as f:
        meta = dict(f.metadata() or {})
        for name in f.keys():
            tensors[name] = f.get_tensor(name)
    for required in ("prompt_rgb", "mask", "prior_noise"):
        if required not in tensors:
            raise CheckpointLoadError(f"{path} is missing the {required!r} tensor")
    try:
        spec = PatchSpec(
            size=int(meta["patch_size"]),
            shape=meta["patch_shape"],
            thickness_ratio=float(meta["thickness_ratio"]),
        )
    except KeyError as exc:
        raise CheckpointLoadError(f"{path} metadata is missing {exc}") from exc
    prompt = Prompt(
        rgb=tensors["prompt_rgb"],
        mask=tensors["mask"].numpy().astype(np.uint8),
        spec=spec,
        meta={k: v for k, v in meta.items()
              if k not in ("patch_size", "patch_shape", "thickness_ratio", "noise_seed")},
    )
    prior_state = {
        name[len(_PRIOR_PREFIX):]: tensor
        for name, tensor in tensors.items()
        if name.startswith(_PRIOR_PREFIX)
    }
    noise = PriorNoise(tensor=tensors["prior_noise"], seed=int(meta.get("noise_seed", "0")))
    return PromptCheckpoint(prompt=prompt, prior_state=prior_state, noise=noise, meta=meta)


def restore_prior(checkpoint: PromptCheckpoint) -> PriorNetwork:
    """Rebuild the generator carried by a checkpoint."""
    net = PriorNetwork(checkpoint.prompt.spec.size)
    net.load_state_dict(checkpoint.prior_state)
    return net


def file_digest(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
