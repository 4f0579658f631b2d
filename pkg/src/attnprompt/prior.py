"""The trainable patch generator.

A small convolutional encoder-decoder reparametrizes the prompt's RGB values:
it maps a fixed noise tensor (drawn once per run) through three downsampling
and three upsampling stages with skip connections and a final sigmoid, so the
output always stays inside (0, 1). Its weights are the only parameters the
training loop ever updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .errors import ContractError, InvalidSpecError
from .geometry import PatchSpec


@dataclass(frozen=True)
class PriorNoise:
    """Fixed generator input: an (s, s, 3) tensor of uniforms in [0, 1).

    Sampled once at initialization and frozen for the entire run; ``s`` is the
    network's internal grid (equal to the patch size when that is a multiple
    of 8, otherwise the next multiple of 8).
    """

    tensor: torch.Tensor
    seed: int


@dataclass
class Prompt:
    """The learned artifact: patch pixels plus the shape mask that gates them.

    Pixels where the mask is 0 never replace image content; they are kept
    only so the patch can be re-rendered and retrained.
    """

    rgb: torch.Tensor
    mask: np.ndarray
    spec: PatchSpec
    meta: dict = field(default_factory=dict)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)


class PriorNetwork(nn.Module):
    """Encoder-decoder with three 2x downsamplings, three nearest-neighbor
    upsamplings, skip connections at matching resolutions and a sigmoid head.

    ``out_size`` may be any even size >= 8; when it is not a multiple of 8 the
    network runs on the next multiple of 8 and center-crops its output.
    """

    def __init__(self, out_size: int, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        if out_size < 8 or out_size % 2 != 0:
            raise InvalidSpecError(f"patch size must be an even integer >= 8, got {out_size}")
        self.out_size = out_size
        self.in_size = 8 * math.ceil(out_size / 8)
        w1, w2, w3 = widths

        def act():
            return nn.LeakyReLU(0.1)

        self.stem = nn.Sequential(_conv(3, w1), act())
        self.down1 = nn.Sequential(_conv(w1, w1, stride=2), act(), _conv(w1, w1), act())
        self.down2 = nn.Sequential(_conv(w1, w2, stride=2), act(), _conv(w2, w2), act())
        self.down3 = nn.Sequential(_conv(w2, w3, stride=2), act(), _conv(w3, w3), act())
        self.up3 = nn.Sequential(_conv(w3 + w2, w2), act(), _conv(w2, w2), act())
        self.up2 = nn.Sequential(_conv(w2 + w1, w1), act(), _conv(w1, w1), act())
        self.up1 = nn.Sequential(_conv(w1 + w1, w1), act(), _conv(w1, w1), act())
        self.head = nn.Conv2d(w1, 3, kernel_size=1)
        self.grow = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        if noise.shape != (self.in_size, self.in_size, 3):
            raise ContractError(
                f"noise shape {tuple(noise.shape)} does not match network input "
                f"({self.in_size}, {self.in_size}, 3)"
            )
        x = noise.permute(2, 0, 1).unsqueeze(0)
        x0 = self.stem(x)
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        x3 = self.down3(x2)
        y2 = self.up3(torch.cat([self.grow(x3), x2], dim=1))
        y1 = self.up2(torch.cat([self.grow(y2), x1], dim=1))
        y0 = self.up1(torch.cat([self.grow(y1), x0], dim=1))
        out = torch.sigmoid(self.head(y0)).squeeze(0).permute(1, 2, 0)
        if self.out_size != self.in_size:
            lo = (self.in_size - self.out_size) // 2
            out = out[lo : lo + self.out_size, lo : lo + self.out_size, :]
        return out


def _init_parameters(net: nn.Module, generator: torch.Generator) -> None:
    # He-style fan-in scaling, drawn in a fixed module order so a seed pins
    # every weight.
    for module in net.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            module.weight.data.normal_(0.0, std, generator=generator)
            if module.bias is not None:
                module.bias.data.zero_()


def init_prior(
    seed: int,
    m: int,
    dtype: torch.dtype = torch.float32,
    allow_padding: bool = False,
) -> tuple[PriorNetwork, PriorNoise]:
    """Build a freshly initialized generator and its frozen noise input.

    The strict contract requires m to be a multiple of 8 (three exact
    halvings). ``allow_padding=True`` lifts that restriction for even sizes
    such as 14 or 42: the network then pads to the next multiple of 8
    internally and center-crops its output.
    """
    if m < 8:
        raise InvalidSpecError(f"patch size must be >= 8, got {m}")
    if not allow_padding and m % 8 != 0:
        raise InvalidSpecError(f"patch size must be divisible by 8, got {m}")
    if m % 2 != 0:
        raise InvalidSpecError(f"patch size must be even, got {m}")
    net = PriorNetwork(m)
    generator = torch.Generator().manual_seed(int(seed))
    _init_parameters(net, generator)
    net = net.to(dtype)
    s = net.in_size
    noise = torch.empty(s, s, 3, dtype=torch.float64)
    noise.uniform_(0.0, 1.0, generator=generator)
    return net, PriorNoise(tensor=noise.to(dtype), seed=int(seed))


def prior_forward(net: PriorNetwork, noise: PriorNoise) -> torch.Tensor:
    """Generate the (m, m, 3) patch pixels; values always lie in (0, 1)."""
    return net(noise.tensor)


def compose_prompt(
    rgb: torch.Tensor,
    mask: np.ndarray,
    spec: PatchSpec,
    meta: Optional[dict] = None,
) -> Prompt:
    """Bundle generated pixels with the mask that gates their insertion."""
    m = spec.size
    if rgb.shape != (m, m, 3):
        raise ContractError(f"rgb shape {tuple(rgb.shape)} does not match patch size {m}")
    mask = np.asarray(mask, dtype=np.uint8)
    if mask.shape != (m, m):
        raise ContractError(f"mask shape {mask.shape} does not match patch size {m}")
    return Prompt(rgb=rgb, mask=mask, spec=spec, meta=dict(meta or {}))


def save_prompt_rgba(prompt: Prompt, path) -> None:
    """Export the prompt as a lossless RGBA PNG with the mask as alpha."""
    rgb = (prompt.rgb.detach().cpu().numpy().clip(0.0, 1.0) * 255).round().astype(np.uint8)
    alpha = (prompt.mask.astype(np.uint8) * 255)[:, :, None]
    Image.fromarray(np.concatenate([rgb, alpha], axis=2), mode="RGBA").save(path, format="PNG")
