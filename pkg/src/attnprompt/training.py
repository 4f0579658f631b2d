"""Self-supervised prompt optimization against a frozen encoder.

Each step generates the patch from the prior, inserts it at freshly sampled
valid locations, runs the frozen encoder, and minimizes the KL divergence
between the Gaussian target for each placement and the head-averaged query
attention row. Only the prior's weights receive gradients; AdamW updates
them. Placements are resampled every epoch so the patch generalizes across
positions.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_prompt_checkpoint
from .encoders.config import query_attention_mean
from .encoders.vit import VisionEncoder, parameter_checksum
from .errors import ConfigurationError, ContractError, InvalidSpecError
from .geometry import (
    PatchSpec,
    PixelLocation,
    location_bounds,
    insert_patch,
    make_shape_mask,
    sample_valid_location,
)
from .prior import PriorNetwork, PriorNoise, Prompt, compose_prompt, init_prior, prior_forward
from .targets import TokenGrid, gaussian_target_map, sigma_from_patch, target_query_row

KL_DIRECTIONS = ("target_first", "predicted_first")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the defaults are the reference configuration
    (AdamW, lr 1e-3, batch 32, 10 epochs, one placement per image)."""

    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    k_locations: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    seed: int = 0
    loss_layer: Optional[int] = None  # None = last layer
    epsilon_clamp: float = 1e-12
    kl_direction: str = "target_first"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidSpecError("learning_rate, batch_size must be positive; epochs >= 0")
        if self.k_locations < 1:
            raise InvalidSpecError(f"k_locations must be >= 1, got {self.k_locations}")
        if self.epsilon_clamp <= 0 or self.weight_decay < 0:
            raise InvalidSpecError("epsilon_clamp must be positive, weight_decay nonnegative")
        if self.kl_direction not in KL_DIRECTIONS:
            raise InvalidSpecError(
                f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}"
            )


@dataclass
class TrainReport:
    """Per-step loss series plus run-level bookkeeping."""

    step_records: list[tuple[int, int, float]] = field(default_factory=list)
    epoch_mean_losses: list[float] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    checkpoint_digest: Optional[str] = None

    @property
    def step_losses(self) -> list[float]:
        return [loss for _, _, loss in self.step_records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "epoch", "loss"])
            writer.writerows(self.step_records)


def kl_loss(target: torch.Tensor, predicted: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """KL(target || predicted) = sum_p target_p * ln(target_p / max(predicted_p, eps)).

    Zero-mass target entries contribute nothing. Inputs are distributions
    over the last dimension; leading batch dimensions are preserved.
    """
    if target.shape != predicted.shape:
        raise ContractError(
            f"distribution shapes differ: {tuple(target.shape)} vs {tuple(predicted.shape)}"
        )
    log_ratio = target.clamp_min(eps).log() - predicted.clamp_min(eps).log()
    terms = torch.where(target > 0, target * log_ratio, torch.zeros_like(log_ratio))
    return terms.sum(dim=-1)


def _placement_loss(
    images: Sequence[torch.Tensor],
    locations: Sequence[Sequence[PixelLocation]],
    net: PriorNetwork,
    noise: PriorNoise,
    mask: np.ndarray,
    encoder: VisionEncoder,
    config: TrainConfig,
) -> torch.Tensor:
    """Differentiable mean KL over every (image, location) placement."""
    cfg = encoder.config
    grid = TokenGrid(cfg.tokens_per_side, cfg.tile_size)
    m = int(mask.shape[0])
    sigma = sigma_from_patch(m, cfg.tile_size)
    prompt_rgb = prior_forward(net, noise)
    prompted, target_rows = [], []
    for image, locs in zip(images, locations):
        for loc in locs:
            prompted.append(insert_patch(image, prompt_rgb, mask, loc))
            tmap = gaussian_target_map(loc, grid, sigma)
            target_rows.append(target_query_row(tmap, cfg.has_query_slot))
    if not prompted:
        raise ConfigurationError("no placements in batch")
    batch = torch.stack(prompted)
    _, trace = encoder.forward_with_attention(batch)
    layer = config.loss_layer if config.loss_layer is not None else cfg.layers
    predicted = query_attention_mean(trace, layer)
    target = torch.from_numpy(np.stack(target_rows)).to(predicted.dtype)
    if config.kl_direction == "target_first":
        losses = kl_loss(target, predicted, config.epsilon_clamp)
    else:
        losses = kl_loss(predicted, target, config.epsilon_clamp)
    return losses.mean()


def train_step(
    images: Sequence[torch.Tensor],
    locations: Sequence[Sequence[PixelLocation]],
    net: PriorNetwork,
    noise: PriorNoise,
    mask: np.ndarray,
    encoder: VisionEncoder,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
) -> float:
    """One optimization step; returns the batch loss. Only the prior's
    parameters change (the optimizer owns exactly those)."""
    loss = _placement_loss(images, locations, net, noise, mask, encoder, config)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def encoder_identifier(encoder: VisionEncoder) -> str:
    cfg = encoder.config
    slot = "cls" if cfg.has_query_slot else "pool"
    return (
        f"vit-n{cfg.image_size}-t{cfg.tile_size}-L{cfg.layers}-H{cfg.heads}"
        f"-d{cfg.dim}-{slot}-{parameter_checksum(encoder)[:8]}"
    )


def _config_digest(patch_spec: PatchSpec, config: TrainConfig) -> str:
    import hashlib
    import json

    payload = {
        "patch": [patch_spec.size, patch_spec.shape, patch_spec.thickness_ratio],
        "train": [
            config.learning_rate, config.batch_size, config.epochs, config.k_locations,
            list(config.betas), config.weight_decay, config.seed, config.loss_layer,
            config.epsilon_clamp, config.kl_direction,
        ],
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def train_prompt(
    dataset: Sequence[torch.Tensor],
    encoder: VisionEncoder,
    patch_spec: PatchSpec,
    config: TrainConfig = TrainConfig(),
    checkpoint_dir=None,
) -> tuple[Prompt, TrainReport]:
    """Run the full optimization loop and return the learned prompt.

    Every epoch reshuffles the dataset and draws k fresh placements per
    image; the whole run (shuffles, placements, prior init) is a pure
    function of ``config.seed``. With ``checkpoint_dir`` set, a checkpoint is
    written after every epoch plus a final ``prompt.safetensors`` and the
    loss series CSV.
    """
    images = list(dataset)
    if not images:
        raise ConfigurationError("training dataset is empty")
    cfg = encoder.config
    n, m = cfg.image_size, patch_spec.size
    location_bounds(n, m)  # fail fast when no valid placement exists
    mask = make_shape_mask(patch_spec)
    dtype = encoder.pos_embed.dtype
    net, noise = init_prior(config.seed, m, dtype=dtype, allow_padding=True)
    optimizer = torch.optim.AdamW(
        net.parameters(),
        lr=config.learning_rate,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    meta = {
        "encoder_id": encoder_identifier(encoder),
        "seed": str(config.seed),
        "config_digest": _config_digest(patch_spec, config),
    }
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    report = TrainReport()
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(images))
        epoch_losses = []
        for lo in range(0, len(order), config.batch_size):
            chunk = order[lo : lo + config.batch_size]
            batch_images = [images[i] for i in chunk]
            batch_locs = [
                [sample_valid_location(n, m, rng) for _ in range(config.k_locations)]
                for _ in chunk
            ]
            loss = train_step(
                batch_images, batch_locs, net, noise, mask, encoder, optimizer, config
            )
            report.step_records.append((step, epoch, loss))
            epoch_losses.append(loss)
            step += 1
        report.epoch_mean_losses.append(float(np.mean(epoch_losses)))
        if checkpoint_dir is not None:
            with torch.no_grad():
                snapshot = compose_prompt(prior_forward(net, noise), mask, patch_spec, meta)
            save_prompt_checkpoint(
                os.path.join(checkpoint_dir, f"epoch-{epoch:03d}.safetensors"),
                snapshot, net, noise,
            )
    report.wall_clock_seconds = time.perf_counter() - start

    with torch.no_grad():
        prompt = compose_prompt(prior_forward(net, noise), mask, patch_spec, meta)
    if checkpoint_dir is not None:
        final_path = os.path.join(checkpoint_dir, "prompt.safetensors")
        report.checkpoint_digest = save_prompt_checkpoint(final_path, prompt, net, noise)
        report.write_csv(os.path.join(checkpoint_dir, "loss_series.csv"))
    return prompt, report
