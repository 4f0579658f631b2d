"""Pydantic request/response models: the service wire format.

The same RunConfig model backs the YAML config files the CLI reads, so one
schema validates both transports. Cross-field checks name the violated
constraint explicitly.
"""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator


class EncoderSection(BaseModel):
    kind: Literal["toy", "file"] = "toy"
    n: int = 64
    tile: int = 8
    layers: int = 4
    heads: int = 4
    dim: int = 64
    has_query_slot: bool = True
    seed: int = 0
    warmup_steps: int = 0
    path: Optional[str] = None
    adapter: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "file" and (self.path is None or self.adapter is None):
            raise ValueError("encoder.kind='file' requires encoder.path and encoder.adapter")
        if self.n <= 0 or self.tile <= 0:
            raise ValueError("encoder.n and encoder.tile must be positive")
        if self.kind == "toy":
            if self.n % self.tile != 0:
                raise ValueError(
                    f"encoder.n ({self.n}) must be divisible by encoder.tile ({self.tile})"
                )
            if self.dim % self.heads != 0:
                raise ValueError(
                    f"encoder.dim ({self.dim}) must be divisible by encoder.heads ({self.heads})"
                )
        return self


class PatchSection(BaseModel):
    size: int = 16
    shape: Literal["filled_square", "hollow_square", "hollow_circle"] = "hollow_circle"
    thickness: float = Field(default=0.75, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self):
        if self.size <= 0 or self.size % 2 != 0:
            raise ValueError(f"patch.size must be a positive even integer, got {self.size}")
        return self


class TrainSection(BaseModel):
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    k_locations: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 0
    loss_layer: Optional[int] = None
    epsilon_clamp: float = 1e-12
    kl_direction: Literal["target_first", "predicted_first"] = "target_first"


class DataSection(BaseModel):
    manifest: Optional[str] = None


class EvalSection(BaseModel):
    trials: int = 1000
    placements: int = 200
    seed: int = 2024


class RunConfig(BaseModel):
    encoder: EncoderSection = EncoderSection()
    patch: PatchSection = PatchSection()
    train: TrainSection = TrainSection()
    data: DataSection = DataSection()
    eval: EvalSection = EvalSection()
    output_dir: str = "runs/out"

    @model_validator(mode="after")
    def _check(self):
        if self.encoder.kind == "toy":
            if self.patch.size > self.encoder.n:
                raise ValueError(
                    f"patch.size ({self.patch.size}) exceeds encoder.n ({self.encoder.n})"
                )
            if self.patch.size + 2 > self.encoder.n:
                raise ValueError(
                    f"patch.size ({self.patch.size}) leaves no valid interior placement "
                    f"on an {self.encoder.n}x{self.encoder.n} image"
                )
        return self


class SynthDataRequest(BaseModel):
    out_dir: str
    count: int = 200
    n: int = 64
    seed: int = 0
    labels_dim: Optional[int] = None


class SynthDataResponse(BaseModel):
    manifest: str
    count: int
    labels: Optional[str] = None


class TrainRequest(BaseModel):
    config: RunConfig


class TrainResponse(BaseModel):
    checkpoint: str
    digest: str
    steps: int
    epochs: int
    first_epoch_mean_loss: Optional[float] = None
    final_epoch_mean_loss: Optional[float] = None
    loss_csv: str
    wall_clock_seconds: float
    encoder_frozen: bool
    encoder_checksum: str


class GainRequest(BaseModel):
    config: RunConfig
    checkpoint: str
    placements: Optional[int] = None
    seed: Optional[int] = None


class GainResponse(BaseModel):
    placements: int
    mean_gain_per_layer: list[Optional[float]]
    final_layer_positive_fraction: float
    metrics_csv: str


class HitsRequest(BaseModel):
    config: RunConfig
    checkpoint: str
    trials: Optional[int] = None
    seed: Optional[int] = None


class HitsResponse(BaseModel):
    trials: int
    prompted_rate: float
    base_rate: float
    ratio: Optional[float] = None
    metrics_csv: str


class KeypointsRequest(BaseModel):
    config: RunConfig
    checkpoint: str
    labels_path: str


class KeypointsResponse(BaseModel):
    accuracy: float
    evaluated: int
    skipped: int
    metrics_csv: str


class BaselineRequest(BaseModel):
    config: RunConfig
    kind: Literal["random_loc", "crop", "blur", "red_circle"]
    image_index: int = 0
    center_i: Optional[int] = None
    center_j: Optional[int] = None
    size: Optional[int] = None
    seed: int = 0


class BaselineResponse(BaseModel):
    output_path: str
    region: tuple[int, int, int, int]
    argmax_in_region: bool
    final_layer_gain: Optional[float] = None


class RenderRequest(BaseModel):
    config: RunConfig
    checkpoint: str
    image_index: int = 0
    i: Optional[int] = None
    j: Optional[int] = None
    seed: int = 0


class RenderResponse(BaseModel):
    files: dict[str, str]


class HealthResponse(BaseModel):
    status: str
    version: str
