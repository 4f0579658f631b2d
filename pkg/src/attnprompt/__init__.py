"""attnprompt: learned visual prompts that steer frozen ViT attention.

The package trains a small convolutional generator so that the patch it
produces, masked to a chosen shape and inserted anywhere in an image, pulls
the class-token attention of a frozen vision transformer toward the insertion
site. Training, evaluation, baselines, rendering, a FastAPI service and a CLI
client are included; pretrained encoder weights are consumed via adapters,
never shipped.
"""

__version__ = "0.1.0"

from .checkpoint import (
    PromptCheckpoint,
    file_digest,
    load_prompt_checkpoint,
    restore_prior,
    save_prompt_checkpoint,
)
from .encoders import (
    AttentionTrace,
    EncoderConfig,
    TOY_CONFIG,
    VisionEncoder,
    build_toy_vit,
    load_external_encoder,
    parameter_checksum,
    query_attention_mean,
    save_encoder_weights,
    warmup_toy_vit,
)
from .errors import (
    BoundaryError,
    CheckpointLoadError,
    ConfigurationError,
    ContractError,
    DatasetError,
    InvalidSpecError,
    PromptError,
)
from .evaluation import (
    GainProfile,
    KeypointAccuracy,
    KeypointAnnotation,
    LabelEmbeddingTable,
    argmax_hit_rate,
    attention_gain_profile,
    baseline_transform,
    gain_profile_from_traces,
    keypoint_naming_accuracy,
    make_stub_label_table,
)
from .geometry import (
    PatchSpec,
    PixelLocation,
    insert_patch,
    is_valid_location,
    location_bounds,
    make_shape_mask,
    overlaid_token_set,
    sample_valid_location,
    sample_valid_locations,
    save_mask_png,
)
from .prior import (
    PriorNetwork,
    PriorNoise,
    Prompt,
    compose_prompt,
    init_prior,
    prior_forward,
    save_prompt_rgba,
)
from .targets import (
    TargetMap,
    TokenGrid,
    gaussian_target_map,
    save_target_png,
    sigma_from_patch,
    target_query_row,
)
from .training import TrainConfig, TrainReport, kl_loss, train_prompt, train_step
