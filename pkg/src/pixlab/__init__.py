"""Mask-promptable vision-text alignment at desk scale."""

from .encoders import (
    MaskedImage,
    PixelTextModel,
    TextEncoder,
    TextEncoderConfig,
    VisionEncoderConfig,
    VisionTransformerEncoder,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    ContrastiveConfig,
    LossWeights,
    composite_loss,
    contrastive_loss,
    cosine_similarity,
)
from .regionops import (
    BBox,
    PoolingConfig,
    all_ones_mask,
    derive_crop,
    mask_to_bbox,
    patch_overlap_fractions,
    pool_region_features,
)
from .training import (
    TrainingConfig,
    TrainingSample,
    assemble_batch,
    forward_three_branch,
    infer_embedding,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "ContrastiveConfig",
    "LossWeights",
    "MaskedImage",
    "PixelTextModel",
    "PoolingConfig",
    "TextEncoder",
    "TextEncoderConfig",
    "TrainingConfig",
    "TrainingSample",
    "VisionEncoderConfig",
    "VisionTransformerEncoder",
    "all_ones_mask",
    "assemble_batch",
    "composite_loss",
    "contrastive_loss",
    "cosine_similarity",
    "derive_crop",
    "forward_three_branch",
    "infer_embedding",
    "load_checkpoint",
    "mask_to_bbox",
    "patch_overlap_fractions",
    "pool_region_features",
    "save_checkpoint",
    "train",
]
