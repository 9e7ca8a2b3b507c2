"""Batch assembly, the three-branch objective, the optimizer loop, and inference.

Branch 1 aligns mask-conditioned global embeddings with captions; branch 2
encodes a tight enlarged crop of the masked region and aligns it with the
same caption; branch 3 pools region features out of a full-image forward and
aligns them with the branch-1 embedding. With some probability a sample is
swapped to an all-ones mask and its whole-image caption so the model keeps
its full-image behavior.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .encoders import (
    MaskedImage,
    PixelTextModel,
    TextEncoderConfig,
    VisionEncoderConfig,
)
from .losses import (
    LOG_SCALE_INIT,
    LOG_SCALE_MAX,
    ContrastiveConfig,
    LossWeights,
    composite_loss,
    contrastive_loss,
)
from .regionops import PoolingConfig, all_ones_mask, derive_crop, pool_region_features

METRIC_FIELDS = ("step", "l_cl", "l_fc", "l_lg", "l_total", "log_scale", "lr_mask", "lr_other")


@dataclass(frozen=True)
class TrainingSample:
    """One training tuple: image, region mask, captions, and the derived crop."""

    pixels: torch.Tensor
    mask: torch.Tensor
    long_caption: str
    short_caption: str
    global_caption: str
    crop_pixels: torch.Tensor
    crop_mask: torch.Tensor

    def __post_init__(self):
        if not self.long_caption.strip() or not self.global_caption.strip():
            raise ValueError("samples require non-empty long and global captions")

    @classmethod
    def build(
        cls,
        pixels: torch.Tensor,
        mask: torch.Tensor,
        long_caption: str,
        short_caption: str,
        global_caption: str,
        enlarge: float = 1.5,
        crop_size: int | None = None,
    ) -> "TrainingSample":
        """Construct a sample with crop fields derived from (pixels, mask)."""
        size = crop_size if crop_size is not None else pixels.shape[-1]
        crop_px, crop_mask = derive_crop(pixels, mask, enlarge, out_size=size)
        return cls(pixels, mask, long_caption, short_caption, global_caption, crop_px, crop_mask)


@dataclass
class TrainingConfig:
    alpha: float = 0.25
    beta: float = 0.25
    full_image_ratio: float = 0.1
    short_text_probability: float = 0.5
    batch_size: int = 128
    epochs: int = 8
    warmup_steps: int = 800
    learning_rate_mask_embed: float = 1e-5
    learning_rate_other: float = 1e-7
    weight_decay: float = 1e-2
    seed: int = 0
    enlarge_factor: float = 1.5
    overlap_threshold: float = 0.5
    log_scale_init: float = LOG_SCALE_INIT
    # Variant switches for the crop-alignment branch (see forward_three_branch).
    fc_align_to_global: bool = False
    fc_positive_only: bool = False

    def __post_init__(self):
        for name in ("full_image_ratio", "short_text_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("alpha", "beta", "learning_rate_mask_embed", "learning_rate_other", "weight_decay"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0:
            raise ValueError("batch_size must be >= 1; epochs and warmup_steps non-negative")
        if self.enlarge_factor < 1.0:
            raise ValueError(f"enlarge_factor must be >= 1, got {self.enlarge_factor}")

    @classmethod
    def desk(cls, **overrides) -> "TrainingConfig":
        """Minutes-scale CPU preset for overfitting small synthetic sets."""
        values = dict(
            batch_size=8,
            epochs=125,
            warmup_steps=20,
            learning_rate_mask_embed=5e-3,
            learning_rate_other=2e-3,
        )
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)


@dataclass(frozen=True)
class BatchItem:
    image: MaskedImage
    caption: str
    crop: MaskedImage
    crop_caption: str


def assemble_batch(
    samples: Sequence[TrainingSample],
    rng: np.random.Generator,
    config: TrainingConfig,
) -> list[BatchItem]:
    """Turn samples into encoder-ready items, applying the full-image swap.

    Independently per sample: with probability `full_image_ratio` the mask
    becomes all-ones and the caption the whole-image caption (the crop branch
    then degenerates to the full image); otherwise the short caption is used
    with probability `short_text_probability`, else the long one. `rng` is
    the sole randomness source.
    """
    if len(samples) != config.batch_size:
        raise ValueError(f"expected {config.batch_size} samples, got {len(samples)}")
    items = []
    for sample in samples:
        if not sample.short_caption.strip():
            raise ValueError("sample is missing a short caption")
        if rng.random() < config.full_image_ratio:
            ones = all_ones_mask(*sample.pixels.shape[1:], dtype=sample.pixels.dtype)
            full = MaskedImage(sample.pixels, ones)
            items.append(BatchItem(full, sample.global_caption, full, sample.global_caption))
        else:
            caption = (
                sample.short_caption
                if rng.random() < config.short_text_probability
                else sample.long_caption
            )
            items.append(
                BatchItem(
                    MaskedImage(sample.pixels, sample.mask),
                    caption,
                    MaskedImage(sample.crop_pixels, sample.crop_mask),
                    caption,
                )
            )
    return items


def _stack(items: list[BatchItem], which: str, dtype: torch.dtype):
    images = [getattr(item, which) for item in items]
    px = torch.stack([im.pixels for im in images]).to(dtype)
    masks = torch.stack([im.mask for im in images]).unsqueeze(1).to(dtype)
    return px, masks


def forward_three_branch(
    batch: list[BatchItem],
    model: PixelTextModel,
    config: TrainingConfig,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Compute (l_cl, l_fc, l_lg, l_total) for an assembled batch.

    The crop branch contrasts the crop embedding against the caption; with
    `fc_align_to_global` it targets the branch-1 embedding instead, and with
    `fc_positive_only` it reduces to mean (1 - cosine) over positive pairs.
    The region branch pools dense features from an all-ones-mask forward
    under each sample's mask and contrasts them with the branch-1 embedding.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    for i, item in enumerate(batch):
        if not item.caption.strip() or not item.crop_caption.strip():
            raise ValueError(f"sample {i}: empty caption")
    dtype = model.dtype
    cfg_contrastive = ContrastiveConfig(log_scale=model.log_scale)
    weights = LossWeights(config.alpha, config.beta)
    b = len(batch)

    # One fused visual pass over (masked image, masked crop, all-ones image);
    # samples are independent, so this equals three separate forwards.
    px, masks = _stack(batch, "image", dtype)
    crop_px, crop_masks = _stack(batch, "crop", dtype)
    pooled_out, dense_out = model.visual(
        torch.cat([px, crop_px, px]),
        torch.cat([masks, crop_masks, torch.ones_like(masks)]),
    )
    e_v, v_c = pooled_out[:b], pooled_out[b : 2 * b]
    dense = dense_out[2 * b :]

    e_t = model.encode_texts([item.caption for item in batch])
    l_cl = contrastive_loss(e_v, e_t, cfg_contrastive)

    fc_target = e_v if config.fc_align_to_global else model.encode_texts(
        [item.crop_caption for item in batch]
    )
    if config.fc_positive_only:
        l_fc = (1.0 - (v_c * fc_target).sum(dim=-1)).mean()
    else:
        l_fc = contrastive_loss(v_c, fc_target, cfg_contrastive)

    pooling = PoolingConfig(config.overlap_threshold, model.pooling.projection)
    pooled = []
    for i, item in enumerate(batch):
        try:
            pooled.append(
                pool_region_features(dense[i], item.image.mask, pooling, model.region_proj)
            )
        except ValueError as exc:
            raise ValueError(f"sample {i}: {exc}") from exc
    l_lg = contrastive_loss(torch.stack(pooled), e_v, cfg_contrastive)

    l_total = composite_loss(l_cl, l_fc, l_lg, weights)
    return l_cl, l_fc, l_lg, l_total


def build_model(
    config: TrainingConfig,
    vision_config: VisionEncoderConfig | None = None,
    text_config: TextEncoderConfig | None = None,
) -> PixelTextModel:
    """Seeded model construction so equal-seed runs start identically."""
    torch.manual_seed(config.seed)
    return PixelTextModel(
        vision_config or VisionEncoderConfig.desk(),
        text_config or TextEncoderConfig.desk(),
        PoolingConfig(overlap_threshold=config.overlap_threshold),
        log_scale_init=config.log_scale_init,
    )


def _make_optimizer(model: PixelTextModel, config: TrainingConfig) -> torch.optim.AdamW:
    mask_params = model.mask_embed_parameters()
    mask_ids = {id(p) for p in mask_params}
    other = [p for p in model.parameters() if p.requires_grad and id(p) not in mask_ids]
    return torch.optim.AdamW(
        [
            {"params": mask_params, "lr": config.learning_rate_mask_embed},
            {"params": other, "lr": config.learning_rate_other},
        ],
        betas=(0.9, 0.98),
        eps=1e-6,
        weight_decay=config.weight_decay,
    )


@dataclass
class TrainResult:
    model: PixelTextModel
    metrics: list[dict] = field(default_factory=list)


def train(
    dataset: Sequence[TrainingSample],
    config: TrainingConfig,
    model: PixelTextModel | None = None,
    metrics_path=None,
    max_steps: int | None = None,
    step_hook: Callable[[int, PixelTextModel], bool] | None = None,
) -> TrainResult:
    """Run the optimizer loop and return the model plus per-step metrics.

    Epochs shuffle the dataset and step over full batches (a trailing partial
    batch is dropped). Steps are numbered from 1; the learning rates ramp
    linearly over `warmup_steps` then stay constant, with the mask patch
    embedding on its own rate. After every step the logit scale is clamped.
    A non-finite loss aborts with the offending step index. `step_hook`, when
    given, is called after each step and may return True to stop early.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    if model is None:
        model = build_model(config)
    rng = np.random.default_rng(config.seed)
    optimizer = _make_optimizer(model, config)
    metrics: list[dict] = []
    log_file = open(metrics_path, "w") if metrics_path is not None else None

    step = 0
    stop = False
    try:
        for _ in range(config.epochs):
            order = rng.permutation(len(dataset))
            for start in range(0, len(dataset) - config.batch_size + 1, config.batch_size):
                step += 1
                warm = min(1.0, step / config.warmup_steps) if config.warmup_steps else 1.0
                optimizer.param_groups[0]["lr"] = config.learning_rate_mask_embed * warm
                optimizer.param_groups[1]["lr"] = config.learning_rate_other * warm

                picked = [dataset[i] for i in order[start : start + config.batch_size]]
                batch = assemble_batch(picked, rng, config)
                l_cl, l_fc, l_lg, l_total = forward_three_branch(batch, model, config)
                if not torch.isfinite(l_total):
                    raise RuntimeError(f"non-finite loss at step {step}")
                optimizer.zero_grad()
                l_total.backward()
                optimizer.step()
                with torch.no_grad():
                    model.log_scale.clamp_(max=LOG_SCALE_MAX)

                record = {
                    "step": step,
                    "l_cl": float(l_cl.detach()),
                    "l_fc": float(l_fc.detach()),
                    "l_lg": float(l_lg.detach()),
                    "l_total": float(l_total.detach()),
                    "log_scale": float(model.log_scale.detach()),
                    "lr_mask": optimizer.param_groups[0]["lr"],
                    "lr_other": optimizer.param_groups[1]["lr"],
                }
                metrics.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")

                if step_hook is not None and step_hook(step, model):
                    stop = True
                if max_steps is not None and step >= max_steps:
                    stop = True
                if stop:
                    break
            if stop:
                break
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model=model, metrics=metrics)


def infer_embedding(pixels: torch.Tensor, mask: torch.Tensor, model: PixelTextModel) -> torch.Tensor:
    """Embedding of a full image with its mask: exactly the branch-1 output."""
    with torch.no_grad():
        pooled, _ = model.encode_vision(MaskedImage(pixels, mask))
    return pooled
