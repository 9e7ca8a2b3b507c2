"""Contrastive objectives: cosine similarity, symmetric batch InfoNCE, composite loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import torch
import torch.nn.functional as F

# Learnable logit scale init / clamp bound. logits = similarity * exp(log_scale),
# i.e. temperature = exp(-log_scale).
LOG_SCALE_INIT = 4.0652
LOG_SCALE_MAX = math.log(100.0)

Scalar = Union[float, torch.Tensor]


@dataclass
class ContrastiveConfig:
    """Carries the logit scale (possibly a learnable tensor) and its clamp bound."""

    log_scale: Scalar = 0.0
    log_scale_max: float = LOG_SCALE_MAX

    def scale(self) -> Scalar:
        if isinstance(self.log_scale, torch.Tensor):
            return self.log_scale.exp()
        return math.exp(self.log_scale)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.25
    beta: float = 0.25

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


def _as_float_vector(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        x = x.detach()
        return (x if x.is_floating_point() else x.float()).flatten()
    return torch.as_tensor(x, dtype=torch.get_default_dtype()).flatten()


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two vectors; rejects zero vectors."""
    a = _as_float_vector(a)
    b = _as_float_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(torch.dot(a, b) / (na * nb))


def contrastive_loss(
    image_embeds: torch.Tensor,
    text_embeds: torch.Tensor,
    config: ContrastiveConfig | None = None,
) -> torch.Tensor:
    """Symmetric batch InfoNCE over cosine-similarity logits.

    Row i of each batch is the positive pair; all other rows are negatives.
    Both directions (image->text and text->image) are averaged, which makes
    the value invariant under exchanging the two arguments. Rows are
    normalized internally, so rescaling any embedding by a positive constant
    does not change the loss.
    """
    if config is None:
        config = ContrastiveConfig()
    v = image_embeds if isinstance(image_embeds, torch.Tensor) else torch.as_tensor(image_embeds)
    t = text_embeds if isinstance(text_embeds, torch.Tensor) else torch.as_tensor(text_embeds)
    if v.ndim != 2 or t.ndim != 2:
        raise ValueError("embedding batches must be 2-D (batch, dim)")
    if v.shape[0] != t.shape[0]:
        raise ValueError(f"batch size mismatch: {v.shape[0]} vs {t.shape[0]}")
    if v.shape[0] < 1:
        raise ValueError("batch must contain at least one pair")
    with torch.no_grad():
        if (v.norm(dim=-1) == 0).any() or (t.norm(dim=-1) == 0).any():
            raise ValueError("contrastive loss is undefined for zero embeddings")

    v = F.normalize(v, dim=-1)
    t = F.normalize(t, dim=-1)
    logits = v @ t.T * config.scale()
    targets = torch.arange(v.shape[0], device=v.device)
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def composite_loss(l_cl: Scalar, l_fc: Scalar, l_lg: Scalar, weights: LossWeights) -> Scalar:
    """Weighted sum l_cl + alpha*l_fc + beta*l_lg; rejects non-finite terms."""
    for name, term in (("l_cl", l_cl), ("l_fc", l_fc), ("l_lg", l_lg)):
        finite = torch.isfinite(term).all() if isinstance(term, torch.Tensor) else math.isfinite(term)
        if not finite:
            raise ValueError(f"{name} is not finite")
    return l_cl + weights.alpha * l_fc + weights.beta * l_lg
