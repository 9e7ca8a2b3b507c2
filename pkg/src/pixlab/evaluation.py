"""Retrieval, zero-shot region classification, candidate scoring, attention export.

All rankings use cosine similarity with deterministic tie-breaking: ties go
to the lower insertion (or class/candidate) index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .encoders import MaskedImage, PixelTextModel
from .regionops import all_ones_mask, derive_crop
from .training import TrainingSample, infer_embedding


@dataclass(frozen=True)
class RetrievalIndex:
    """Unit-norm embedding matrix with unique ids; immutable once built."""

    embeddings: np.ndarray
    ids: tuple

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, item_id) -> int:
        try:
            return self.ids.index(item_id)
        except ValueError:
            raise KeyError(f"id {item_id!r} not in index") from None


@dataclass
class RetrievalReport:
    direction: str
    recall_at: dict[int, float] = field(default_factory=dict)
    n_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
            "n_queries": self.n_queries,
        }


def _to_matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, torch.Tensor):
        embeddings = embeddings.detach().cpu().numpy()
    mat = np.asarray(embeddings, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("embeddings must be 2-D (N, D)")
    return mat


def build_index(embeddings, ids: Sequence) -> RetrievalIndex:
    """Normalize rows and freeze them with their ids."""
    mat = _to_matrix(embeddings)
    ids = tuple(ids)
    if len(ids) != mat.shape[0]:
        raise ValueError(f"{mat.shape[0]} embeddings but {len(ids)} ids")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("index embeddings must be nonzero")
    return RetrievalIndex(embeddings=mat / norms, ids=ids)


def recall_at_k(
    queries,
    index: RetrievalIndex,
    ground_truth: Sequence,
    ks: Sequence[int] = (1, 5, 10),
    direction: str = "",
) -> RetrievalReport:
    """Fraction of queries whose ground-truth id ranks in the top k by cosine."""
    mat = _to_matrix(queries)
    if len(ground_truth) != mat.shape[0]:
        raise ValueError(f"{mat.shape[0]} queries but {len(ground_truth)} ground-truth ids")
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("query embeddings must be nonzero")
    mat = mat / norms

    positions = np.empty(mat.shape[0], dtype=np.int64)
    sims = mat @ index.embeddings.T
    # Stable sort on the negated similarities: equal scores keep insertion order.
    order = np.argsort(-sims, axis=1, kind="stable")
    for qi, truth in enumerate(ground_truth):
        try:
            target = index.position(truth)
        except KeyError as exc:
            raise ValueError(f"query {qi}: {exc}") from None
        positions[qi] = int(np.nonzero(order[qi] == target)[0][0])

    report = RetrievalReport(direction=direction, n_queries=mat.shape[0])
    for k in ks:
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        report.recall_at[int(k)] = float(np.mean(positions < k))
    return report


def mask_text_retrieval(
    model: PixelTextModel,
    dataset: Sequence[TrainingSample],
    ks: Sequence[int] = (1, 5, 10),
) -> tuple[RetrievalReport, RetrievalReport]:
    """Mask-to-text and text-to-mask recall over (image, mask, long caption) triples."""
    vis, txt = [], []
    for i, sample in enumerate(dataset):
        try:
            vis.append(infer_embedding(sample.pixels, sample.mask, model).numpy())
            with torch.no_grad():
                txt.append(model.encode_text(sample.long_caption).numpy())
        except ValueError as exc:
            raise ValueError(f"sample {i}: {exc}") from exc
    vis_mat, txt_mat = np.stack(vis), np.stack(txt)
    ids = list(range(len(dataset)))
    m2t = recall_at_k(vis_mat, build_index(txt_mat, ids), ids, ks, direction="M2T")
    t2m = recall_at_k(txt_mat, build_index(vis_mat, ids), ids, ks, direction="T2M")
    return m2t, t2m


def zero_shot_classify(
    model: PixelTextModel,
    pixels: torch.Tensor,
    mask: torch.Tensor,
    class_prompts: Sequence[str],
    protocol: str = "visual_prompt",
    k: int = 1,
) -> list[int]:
    """Rank class prompts against a region embedding; returns top-k class indices.

    `visual_prompt` feeds the mask directly to the encoder; `crop_1_5x` crops
    the region enlarged 1.5x and encodes it under an all-ones mask.
    """
    if not class_prompts:
        raise ValueError("at least one class prompt is required")
    if protocol == "visual_prompt":
        emb = infer_embedding(pixels, mask, model)
    elif protocol == "crop_1_5x":
        size = model.vision_config.input_resolution
        crop_px, _ = derive_crop(pixels, mask, enlarge=1.5, out_size=size)
        emb = infer_embedding(crop_px, all_ones_mask(size, size, dtype=crop_px.dtype), model)
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    with torch.no_grad():
        prompt_embs = model.encode_texts(list(class_prompts))
    sims = (prompt_embs @ F.normalize(emb, dim=-1)).numpy()
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[: max(1, k)]]


def mask_iou(a: torch.Tensor, b: torch.Tensor) -> float:
    a = torch.as_tensor(a)
    b = torch.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    pa, pb = a > 0, b > 0
    union = (pa | pb).sum().item()
    if union == 0:
        raise ValueError("IoU is undefined for two empty masks")
    return (pa & pb).sum().item() / union


def rec_select(
    model: PixelTextModel,
    pixels: torch.Tensor,
    candidate_masks: Sequence[torch.Tensor],
    referring_text: str,
) -> int:
    """Pick the candidate mask whose region embedding best matches the text."""
    if not candidate_masks:
        raise ValueError("at least one candidate mask is required")
    with torch.no_grad():
        text_emb = model.encode_text(referring_text)
    sims = []
    for mask in candidate_masks:
        emb = infer_embedding(pixels, mask, model)
        sims.append(float(emb @ text_emb))
    return int(np.argmax(sims))  # argmax takes the first maximum: lowest index wins


def export_attention_map(model: PixelTextModel, pixels: torch.Tensor, mask: torch.Tensor, path) -> None:
    """Write the last block's class-token attention as an 8-bit grayscale image.

    Heads are averaged after per-head renormalization over patches, the grid
    is upsampled bilinearly to the input resolution, and values are min-max
    scaled to [0, 255].
    """
    with torch.no_grad():
        per_head = model.attention_map(MaskedImage(pixels, mask))
    g = model.vision_config.grid_size
    res = model.vision_config.input_resolution
    grid = per_head.mean(dim=0).reshape(1, 1, g, g)
    up = F.interpolate(grid, size=(res, res), mode="bilinear", align_corners=False)[0, 0]
    lo, hi = float(up.min()), float(up.max())
    scaled = (up - lo) / (hi - lo) if hi > lo else torch.zeros_like(up)
    arr = (scaled * 255.0).round().to(torch.uint8).numpy()
    Image.fromarray(arr, mode="L").save(path)


def write_report(report: RetrievalReport, path, checkpoint_id: str = "") -> None:
    payload = report.to_dict()
    payload["checkpoint"] = checkpoint_id
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
