"""Mask geometry: bounding boxes, crops, patch-overlap fractions, region pooling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in pixel coordinates, all bounds inclusive."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise ValueError(f"degenerate bbox {self}")
        if min(self.row_min, self.col_min) < 0:
            raise ValueError(f"bbox out of bounds {self}")

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    def expand(self, factor: float, image_height: int, image_width: int) -> "BBox":
        """Scale about the center by `factor`, then clip to image bounds."""
        if factor < 1.0:
            raise ValueError(f"enlarge factor must be >= 1, got {factor}")
        new_h = int(round(self.height * factor))
        new_w = int(round(self.width * factor))
        dh, dw = new_h - self.height, new_w - self.width
        return BBox(
            max(0, self.row_min - dh // 2),
            max(0, self.col_min - dw // 2),
            min(image_height - 1, self.row_max + (dh - dh // 2)),
            min(image_width - 1, self.col_max + (dw - dw // 2)),
        )


@dataclass(frozen=True)
class PoolingConfig:
    """Region pooling: patches whose positive-pixel fraction exceeds the
    threshold are averaged; `projection` selects the head applied afterwards
    ("separate" trains its own head, "shared" reuses the class-token head)."""

    overlap_threshold: float = 0.5
    projection: str = "separate"

    def __post_init__(self):
        if not 0.0 <= self.overlap_threshold < 1.0:
            raise ValueError(f"overlap_threshold must lie in [0, 1), got {self.overlap_threshold}")
        if self.projection not in ("shared", "separate"):
            raise ValueError(f"projection must be 'shared' or 'separate', got {self.projection!r}")


def mask_to_bbox(mask: torch.Tensor) -> BBox:
    """Smallest box containing all positive pixels; rejects empty masks."""
    mask = torch.as_tensor(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D (H, W)")
    rows, cols = torch.nonzero(mask > 0, as_tuple=True)
    if rows.numel() == 0:
        raise ValueError("mask has no positive pixels")
    return BBox(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def all_ones_mask(height: int, width: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    if height < 1 or width < 1:
        raise ValueError(f"mask dimensions must be positive, got {height}x{width}")
    return torch.ones(height, width, dtype=dtype)


def resize_image(pixels: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resample of a (3, H, W) image to (3, size, size)."""
    return F.interpolate(pixels.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False)[0]


def resize_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """Nearest-neighbor resample of an (H, W) mask; preserves {0,1} values."""
    return F.interpolate(mask.unsqueeze(0).unsqueeze(0), size=(size, size), mode="nearest")[0, 0]


def derive_crop(
    pixels: torch.Tensor,
    mask: torch.Tensor,
    enlarge: float = 1.0,
    out_size: int | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Crop image and mask to the mask's bounding box, expanded by `enlarge`.

    The box is scaled about its center and clipped to the image. The crop of
    the mask is the restriction of the original mask, so the object outline
    survives inside the crop. When `out_size` is given, the image crop is
    resampled bilinearly and the mask crop with nearest-neighbor.
    """
    pixels = torch.as_tensor(pixels)
    mask = torch.as_tensor(mask)
    if pixels.ndim != 3 or mask.ndim != 2 or pixels.shape[1:] != mask.shape:
        raise ValueError(
            f"pixels (C, H, W) and mask (H, W) must share spatial dims, "
            f"got {tuple(pixels.shape)} and {tuple(mask.shape)}"
        )
    h, w = mask.shape
    box = mask_to_bbox(mask).expand(enlarge, h, w)
    crop_px = pixels[:, box.row_min : box.row_max + 1, box.col_min : box.col_max + 1]
    crop_mask = mask[box.row_min : box.row_max + 1, box.col_min : box.col_max + 1]
    if out_size is not None:
        crop_px = resize_image(crop_px.float(), out_size).to(pixels.dtype)
        crop_mask = resize_mask(crop_mask.float(), out_size).to(mask.dtype)
    return crop_px.contiguous(), crop_mask.contiguous()


def patch_overlap_fractions(mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Per-patch fraction of positive pixels on the (H/p, W/p) grid."""
    mask = torch.as_tensor(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D (H, W)")
    h, w = mask.shape
    if patch_size < 1 or h % patch_size or w % patch_size:
        raise ValueError(f"mask shape {h}x{w} is not divisible by patch size {patch_size}")
    return F.avg_pool2d(mask.float().unsqueeze(0).unsqueeze(0), patch_size)[0, 0]


def pool_region_features(
    dense: torch.Tensor,
    mask: torch.Tensor,
    config: PoolingConfig,
    proj: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Average the patch features the mask covers, project, and L2-normalize.

    A patch qualifies when its positive-pixel fraction strictly exceeds the
    overlap threshold. A mask too small to clear the threshold anywhere falls
    back to the single patch of maximal overlap (ties: lowest row-major
    index); a fully empty mask is rejected.
    """
    dense = torch.as_tensor(dense)
    mask = torch.as_tensor(mask)
    if dense.ndim != 3 or dense.shape[0] != dense.shape[1]:
        raise ValueError("dense features must be (G, G, D)")
    g = dense.shape[0]
    h, w = mask.shape
    if h % g or w % g or h // g != w // g:
        raise ValueError(f"mask {h}x{w} does not tile the {g}x{g} feature grid")
    fractions = patch_overlap_fractions(mask, h // g).flatten()
    if not (fractions > 0).any():
        raise ValueError("mask has no positive pixels")
    selected = fractions > config.overlap_threshold
    if not selected.any():
        selected = torch.zeros_like(selected)
        selected[int(fractions.argmax())] = True
    pooled = dense.reshape(g * g, -1)[selected].mean(dim=0)
    return F.normalize(proj(pooled), dim=-1)
