"""Mask-promptable vision encoder and the frozen-text-tower/projector pair.

The vision encoder is a standard pre-norm ViT with one twist: a second,
single-channel patch embedding for the mask, zero-initialized so a fresh
model is completely mask-blind. The text side pairs a frozen deterministic
token-table encoder (a stand-in for a frozen language-model tower) with a
trainable projector into the shared embedding space.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import LOG_SCALE_INIT
from .regionops import PoolingConfig

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VisionEncoderConfig:
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    proj_dim: int = 32
    input_resolution: int = 32
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.input_resolution % self.patch_size:
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by patch_size {self.patch_size}"
            )

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @classmethod
    def desk(cls) -> "VisionEncoderConfig":
        """Minutes-scale CPU configuration."""
        return cls()

    @classmethod
    def tiny(cls) -> "VisionEncoderConfig":
        """Sub-1k-parameter configuration for finite-difference gradient checks."""
        return cls(patch_size=2, embed_dim=6, depth=1, heads=2, proj_dim=4,
                   input_resolution=4, mlp_ratio=2.0)

    @classmethod
    def vit_b16(cls) -> "VisionEncoderConfig":
        """Full-scale preset; same code path, only larger dimensions."""
        return cls(patch_size=16, embed_dim=768, depth=12, heads=12, proj_dim=512,
                   input_resolution=224)


@dataclass(frozen=True)
class TextEncoderConfig:
    width: int = 64
    table_size: int = 65536
    table_seed: int = 0
    projector_layers: int = 4
    proj_dim: int = 32

    def __post_init__(self):
        if self.width < 1 or self.table_size < 1 or self.projector_layers < 1:
            raise ValueError("text encoder dimensions must be positive")

    @classmethod
    def desk(cls) -> "TextEncoderConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "TextEncoderConfig":
        return cls(width=6, table_size=256, projector_layers=2, proj_dim=4)


@dataclass(frozen=True)
class MaskedImage:
    """An image with a same-resolution region mask; the universal visual input.

    `pixels` is (3, H, W) with per-channel-normalized values; `mask` is (H, W)
    with values in [0, 1] and is binarized at 0.5 on construction.
    """

    pixels: torch.Tensor
    mask: torch.Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pixels = torch.as_tensor(self.pixels)
        if pixels.ndim != 3 or pixels.shape[0] != 3:
            raise ValueError(f"pixels must be (3, H, W), got {tuple(pixels.shape)}")
        mask = self.mask
        if mask is None:
            mask = torch.ones(pixels.shape[1:], dtype=pixels.dtype)
        mask = torch.as_tensor(mask)
        if mask.shape != pixels.shape[1:]:
            raise ValueError(
                f"mask shape {tuple(mask.shape)} does not match image {tuple(pixels.shape[1:])}"
            )
        if mask.numel() and (mask.min() < 0 or mask.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "mask", (mask >= 0.5).to(pixels.dtype))

    @property
    def resolution(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_weights=False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)  # (b, heads, n, n)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn if return_weights else None


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, return_weights=False):
        attended, weights = self.attn(self.norm1(x), return_weights)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, weights


class VisionTransformerEncoder(nn.Module):
    """ViT trunk with parallel image/mask patch embeddings.

    Patch tokens are Conv_img(pixels) + Conv_mask(mask) + positional encoding;
    the mask embedding starts at exactly zero (weights and bias), so outputs
    are independent of the mask until training moves those weights.
    """

    def __init__(self, config: VisionEncoderConfig):
        super().__init__()
        self.config = config
        p, e = config.patch_size, config.embed_dim
        self.conv_image = nn.Conv2d(3, e, kernel_size=p, stride=p)
        self.conv_mask = nn.Conv2d(1, e, kernel_size=p, stride=p)
        nn.init.zeros_(self.conv_mask.weight)
        nn.init.zeros_(self.conv_mask.bias)
        self.pos_embed = nn.Parameter(torch.empty(1, config.num_patches, e))
        self.cls_token = nn.Parameter(torch.empty(1, 1, e))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(e, config.heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(e)
        self.head = nn.Linear(e, config.proj_dim)
        self.region_head = nn.Linear(e, config.proj_dim)

    def _check_shapes(self, pixels, masks):
        r = self.config.input_resolution
        if pixels.ndim != 4 or pixels.shape[1] != 3 or pixels.shape[2:] != (r, r):
            raise ValueError(f"expected pixels (B, 3, {r}, {r}), got {tuple(pixels.shape)}")
        if masks.shape != (pixels.shape[0], 1, r, r):
            raise ValueError(f"expected masks (B, 1, {r}, {r}), got {tuple(masks.shape)}")

    def embed_patches(self, pixels: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) pixels + (B, 1, H, W) masks -> (B, G*G, E) tokens, row-major."""
        self._check_shapes(pixels, masks)
        img_tokens = self.conv_image(pixels).flatten(2).transpose(1, 2)
        mask_tokens = self.conv_mask(masks).flatten(2).transpose(1, 2)
        return img_tokens + mask_tokens + self.pos_embed

    def forward(self, pixels, masks, return_attention=False):
        """Returns (global (B, P), dense (B, G, G, E)[, last-block attention])."""
        tokens = self.embed_patches(pixels, masks)
        b = tokens.shape[0]
        x = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        attn = None
        for i, block in enumerate(self.blocks):
            x, weights = block(x, return_weights=return_attention and i == len(self.blocks) - 1)
            if weights is not None:
                attn = weights
        x = self.norm(x)
        g = self.config.grid_size
        pooled = F.normalize(self.head(x[:, 0]), dim=-1)
        dense = x[:, 1:].reshape(b, g, g, self.config.embed_dim)
        if return_attention:
            return pooled, dense, attn
        return pooled, dense


class FrozenTextTower(nn.Module):
    """Deterministic frozen text encoder over a fixed random token table.

    Tokens are whitespace-split, hashed into a seeded random projection table,
    and mean-pooled. The table is a buffer, never a parameter, so no gradient
    can ever touch it; identical text always yields the identical vector.
    """

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.table_seed)
        table = rng.standard_normal((config.table_size, config.width)) / np.sqrt(config.width)
        self.register_buffer("table", torch.from_numpy(table.astype(np.float32)))

    def _bucket(self, token: str) -> int:
        digest = hashlib.sha256(f"{self.config.table_seed}:{token}".encode()).digest()
        return int.from_bytes(digest[:8], "big") % self.config.table_size

    def encode(self, text: str) -> torch.Tensor:
        if not text or not text.strip():
            raise ValueError("cannot encode empty text")
        rows = torch.tensor([self._bucket(tok) for tok in text.split()], dtype=torch.long)
        return self.table[rows].mean(dim=0)

    def fingerprint(self) -> str:
        """Hash of the table contents; must never change once constructed."""
        payload = np.ascontiguousarray(self.table.detach().cpu().numpy()).tobytes()
        return hashlib.sha256(payload).hexdigest()


class TextEncoder(nn.Module):
    """Frozen tower followed by a trainable projector into the shared space."""

    def __init__(self, config: TextEncoderConfig, tower: nn.Module | None = None):
        super().__init__()
        self.config = config
        self.tower = tower if tower is not None else FrozenTextTower(config)
        layers: list[nn.Module] = []
        for i in range(config.projector_layers):
            out = config.proj_dim if i == config.projector_layers - 1 else config.width
            layers.append(nn.Linear(config.width, out))
            if i < config.projector_layers - 1:
                layers.append(nn.GELU())
        self.projector = nn.Sequential(*layers)

    def forward(self, texts: list[str]) -> torch.Tensor:
        dtype = next(self.projector.parameters()).dtype
        with torch.no_grad():
            pooled = torch.stack([self.tower.encode(t) for t in texts]).to(dtype)
        return F.normalize(self.projector(pooled), dim=-1)

    def encode(self, text: str) -> torch.Tensor:
        return self.forward([text])[0]


class PixelTextModel(nn.Module):
    """Vision encoder + text encoder + learnable logit scale, as one unit."""

    def __init__(
        self,
        vision_config: VisionEncoderConfig | None = None,
        text_config: TextEncoderConfig | None = None,
        pooling: PoolingConfig | None = None,
        log_scale_init: float = LOG_SCALE_INIT,
    ):
        super().__init__()
        self.vision_config = vision_config or VisionEncoderConfig.desk()
        self.text_config = text_config or TextEncoderConfig.desk()
        if self.vision_config.proj_dim != self.text_config.proj_dim:
            raise ValueError(
                f"vision proj_dim {self.vision_config.proj_dim} != "
                f"text proj_dim {self.text_config.proj_dim}"
            )
        self.pooling = pooling or PoolingConfig()
        self.visual = VisionTransformerEncoder(self.vision_config)
        self.text = TextEncoder(self.text_config)
        self.log_scale = nn.Parameter(torch.tensor(float(log_scale_init)))

    @property
    def region_proj(self) -> nn.Module:
        return self.visual.head if self.pooling.projection == "shared" else self.visual.region_head

    @property
    def dtype(self) -> torch.dtype:
        return self.log_scale.dtype

    def _as_batch(self, image: MaskedImage) -> tuple[torch.Tensor, torch.Tensor]:
        px = image.pixels.to(self.dtype).unsqueeze(0)
        m = image.mask.to(self.dtype).unsqueeze(0).unsqueeze(0)
        return px, m

    def embed_patches(self, image: MaskedImage) -> torch.Tensor:
        px, m = self._as_batch(image)
        return self.visual.embed_patches(px, m)[0]

    def encode_vision(self, image: MaskedImage) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (global embedding (P,), dense feature grid (G, G, E))."""
        px, m = self._as_batch(image)
        pooled, dense = self.visual(px, m)
        return pooled[0], dense[0]

    def encode_text(self, text: str) -> torch.Tensor:
        return self.text.encode(text)

    def encode_texts(self, texts: list[str]) -> torch.Tensor:
        return self.text(texts)

    def mask_embed_parameters(self) -> list[nn.Parameter]:
        return list(self.visual.conv_mask.parameters())

    def attention_map(self, image: MaskedImage) -> torch.Tensor:
        """Class-token attention over patches in the last block, (heads, G*G).

        Per head, weights are renormalized over the patch positions so each
        head sums to exactly 1.
        """
        px, m = self._as_batch(image)
        _, _, attn = self.visual(px, m, return_attention=True)
        cls_to_patches = attn[0, :, 0, 1:]
        return cls_to_patches / cls_to_patches.sum(dim=-1, keepdim=True)


def save_checkpoint(model: PixelTextModel, path) -> None:
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "vision_config": asdict(model.vision_config),
            "text_config": asdict(model.text_config),
            "pooling": asdict(model.pooling),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(
    path,
    vision_config: VisionEncoderConfig | None = None,
    text_config: TextEncoderConfig | None = None,
) -> PixelTextModel:
    """Restore a model; a requested config that disagrees with the stored one is an error."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    stored_vision = VisionEncoderConfig(**payload["vision_config"])
    stored_text = TextEncoderConfig(**payload["text_config"])
    if vision_config is not None and vision_config != stored_vision:
        raise ValueError(f"checkpoint vision config {stored_vision} != requested {vision_config}")
    if text_config is not None and text_config != stored_text:
        raise ValueError(f"checkpoint text config {stored_text} != requested {text_config}")
    model = PixelTextModel(stored_vision, stored_text, PoolingConfig(**payload["pooling"]))
    model.load_state_dict(payload["state_dict"])
    return model
