"""Conditioning encoders: mask embedder, per-class style encoder, identity
projection, and token assembly.

The token matrix handed to every cross-attention layer has C+1 rows: rows
0..C-1 are per-class style codes in class order, row C is the projected
identity embedding. Assembly is pure row-wise concatenation, so swapping one
input touches exactly one row.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, ValidationError

IDENTITY_ROW = -1  # token layout: styles 0..C-1, identity last

MASK_GRID = 16  # descriptor is 16 x 16 x C regardless of input resolution
_MASK_POOL = 32  # mask channels are pooled to 32 x 32 before the MLP


class MaskEmbedder(nn.Module):
    """Two-layer MLP per mask channel, reshaped to a 16x16 plane per class."""

    def __init__(self, num_classes: int, hidden: int = 256):
        super().__init__()
        self.num_classes = num_classes
        self.fc1 = nn.Linear(_MASK_POOL * _MASK_POOL, hidden)
        self.fc2 = nn.Linear(hidden, MASK_GRID * MASK_GRID)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:
        if mask.dim() != 4 or mask.shape[1] != self.num_classes:
            raise ShapeError(
                f"expected (B, {self.num_classes}, H, W) mask channels, got {tuple(mask.shape)}"
            )
        sums = mask.sum(dim=1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6) or mask.min() < 0:
            raise ValidationError("mask channels must form a per-pixel partition")
        B, C, H, W = mask.shape
        x = F.adaptive_avg_pool2d(mask, _MASK_POOL).reshape(B * C, -1)
        x = self.fc2(F.relu(self.fc1(x)))
        return x.reshape(B, C, MASK_GRID, MASK_GRID)


class StyleEncoder(nn.Module):
    """Per-class style codes via masked trunk passes.

    Each class runs through the trunk as (image * mask_c, mask_c), so code c is
    a function of region c's pixels only; edits outside the region cannot leak
    in through conv receptive fields or normalization statistics. Regions
    absent from the mask fall back to a learned per-class null code.
    """

    def __init__(self, num_classes: int, style_dim: int = 64, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.style_dim = style_dim
        out_ch = width + 8
        self.conv_in = nn.Sequential(
            nn.Conv2d(4, width, 3, stride=2, padding=1),
            nn.GroupNorm(4, width),
            nn.ReLU(inplace=True),
        )
        self.grouped = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1, groups=4),
            nn.GroupNorm(4, width),
        )
        self.conv_out = nn.Sequential(
            nn.Conv2d(width, out_ch, 3, stride=2, padding=1),
            nn.GroupNorm(4, out_ch),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(out_ch, style_dim)
        self.null_codes = nn.Parameter(torch.randn(num_classes, style_dim) * 0.02)

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """-> (codes (B, C, style_dim), present (B, C) bool)."""
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(image.shape)}")
        if mask.shape[0] != image.shape[0] or mask.shape[2:] != image.shape[2:]:
            raise ShapeError(
                f"image {tuple(image.shape)} and mask {tuple(mask.shape)} resolutions differ"
            )
        B, C, H, W = mask.shape
        if H % 4 or W % 4:
            raise ShapeError(f"style encoder needs resolution divisible by 4, got {H}x{W}")

        masked = image.unsqueeze(1) * mask.unsqueeze(2)  # (B, C, 3, H, W)
        x = torch.cat([masked, mask.unsqueeze(2)], dim=2).reshape(B * C, 4, H, W)
        x = self.conv_in(x)
        x = F.relu(x + self.grouped(x))  # skip connection
        feats = self.conv_out(x)  # (B*C, out_ch, H/4, W/4)

        weights = F.avg_pool2d(mask.reshape(B * C, 1, H, W), 4)
        denom = weights.sum(dim=(2, 3)).clamp_min(1e-8)
        pooled = (feats * weights).sum(dim=(2, 3)) / denom
        codes = self.head(pooled).reshape(B, C, self.style_dim)

        present = mask.sum(dim=(2, 3)) > 0
        codes = torch.where(present.unsqueeze(-1), codes, self.null_codes.expand(B, -1, -1))
        return codes, present


class IdentityProjection(nn.Module):
    """Learned affine map from the FR embedding space to the style dimension."""

    def __init__(self, id_dim: int = 128, style_dim: int = 64):
        super().__init__()
        self.id_dim = id_dim
        self.proj = nn.Linear(id_dim, style_dim)

    def forward(self, id_emb: torch.Tensor) -> torch.Tensor:
        if id_emb.shape[-1] != self.id_dim:
            raise ShapeError(
                f"identity embedding dim {id_emb.shape[-1]} != expected {self.id_dim}"
            )
        return self.proj(id_emb)


def assemble_tokens(styles: torch.Tensor, id_token: torch.Tensor) -> torch.Tensor:
    """Concatenate (B, C, d) style codes and a (B, d) identity token into
    (B, C+1, d) conditioning tokens. No normalization is applied."""
    if styles.shape[-1] != id_token.shape[-1]:
        raise ShapeError(
            f"style dim {styles.shape[-1]} != identity token dim {id_token.shape[-1]}"
        )
    return torch.cat([styles, id_token.unsqueeze(-2)], dim=-2)
