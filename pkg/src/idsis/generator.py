"""Cross-attention generator and patch discriminator.

The generator maps a 16x16xC mask descriptor to an RGB image. Each resolution
stage applies cross-attention (queries from spatial features, keys/values from
the C+1 conditioning tokens), then nearest-neighbor upsampling + conv. The
attention matrix of every block is retained for inspection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ShapeError, ValidationError

BASE_GRID = 16


def cross_attention(
    features: torch.Tensor,
    tokens: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    w_out: torch.Tensor,
    num_heads: int = 1,
) -> tuple[torch.Tensor, torch.Tensor]:
    """softmax(Q K^T / sqrt(d)) V, added residually to the features.

    features: (N, F) or (B, N, F); tokens: (T, d_s) or (B, T, d_s).
    Weights are plain (in, out) matrices, no biases. Returns the updated
    features and the attention matrix with a leading head axis (B, h, N, T).
    """
    squeeze = features.dim() == 2
    if squeeze:
        features = features.unsqueeze(0)
        tokens = tokens.unsqueeze(0)
    B, N, feat_dim = features.shape
    T = tokens.shape[1]
    d_k = w_q.shape[1]
    if w_q.shape[0] != feat_dim or w_k.shape[0] != tokens.shape[2] or w_out.shape != (d_k, feat_dim):
        raise ShapeError(
            f"weight shapes {tuple(w_q.shape)}/{tuple(w_k.shape)}/{tuple(w_out.shape)} do not "
            f"match features {tuple(features.shape)} and tokens {tuple(tokens.shape)}"
        )
    if d_k % num_heads:
        raise ShapeError(f"key dim {d_k} not divisible by head count {num_heads}")
    d_h = d_k // num_heads

    q = (features @ w_q).reshape(B, N, num_heads, d_h).transpose(1, 2)
    k = (tokens @ w_k).reshape(B, T, num_heads, d_h).transpose(1, 2)
    v = (tokens @ w_v).reshape(B, T, num_heads, d_h).transpose(1, 2)
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_h), dim=-1)  # (B, h, N, T)
    out = (attn @ v).transpose(1, 2).reshape(B, N, d_k) @ w_out
    result = features + out
    if squeeze:
        result = result.squeeze(0)
    return result, attn


@dataclass(frozen=True)
class CrossAttnBlockConfig:
    feature_dim: int
    head_count: int = 1
    key_dim: int = 64

    def __post_init__(self):
        if self.key_dim <= 0:
            raise ConfigurationError(f"key_dim must be > 0, got {self.key_dim}")
        if self.feature_dim % self.head_count:
            raise ConfigurationError(
                f"feature_dim {self.feature_dim} not divisible by head_count {self.head_count}"
            )
        if self.key_dim % self.head_count:
            raise ConfigurationError(
                f"key_dim {self.key_dim} not divisible by head_count {self.head_count}"
            )


class CrossAttentionBlock(nn.Module):
    def __init__(self, cfg: CrossAttnBlockConfig, token_dim: int):
        super().__init__()
        self.cfg = cfg
        F_, d_k = cfg.feature_dim, cfg.key_dim
        self.w_q = nn.Parameter(torch.empty(F_, d_k))
        self.w_k = nn.Parameter(torch.empty(token_dim, d_k))
        self.w_v = nn.Parameter(torch.empty(token_dim, d_k))
        self.w_out = nn.Parameter(torch.empty(d_k, F_))
        for w in (self.w_q, self.w_k, self.w_v, self.w_out):
            nn.init.xavier_uniform_(w)

    def forward(self, feat_map: torch.Tensor, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """feat_map (B, F, H, W), tokens (B, T, d_s) -> same-shape map, attention."""
        B, C, H, W = feat_map.shape
        flat = feat_map.flatten(2).transpose(1, 2)  # (B, HW, F)
        out, attn = cross_attention(
            flat, tokens, self.w_q, self.w_k, self.w_v, self.w_out, self.cfg.head_count
        )
        return out.transpose(1, 2).reshape(B, C, H, W), attn.mean(dim=1)


class SelfAttentionBlock(nn.Module):
    """Optional parity block: same mechanism with keys/values from the features."""

    def __init__(self, cfg: CrossAttnBlockConfig):
        super().__init__()
        self.cfg = cfg
        F_, d_k = cfg.feature_dim, cfg.key_dim
        self.w_q = nn.Parameter(torch.empty(F_, d_k))
        self.w_k = nn.Parameter(torch.empty(F_, d_k))
        self.w_v = nn.Parameter(torch.empty(F_, d_k))
        self.w_out = nn.Parameter(torch.empty(d_k, F_))
        for w in (self.w_q, self.w_k, self.w_v, self.w_out):
            nn.init.xavier_uniform_(w)

    def forward(self, feat_map: torch.Tensor) -> torch.Tensor:
        B, C, H, W = feat_map.shape
        flat = feat_map.flatten(2).transpose(1, 2)
        out, _ = cross_attention(
            flat, flat, self.w_q, self.w_k, self.w_v, self.w_out, self.cfg.head_count
        )
        return out.transpose(1, 2).reshape(B, C, H, W)


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 6
    style_dim: int = 64
    out_resolution: int = 64
    stage_dims: tuple[int, ...] = (64, 32, 16)
    head_count: int = 1
    key_dim: int | None = None  # defaults to style_dim
    self_attention: bool = False  # parity experiments only; costly at high res

    def __post_init__(self):
        stages = len(self.stage_dims)
        if BASE_GRID * 2 ** (stages - 1) != self.out_resolution:
            raise ConfigurationError(
                f"out_resolution {self.out_resolution} needs "
                f"{int(math.log2(self.out_resolution / BASE_GRID)) + 1} stage dims "
                f"(16 -> x2 per stage), got {stages}"
            )
        for dim in self.stage_dims:
            CrossAttnBlockConfig(dim, self.head_count, self.key_dim or self.style_dim)

    @property
    def resolved_key_dim(self) -> int:
        return self.key_dim or self.style_dim


@dataclass
class GeneratorOutput:
    image: torch.Tensor  # (B, 3, H, W) in [-1, 1]
    attention: list[torch.Tensor] = field(default_factory=list)  # per block (B, H_i*W_i, C+1)

    @property
    def block_grids(self) -> list[int]:
        return [int(math.isqrt(a.shape[1])) for a in self.attention]


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.stage_dims
        token_dim = cfg.style_dim
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.num_classes, dims[0], 3, padding=1),
            nn.GroupNorm(4, dims[0]),
            nn.ReLU(inplace=True),
        )
        self.attn_blocks = nn.ModuleList(
            CrossAttentionBlock(
                CrossAttnBlockConfig(dim, cfg.head_count, cfg.resolved_key_dim), token_dim
            )
            for dim in dims
        )
        self.self_blocks = nn.ModuleList(
            SelfAttentionBlock(CrossAttnBlockConfig(dim, cfg.head_count, cfg.resolved_key_dim))
            for dim in dims
        ) if cfg.self_attention else None
        self.up_convs = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(dims[i], dims[i + 1], 3, padding=1),
                nn.GroupNorm(4, dims[i + 1]),
                nn.ReLU(inplace=True),
            )
            for i in range(len(dims) - 1)
        )
        self.tail = nn.Sequential(
            nn.Conv2d(dims[-1], dims[-1], 3, padding=1),
            nn.GroupNorm(4, dims[-1]),
            nn.ReLU(inplace=True),
        )
        self.to_rgb = nn.Conv2d(dims[-1], 3, 3, padding=1)

    def forward(self, mask_descriptor: torch.Tensor, tokens: torch.Tensor) -> GeneratorOutput:
        B, C, H, W = mask_descriptor.shape
        if H != BASE_GRID or W != BASE_GRID or C != self.cfg.num_classes:
            raise ShapeError(
                f"mask descriptor must be (B, {self.cfg.num_classes}, {BASE_GRID}, {BASE_GRID}), "
                f"got {tuple(mask_descriptor.shape)}"
            )
        if tokens.shape[-2] != self.cfg.num_classes + 1:
            raise ShapeError(
                f"expected {self.cfg.num_classes + 1} conditioning tokens, got {tokens.shape[-2]}"
            )
        x = self.stem(mask_descriptor)
        attention = []
        for i, block in enumerate(self.attn_blocks):
            if self.self_blocks is not None:
                x = self.self_blocks[i](x)
            x, attn = block(x, tokens)
            attention.append(attn)
            if i < len(self.up_convs):
                x = self.up_convs[i](F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.tail(x)
        return GeneratorOutput(image=torch.tanh(self.to_rgb(x)), attention=attention)


def attention_heatmaps(
    output: GeneratorOutput, token_index: int, block_index: int
) -> torch.Tensor:
    """Column token_index of one block's attention, reshaped to its grid and
    bilinearly upsampled to the output resolution. -> (B, H, W), values >= 0."""
    if not 0 <= block_index < len(output.attention):
        raise ValidationError(
            f"block_index {block_index} out of range [0, {len(output.attention)})"
        )
    attn = output.attention[block_index]
    if not 0 <= token_index < attn.shape[-1]:
        raise ValidationError(
            f"token_index {token_index} out of range [0, {attn.shape[-1]})"
        )
    grid = int(math.isqrt(attn.shape[1]))
    maps = attn[:, :, token_index].reshape(-1, 1, grid, grid)
    out_res = output.image.shape[-1]
    return F.interpolate(maps, size=(out_res, out_res), mode="bilinear", align_corners=False)[:, 0]


@dataclass(frozen=True)
class DiscriminatorConfig:
    num_classes: int = 6
    base_width: int = 24
    n_layers: int = 3
    num_scales: int = 2


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        layers = []
        in_ch = 3 + cfg.num_classes
        ch = cfg.base_width
        for i in range(cfg.n_layers):
            block = [nn.Conv2d(in_ch, ch, 4, stride=2, padding=1)]
            if i > 0:
                block.append(nn.GroupNorm(4, ch))
            block.append(nn.LeakyReLU(0.2, inplace=True))
            layers.append(nn.Sequential(*block))
            in_ch, ch = ch, min(ch * 2, 256)
        self.layers = nn.ModuleList(layers)
        self.final = nn.Conv2d(in_ch, 1, 4, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return self.final(x), feats


@dataclass
class ScaleOutput:
    logits: torch.Tensor
    features: list[torch.Tensor]


class Discriminator(nn.Module):
    """Two-scale patch discriminator, conditioned by mask concatenation."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.scales = nn.ModuleList(PatchDiscriminator(cfg) for _ in range(cfg.num_scales))

    def forward(self, image: torch.Tensor, mask: torch.Tensor) -> list[ScaleOutput]:
        if image.shape[0] != mask.shape[0] or image.shape[2:] != mask.shape[2:]:
            raise ShapeError(
                f"image {tuple(image.shape)} and mask {tuple(mask.shape)} shapes differ"
            )
        x = torch.cat([image, mask], dim=1)
        outputs = []
        for i, net in enumerate(self.scales):
            if i > 0:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            logits, feats = net(x)
            outputs.append(ScaleOutput(logits=logits, features=feats))
        return outputs
