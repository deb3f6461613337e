"""Synthesis model bundle (mask embedder + style encoder + identity projection
+ generator) and single-file checkpointing with named sub-scopes."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .data import CLASS_NAMES
from .encoders import IdentityProjection, MaskEmbedder, StyleEncoder, assemble_tokens
from .errors import ConfigurationError, StateError
from .generator import (
    BASE_GRID,
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    GeneratorOutput,
)

_DEFAULT_STAGE_DIMS = (64, 32, 16, 8)


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    num_classes: int = 6
    style_dim: int = 64
    id_dim: int = 128
    stage_dims: tuple[int, ...] | None = None
    head_count: int = 1
    self_attention: bool = False
    style_width: int = 16
    disc_width: int = 24

    def __post_init__(self):
        stages = math.log2(self.resolution / BASE_GRID) + 1
        if stages != int(stages) or stages < 1:
            raise ConfigurationError(
                f"resolution must be {BASE_GRID} * 2^k, got {self.resolution}"
            )

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.resolution / BASE_GRID)) + 1

    @property
    def resolved_stage_dims(self) -> tuple[int, ...]:
        if self.stage_dims is not None:
            return tuple(self.stage_dims)
        if self.num_stages > len(_DEFAULT_STAGE_DIMS):
            raise ConfigurationError(
                f"no default stage dims for resolution {self.resolution}; set stage_dims"
            )
        return _DEFAULT_STAGE_DIMS[: self.num_stages]


class SynthesisModel(nn.Module):
    """End-to-end generator side: encoders plus cross-attention generator."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.em = MaskEmbedder(cfg.num_classes)
        self.es = StyleEncoder(cfg.num_classes, cfg.style_dim, cfg.style_width)
        self.proj = IdentityProjection(cfg.id_dim, cfg.style_dim)
        self.gen = Generator(
            GeneratorConfig(
                num_classes=cfg.num_classes,
                style_dim=cfg.style_dim,
                out_resolution=cfg.resolution,
                stage_dims=cfg.resolved_stage_dims,
                head_count=cfg.head_count,
                self_attention=cfg.self_attention,
            )
        )

    def style_codes(self, image: torch.Tensor, mask: torch.Tensor):
        return self.es(image, mask)

    def id_token(self, id_emb: torch.Tensor) -> torch.Tensor:
        return self.proj(id_emb)

    def tokens(self, image: torch.Tensor, mask: torch.Tensor, id_emb: torch.Tensor) -> torch.Tensor:
        styles, _ = self.es(image, mask)
        return assemble_tokens(styles, self.proj(id_emb))

    def generate(self, mask: torch.Tensor, tokens: torch.Tensor) -> GeneratorOutput:
        """mask: one-hot (B, C, H, W); tokens: (B, C+1, style_dim)."""
        return self.gen(self.em(mask), tokens)

    def reconstruct(self, image: torch.Tensor, mask: torch.Tensor, id_emb: torch.Tensor) -> GeneratorOutput:
        return self.generate(mask, self.tokens(image, mask, id_emb))

    forward = reconstruct


def build_discriminator(cfg: ModelConfig) -> Discriminator:
    return Discriminator(DiscriminatorConfig(num_classes=cfg.num_classes, base_width=cfg.disc_width))


_MODEL_SCOPES = ("em", "es", "proj", "gen")


def save_checkpoint(
    path: str | Path,
    model: SynthesisModel,
    disc: Discriminator | None = None,
    opt_g: torch.optim.Optimizer | None = None,
    opt_d: torch.optim.Optimizer | None = None,
    iteration: int = 0,
    seed: int | None = None,
    config_hash: str | None = None,
    sampler_state: torch.Tensor | None = None,
):
    manifest = {
        "model_config": asdict(model.cfg),
        "class_names": list(CLASS_NAMES) if model.cfg.num_classes == len(CLASS_NAMES) else None,
        "iteration": iteration,
        "seed": seed,
        "config_hash": config_hash,
    }
    payload = {"manifest": manifest}
    for scope in _MODEL_SCOPES:
        payload[scope] = getattr(model, scope).state_dict()
    payload["disc"] = disc.state_dict() if disc is not None else None
    payload["opt_g"] = opt_g.state_dict() if opt_g is not None else None
    payload["opt_d"] = opt_d.state_dict() if opt_d is not None else None
    payload["rng"] = {
        "torch": torch.get_rng_state(),
        "sampler": sampler_state,
    }
    torch.save(payload, path)


@dataclass
class CheckpointBundle:
    model: SynthesisModel
    disc: Discriminator | None
    manifest: dict
    payload: dict


def load_checkpoint(path: str | Path, with_disc: bool = False) -> CheckpointBundle:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    missing = [s for s in _MODEL_SCOPES if s not in payload]
    if "manifest" not in payload or missing:
        raise StateError(f"checkpoint {path} is missing scopes: {missing or ['manifest']}")
    manifest = payload["manifest"]
    cfg = ModelConfig(**{
        **manifest["model_config"],
        "stage_dims": tuple(manifest["model_config"]["stage_dims"])
        if manifest["model_config"]["stage_dims"] is not None
        else None,
    })
    model = SynthesisModel(cfg)
    for scope in _MODEL_SCOPES:
        getattr(model, scope).load_state_dict(payload[scope])
    model.eval()
    disc = None
    if with_disc:
        if payload.get("disc") is None:
            raise StateError(f"checkpoint {path} carries no discriminator weights")
        disc = build_discriminator(cfg)
        disc.load_state_dict(payload["disc"])
    return CheckpointBundle(model=model, disc=disc, manifest=manifest, payload=payload)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def module_weight_hash(module: nn.Module) -> str:
    """Content hash of a module's parameters/buffers (order-stable)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
