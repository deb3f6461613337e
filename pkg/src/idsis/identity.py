"""Face-recognition embedders.

Two independently trained instances play the roles of the conditioning
recognizer (train-FR, used for identity tokens and the identity loss) and the
evaluation recognizer (eval-FR, used only for scoring). Their configs must
differ in seed and at least one architectural field.

An embedder is a small conv classifier over identity labels; the embedding is
the L2-normalized penultimate activation. After training it is frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FaceRecord
from .errors import (
    ConfigurationError,
    QualityGateError,
    ShapeError,
    StateError,
    ValidationError,
)

ROLES = ("train", "eval")


@dataclass(frozen=True)
class FREmbedderConfig:
    width: int = 16
    depth: int = 3
    seed: int = 101
    identity_count: int = 0  # filled from the records at training time when 0
    epochs: int = 30
    embed_dim: int = 128
    resolution: int = 64
    lr: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if self.width <= 0 or self.width % 8:
            raise ConfigurationError(f"width must be a positive multiple of 8, got {self.width}")
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.resolution < 8:
            raise ConfigurationError(f"resolution must be >= 8, got {self.resolution}")

    def architectural_fields(self) -> dict:
        return {"width": self.width, "depth": self.depth, "embed_dim": self.embed_dim}


def ensure_configs_independent(a: FREmbedderConfig, b: FREmbedderConfig):
    """train-FR and eval-FR must differ in seed and >= 1 architectural field."""
    if a.seed == b.seed:
        raise ConfigurationError("train-FR and eval-FR configs must use different seeds")
    if a.architectural_fields() == b.architectural_fields():
        raise ConfigurationError(
            "train-FR and eval-FR configs must differ in at least one "
            "architectural field (width, depth, embed_dim)"
        )


@dataclass
class IdentityEmbedding:
    vector: np.ndarray  # unit-norm, length embed_dim
    source_tag: str  # "train-FR" | "eval-FR"


class FREmbedder(nn.Module):
    """Conv trunk -> pooled features -> linear embedding -> identity logits."""

    def __init__(self, cfg: FREmbedderConfig, role: str):
        super().__init__()
        if role not in ROLES:
            raise ConfigurationError(f"role must be one of {ROLES}, got {role!r}")
        if cfg.identity_count < 2:
            raise ConfigurationError("need at least 2 identities")
        self.cfg = cfg
        self.role = role
        self.source_tag = f"{role}-FR"
        self.training_accuracy: float | None = None
        self._label_map: dict[int, int] | None = None

        # norm-free trunk: spatial normalization would discard the flat color
        # statistics that carry most of the identity signal
        chans = [min(cfg.width * 2**i, 128) for i in range(cfg.depth)]
        blocks = []
        in_ch = 3
        for ch in chans:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, ch, 3, stride=2, padding=1),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.fc_embed = nn.Linear(in_ch, cfg.embed_dim)
        self.classifier = nn.Linear(cfg.embed_dim, cfg.identity_count)

    def trunk_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk_features(x)[-1].mean(dim=(2, 3))

    def _check_input(self, x: torch.Tensor):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {tuple(x.shape)}")
        if x.shape[2] != self.cfg.resolution or x.shape[3] != self.cfg.resolution:
            raise ShapeError(
                f"embedder expects resolution {self.cfg.resolution}, got {tuple(x.shape[2:])}"
            )

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.fc_embed(self.pooled(x))

    def embed_t(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable embedding of a (B, 3, H, W) batch in [-1, 1]:
        the L2-normalized penultimate activation."""
        return F.normalize(self.penultimate(x), dim=1, eps=1e-8)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.penultimate(x))


def _records_to_tensors(records: list[FaceRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(
        np.stack([r.image for r in records]).transpose(0, 3, 1, 2).copy()
    )
    labels = torch.tensor([r.identity_id for r in records], dtype=torch.long)
    return images, labels


def train_fr(records: list[FaceRecord], cfg: FREmbedderConfig, role: str = "train") -> FREmbedder:
    """Train a frozen FR embedder on labeled records (closed-set classifier).

    Raises QualityGateError if top-1 training accuracy ends below 0.9; the toy
    data is separable by construction, so a miss means a broken setup.
    """
    if not records:
        raise ValidationError("no records to train on")
    ids = sorted({r.identity_id for r in records})
    if len(ids) < 2:
        raise ValidationError("need records from at least 2 identities")
    label_map = {identity: i for i, identity in enumerate(ids)}
    if cfg.identity_count and cfg.identity_count != len(ids):
        raise ConfigurationError(
            f"config identity_count {cfg.identity_count} != identities in records {len(ids)}"
        )
    cfg = FREmbedderConfig(**{**asdict(cfg), "identity_count": len(ids)})

    torch.manual_seed(cfg.seed)
    model = FREmbedder(cfg, role)
    model._label_map = label_map

    images, raw_labels = _records_to_tensors(records)
    if images.shape[2] != cfg.resolution:
        raise ShapeError(
            f"records are {images.shape[2]}px but embedder config wants {cfg.resolution}px"
        )
    labels = torch.tensor([label_map[int(l)] for l in raw_labels], dtype=torch.long)

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sampler = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(records)
    model.train()
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=sampler)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(model(images[idx]), labels[idx])
            loss.backward()
            opt.step()

    model.eval()
    with torch.no_grad():
        preds = []
        for start in range(0, n, 256):
            preds.append(model(images[start : start + 256]).argmax(dim=1))
        accuracy = (torch.cat(preds) == labels).float().mean().item()
    if accuracy < 0.9:
        raise QualityGateError(
            f"{role}-FR top-1 training accuracy {accuracy:.3f} < 0.9 after {cfg.epochs} epochs"
        )
    model.training_accuracy = accuracy
    model.requires_grad_(False)
    return model


def embed(model: FREmbedder, image: np.ndarray) -> IdentityEmbedding:
    """Embed one (H, W, 3) image in [-1, 1] into a unit-norm identity vector."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    x = torch.from_numpy(arr.transpose(2, 0, 1).copy()).unsqueeze(0)
    with torch.no_grad():
        vec = model.embed_t(x)[0].numpy()
    return IdentityEmbedding(vector=vec, source_tag=model.source_tag)


def embed_batch(model: FREmbedder, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model.embed_t(images)


@dataclass
class VerifyResult:
    accept: bool
    score: float


def verify_pair(model: FREmbedder, x_a: np.ndarray, x_b: np.ndarray, tau: float) -> VerifyResult:
    """Accept iff cosine(embeddings) > tau (strict)."""
    if not -1.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [-1, 1], got {tau}")
    ea = embed(model, x_a).vector
    eb = embed(model, x_b).vector
    score = float(np.dot(ea, eb))
    return VerifyResult(accept=score > tau, score=score)


def save_fr(model: FREmbedder, path: str | Path):
    payload = {
        "manifest": {
            "role": model.role,
            "config": asdict(model.cfg),
            "training_accuracy": model.training_accuracy,
            "label_map": model._label_map,
        },
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_fr(path: str | Path) -> FREmbedder:
    path = Path(path)
    if not path.exists():
        raise StateError(f"FR checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    manifest = payload["manifest"]
    cfg = FREmbedderConfig(**manifest["config"])
    model = FREmbedder(cfg, manifest["role"])
    model.load_state_dict(payload["state_dict"])
    model.training_accuracy = manifest["training_accuracy"]
    model._label_map = manifest["label_map"]
    model.eval()
    model.requires_grad_(False)
    return model
