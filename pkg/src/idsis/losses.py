"""Training objective: identity preservation, hinge adversarial, feature
matching, perceptual, and the weighted total."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError, ShapeError
from .generator import ScaleOutput
from .identity import FREmbedder


@dataclass(frozen=True)
class LossWeights:
    lambda_fm: float = 10.0
    lambda_prc: float = 10.0
    lambda_id: float = 10.0

    def __post_init__(self):
        for name in ("lambda_fm", "lambda_prc", "lambda_id"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")


def identity_loss(
    generated: torch.Tensor, reference: torch.Tensor, fr: FREmbedder
) -> torch.Tensor:
    """1 - cos(fr(generated), fr(reference)), averaged over the batch.

    Range [0, 2]; differentiable w.r.t. the generated image; the reference
    embedding is treated as a constant target.
    """
    return identity_loss_from_target(generated, fr.embed_t(reference), fr)


def identity_loss_from_target(
    generated: torch.Tensor, target_emb: torch.Tensor, fr: FREmbedder
) -> torch.Tensor:
    """identity_loss against precomputed unit-norm target embeddings."""
    emb_gen = fr.embed_t(generated)
    return (1.0 - (emb_gen * target_emb.detach()).sum(dim=1)).mean()


def adversarial_losses(
    real_outputs: list[ScaleOutput], fake_outputs: list[ScaleOutput]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Hinge formulation, averaged over scales and patches.

    -> (L_adv_G from the fake logits, L_adv_D from both). The two terms use
    separate discriminator passes during training (fake detached for D).
    """
    g_terms = [-out.logits.mean() for out in fake_outputs]
    d_terms = [
        F.relu(1.0 - real.logits).mean() + F.relu(1.0 + fake.logits).mean()
        for real, fake in zip(real_outputs, fake_outputs)
    ]
    return torch.stack(g_terms).mean(), torch.stack(d_terms).mean()


def feature_matching_loss(
    real_outputs: list[ScaleOutput], fake_outputs: list[ScaleOutput]
) -> torch.Tensor:
    """Mean absolute difference of discriminator features, averaged over all
    layers and scales. Real-side features are detached."""
    terms = []
    for real, fake in zip(real_outputs, fake_outputs):
        if len(real.features) != len(fake.features):
            raise ShapeError("real and fake feature lists differ in length")
        for rf, ff in zip(real.features, fake.features):
            if rf.shape != ff.shape:
                raise ShapeError(f"feature shapes differ: {tuple(rf.shape)} vs {tuple(ff.shape)}")
            terms.append((ff - rf.detach()).abs().mean())
    return torch.stack(terms).mean()


def perceptual_loss(generated: torch.Tensor, reference: torch.Tensor, feat_net) -> torch.Tensor:
    """Mean absolute feature difference over the layers of a frozen feature
    extractor (default choice downstream: the train-FR conv trunk)."""
    gen_feats = feat_net(generated)
    ref_feats = feat_net(reference)
    terms = [
        (gf - rf.detach()).abs().mean() for gf, rf in zip(gen_feats, ref_feats)
    ]
    return torch.stack(terms).mean()


@dataclass
class LossParts:
    adv_g: torch.Tensor
    fm: torch.Tensor
    prc: torch.Tensor
    id: torch.Tensor


def total_objective(parts: LossParts, weights: LossWeights) -> torch.Tensor:
    """L_adv_G + lambda_FM * L_FM + lambda_prc * L_prc + lambda_id * L_id."""
    for name, value in (
        ("adv_g", parts.adv_g),
        ("fm", parts.fm),
        ("prc", parts.prc),
        ("id", parts.id),
    ):
        v = value if torch.is_tensor(value) else torch.as_tensor(value)
        if not torch.isfinite(v).all():
            raise NumericError(f"loss part {name!r} is not finite: {value}")
    return (
        parts.adv_g
        + weights.lambda_fm * parts.fm
        + weights.lambda_prc * parts.prc
        + weights.lambda_id * parts.id
    )
