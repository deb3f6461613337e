"""Alternating adversarial training loop.

One discriminator step and one generator step per batch; every generator step
reconstructs a record from its own mask descriptor, style codes, and identity
embedding. The conditioning FR stays frozen throughout (its embeddings are
precomputed once). Checkpoints go out every checkpoint_every iterations and a
line-delimited metrics log is appended every log_every iterations.
"""

from __future__ import annotations

import json
import statistics
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_hash, loss_weights, model_config
from .data import FaceRecord, one_hot
from .errors import ConfigurationError, TrainingDivergenceError, ValidationError
from .generator import Discriminator
from .identity import FREmbedder
from .losses import (
    LossParts,
    adversarial_losses,
    feature_matching_loss,
    identity_loss_from_target,
    perceptual_loss,
    total_objective,
)
from .pipeline import SynthesisModel, build_discriminator, save_checkpoint

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_WINDOW = 500
DIVERGENCE_PATIENCE = 500


class DivergenceGuard:
    """Aborts when L_adv_D exceeds 10x its trailing median for 500 consecutive
    iterations. Violating values stay out of the window, so the median keeps
    tracking the healthy baseline instead of absorbing the excursion."""

    def __init__(
        self,
        factor: float = DIVERGENCE_FACTOR,
        window: int = DIVERGENCE_WINDOW,
        patience: int = DIVERGENCE_PATIENCE,
    ):
        self.factor = factor
        self.patience = patience
        self.history: deque[float] = deque(maxlen=window)
        self.streak = 0

    def update(self, value: float, iteration: int):
        if len(self.history) == self.history.maxlen:
            median = statistics.median(self.history)
            if median > 0 and value > self.factor * median:
                self.streak += 1
                if self.streak >= self.patience:
                    raise TrainingDivergenceError(
                        f"L_adv_D {value:.4f} exceeded {self.factor}x its trailing median "
                        f"{median:.4f} for {self.patience} consecutive iterations "
                        f"(at iteration {iteration})"
                    )
                return
            self.streak = 0
        self.history.append(value)


def records_to_tensors(records: list[FaceRecord], num_classes: int) -> tuple[torch.Tensor, torch.Tensor]:
    """-> (images (N, 3, H, W), one-hot masks (N, C, H, W)), both float32."""
    images = torch.from_numpy(np.stack([r.image for r in records]).transpose(0, 3, 1, 2).copy())
    masks = torch.from_numpy(np.stack([one_hot(r.mask, num_classes).channels for r in records]))
    return images, masks


@dataclass
class TrainResult:
    model: SynthesisModel
    disc: Discriminator
    iteration: int
    checkpoint_paths: list[Path]
    metrics_path: Path


def train(records: list[FaceRecord], fr: FREmbedder, cfg: RunConfig, out_dir: str | Path) -> TrainResult:
    """Train the synthesis model on the given records with a frozen train-FR."""
    if not records:
        raise ValidationError("no training records")
    if any(p.requires_grad for p in fr.parameters()):
        raise ConfigurationError("the conditioning FR must be frozen before training")
    if fr.cfg.resolution != cfg.resolution:
        raise ConfigurationError(
            f"FR resolution {fr.cfg.resolution} != training resolution {cfg.resolution}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.num_threads:
        torch.set_num_threads(cfg.num_threads)

    torch.manual_seed(cfg.seed)
    model = SynthesisModel(model_config(cfg))
    disc = build_discriminator(model.cfg)
    weights = loss_weights(cfg)
    run_hash = config_hash(cfg)

    images, masks = records_to_tensors(records, cfg.num_classes)
    with torch.no_grad():
        id_embs = torch.cat(
            [fr.embed_t(images[i : i + 64]) for i in range(0, len(records), 64)]
        )

    opt_g = torch.optim.Adam(model.parameters(), lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.beta1, cfg.beta2))
    sampler = torch.Generator().manual_seed(cfg.seed + 1)

    metrics_path = out_dir / "metrics.jsonl"
    metrics_file = open(metrics_path, "w")
    checkpoint_paths: list[Path] = []
    guard = DivergenceGuard()
    n = len(records)

    def checkpoint(iteration: int) -> Path:
        path = out_dir / f"checkpoint_{iteration:06d}.pt"
        save_checkpoint(
            path,
            model,
            disc,
            opt_g,
            opt_d,
            iteration=iteration,
            seed=cfg.seed,
            config_hash=run_hash,
            sampler_state=sampler.get_state(),
        )
        checkpoint_paths.append(path)
        return path

    try:
        for iteration in range(1, cfg.iterations + 1):
            idx = torch.randint(n, (cfg.batch_size,), generator=sampler)
            x, m, e = images[idx], masks[idx], id_embs[idx]

            # discriminator step on detached fakes
            with torch.no_grad():
                fake = model.reconstruct(x, m, e).image
            d_real = disc(x, m)
            d_fake = disc(fake, m)
            _, d_loss = adversarial_losses(d_real, d_fake)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            # generator step
            fake = model.reconstruct(x, m, e).image
            d_fake = disc(fake, m)
            with torch.no_grad():
                d_real = disc(x, m)
            adv_g, _ = adversarial_losses(d_real, d_fake)
            fm = feature_matching_loss(d_real, d_fake)
            prc = perceptual_loss(fake, x, fr.trunk_features)
            if weights.lambda_id > 0:
                lid = identity_loss_from_target(fake, e, fr)
            else:
                with torch.no_grad():
                    lid = identity_loss_from_target(fake, e, fr)
            g_loss = total_objective(LossParts(adv_g=adv_g, fm=fm, prc=prc, id=lid), weights)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            d_val = d_loss.item()
            guard.update(d_val, iteration)

            if iteration % cfg.log_every == 0 or iteration == 1:
                metrics_file.write(
                    json.dumps(
                        {
                            "iteration": iteration,
                            "L_adv_G": adv_g.item(),
                            "L_adv_D": d_val,
                            "L_FM": fm.item(),
                            "L_prc": prc.item(),
                            "L_id": lid.item(),
                        }
                    )
                    + "\n"
                )
                metrics_file.flush()
            if iteration % cfg.checkpoint_every == 0:
                checkpoint(iteration)
    finally:
        metrics_file.close()

    if cfg.iterations % cfg.checkpoint_every:
        checkpoint(cfg.iterations)
    model.eval()
    disc.eval()
    return TrainResult(
        model=model,
        disc=disc,
        iteration=cfg.iterations,
        checkpoint_paths=checkpoint_paths,
        metrics_path=metrics_path,
    )
