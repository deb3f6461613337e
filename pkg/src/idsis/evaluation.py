"""Evaluation protocol: reconstruction cosine suite, FAR-calibrated threshold,
impersonation attack success rate, Fréchet feature distance, perceptual
distance, and the style-swap sweep.

Generation is always conditioned with the train-FR (the embedder the model was
trained with); scoring uses whichever FR is passed in, normally the eval-FR.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import CLASS_NAMES, FaceRecord
from .encoders import assemble_tokens
from .errors import NumericError, ValidationError
from .identity import FREmbedder
from .pipeline import SynthesisModel
from .training import records_to_tensors

SWAP_LABELS = ("NoSwap", "Skin", "Eyes", "Eyebrows", "Mouth", "Hair", "FullSwap")


def _swap_class_indices(label: str) -> tuple[int, ...]:
    if label == "NoSwap":
        return ()
    if label == "FullSwap":
        return tuple(range(len(CLASS_NAMES)))
    name = label.lower()
    if name not in CLASS_NAMES:
        raise ValidationError(f"unknown swap class {label!r}; expected one of {SWAP_LABELS}")
    return (CLASS_NAMES.index(name),)


def _batched(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def embed_records(fr: FREmbedder, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fr.embed_t(images[a:b]) for a, b in _batched(len(images), batch_size)])


@dataclass
class CosineSuiteResult:
    mean: float
    per_record: list[float]


def cosine_suite(
    model: SynthesisModel,
    records: list[FaceRecord],
    fr: FREmbedder,
    fr_cond: FREmbedder,
    batch_size: int = 32,
) -> CosineSuiteResult:
    """Reconstruct every record with its own identity and return the mean
    cosine between original and reconstruction under the scoring FR."""
    if not records:
        raise ValidationError("cosine_suite needs at least one record")
    images, masks = records_to_tensors(records, model.cfg.num_classes)
    scores: list[float] = []
    with torch.no_grad():
        for a, b in _batched(len(records), batch_size):
            x, m = images[a:b], masks[a:b]
            recon = model.reconstruct(x, m, fr_cond.embed_t(x)).image
            cos = (fr.embed_t(recon) * fr.embed_t(x)).sum(dim=1)
            scores.extend(cos.tolist())
    return CosineSuiteResult(mean=float(np.mean(scores)), per_record=scores)


def threshold_from_scores(scores, far_target: float = 0.01) -> float:
    """Smallest impostor-score value tau such that the fraction of scores
    strictly greater than tau is <= far_target."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise ValidationError("scores must be a non-empty 1-d array")
    if not 0 < far_target < 1:
        raise ValidationError(f"far_target must lie in (0, 1), got {far_target}")
    minimum = int(np.ceil(1.0 / far_target))
    if scores.size < minimum:
        raise ValidationError(
            f"need at least {minimum} impostor scores for far_target {far_target}, "
            f"got {scores.size}"
        )
    ordered = np.sort(scores)
    n = ordered.size
    for tau in ordered:
        greater = n - np.searchsorted(ordered, tau, side="right")
        if greater / n <= far_target:
            return float(tau)
    return float(ordered[-1])


def sample_impostor_pairs(
    records: list[FaceRecord], count: int, seed: int = 0
) -> list[tuple[int, int]]:
    """Index pairs with distinct identities, deterministic for a fixed seed."""
    ids = np.array([r.identity_id for r in records])
    if len(set(ids.tolist())) < 2:
        raise ValidationError("need records from at least 2 identities")
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0x1D5)]))
    pairs = []
    while len(pairs) < count:
        a, b = rng.integers(0, len(records), size=2)
        if ids[a] != ids[b]:
            pairs.append((int(a), int(b)))
    return pairs


def calibrate_threshold(
    fr: FREmbedder,
    records: list[FaceRecord],
    impostor_pairs: list[tuple[int, int]],
    far_target: float = 0.01,
) -> float:
    """FAR-calibrated verification threshold from real impostor pairs."""
    images, _ = records_to_tensors(records, len(CLASS_NAMES))
    embs = embed_records(fr, images)
    scores = np.array(
        [float((embs[a] * embs[b]).sum()) for a, b in impostor_pairs], dtype=np.float64
    )
    return threshold_from_scores(scores, far_target)


@dataclass
class AttackPair:
    """One impersonation attempt: mask and styles from the attacker, identity
    from the target."""

    attacker_index: int
    target_index: int
    attacker_id: int
    target_id: int
    score_target: float | None = None  # cos vs target embedding (decision score)
    score_attacker: float | None = None  # cos vs attacker embedding (Eq. 5 as printed)
    generated: np.ndarray | None = None

    def __post_init__(self):
        if self.attacker_id == self.target_id:
            raise ValidationError(
                f"attacker and target must be distinct identities, both are {self.attacker_id}"
            )


def build_attack_pairs(records: list[FaceRecord], count: int, seed: int = 0) -> list[AttackPair]:
    ids = [r.identity_id for r in records]
    if len(set(ids)) < 2:
        raise ValidationError("need records from at least 2 identities")
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0xA77)]))
    pairs = []
    while len(pairs) < count:
        a, t = rng.integers(0, len(records), size=2)
        if ids[a] != ids[t]:
            pairs.append(
                AttackPair(
                    attacker_index=int(a),
                    target_index=int(t),
                    attacker_id=ids[a],
                    target_id=ids[t],
                )
            )
    return pairs


def _swap_generate(
    model: SynthesisModel,
    fr_cond: FREmbedder,
    images: torch.Tensor,
    masks: torch.Tensor,
    pairs: list[AttackPair],
    swap_classes: tuple[int, ...],
    batch_size: int,
):
    """Generate, per pair, from the attacker's mask and styles (swap-set class
    styles taken from the target) with the target's identity embedding."""
    a_idx = torch.tensor([p.attacker_index for p in pairs])
    t_idx = torch.tensor([p.target_index for p in pairs])
    with torch.no_grad():
        for lo, hi in _batched(len(pairs), batch_size):
            xa, ma = images[a_idx[lo:hi]], masks[a_idx[lo:hi]]
            xt, mt = images[t_idx[lo:hi]], masks[t_idx[lo:hi]]
            styles, _ = model.style_codes(xa, ma)
            if swap_classes:
                target_styles, _ = model.style_codes(xt, mt)
                styles = styles.clone()
                styles[:, list(swap_classes)] = target_styles[:, list(swap_classes)]
            tokens = assemble_tokens(styles, model.id_token(fr_cond.embed_t(xt)))
            yield lo, hi, model.generate(ma, tokens).image


@dataclass
class ASRResult:
    asr: float
    tau: float
    pairs: list[AttackPair]


def attack_success_rate(
    model: SynthesisModel,
    records: list[FaceRecord],
    pairs: list[AttackPair],
    fr: FREmbedder,
    tau: float,
    fr_cond: FREmbedder,
    batch_size: int = 32,
    swap_classes: tuple[int, ...] = (),
    keep_images: bool = False,
) -> ASRResult:
    """Fraction of attack pairs accepted as the TARGET identity at threshold
    tau (strict >). The attacker-side score is logged per pair as well."""
    if not -1.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [-1, 1], got {tau}")
    if not pairs:
        raise ValidationError("attack_success_rate needs at least one pair")
    images, masks = records_to_tensors(records, model.cfg.num_classes)
    real_embs = embed_records(fr, images)
    successes = 0
    for lo, hi, generated in _swap_generate(
        model, fr_cond, images, masks, pairs, swap_classes, batch_size
    ):
        with torch.no_grad():
            gen_embs = fr.embed_t(generated)
        for j, pair in enumerate(pairs[lo:hi]):
            st = float((gen_embs[j] * real_embs[pair.target_index]).sum())
            sa = float((gen_embs[j] * real_embs[pair.attacker_index]).sum())
            pair.score_target = st
            pair.score_attacker = sa
            if keep_images:
                pair.generated = generated[j].numpy().transpose(1, 2, 0)
            successes += st > tau
    return ASRResult(asr=successes / len(pairs), tau=tau, pairs=pairs)


def frechet_from_moments(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 sqrt(S1 S2)), with the matrix square
    root taken on the symmetrized product and negative eigenvalues clipped."""
    mu1, mu2 = np.asarray(mu1, dtype=np.float64), np.asarray(mu2, dtype=np.float64)
    sigma1 = np.atleast_2d(np.asarray(sigma1, dtype=np.float64))
    sigma2 = np.atleast_2d(np.asarray(sigma2, dtype=np.float64))
    for name, arr in (("mu1", mu1), ("sigma1", sigma1), ("mu2", mu2), ("sigma2", sigma2)):
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in {name}")
    w1, v1 = np.linalg.eigh((sigma1 + sigma1.T) / 2)
    root1 = (v1 * np.sqrt(np.clip(w1, 0.0, None))) @ v1.T
    product = root1 @ sigma2 @ root1
    w = np.linalg.eigvalsh((product + product.T) / 2)
    covmean_trace = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * covmean_trace)


def frechet_from_features(real_features, fake_features) -> float:
    real = np.asarray(real_features, dtype=np.float64)
    fake = np.asarray(fake_features, dtype=np.float64)
    for name, arr in (("real", real), ("fake", fake)):
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValidationError(f"{name} features must be (N >= 2, D), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in {name} features")
    return frechet_from_moments(
        real.mean(axis=0),
        np.cov(real, rowvar=False),
        fake.mean(axis=0),
        np.cov(fake, rowvar=False),
    )


def fr_feature_extractor(fr: FREmbedder, batch_size: int = 64):
    """Pooled conv-trunk features of an FR embedder as a (N,H,W,3)->(N,D) map."""

    def extract(images: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2).copy())
        with torch.no_grad():
            return torch.cat(
                [fr.pooled(x[a:b]) for a, b in _batched(len(x), batch_size)]
            ).numpy()

    return extract


def frechet_feature_distance(real_images, fake_images, embedder) -> float:
    """Fréchet distance between embedded real and generated image sets.

    embedder: callable mapping (N, H, W, 3) images in [-1, 1] to (N, D)
    features (see fr_feature_extractor for the eval-FR default).
    """
    return frechet_from_features(embedder(real_images), embedder(fake_images))


def _normalized_features(feats: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return feats / torch.sqrt((feats**2).sum(dim=1, keepdim=True) + eps)


def perceptual_distance_batch(a: torch.Tensor, b: torch.Tensor, feat_net) -> torch.Tensor:
    """Per-sample layer-averaged squared difference of channel-normalized
    features. Symmetric; zero when the features coincide."""
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        feats_a = feat_net(a)
        feats_b = feat_net(b)
        dists = [
            ((_normalized_features(fa) - _normalized_features(fb)) ** 2).mean(dim=(1, 2, 3))
            for fa, fb in zip(feats_a, feats_b)
        ]
    return torch.stack(dists).mean(dim=0)


def perceptual_distance(image_a, image_b, feat_net) -> float:
    """Perceptual distance between two single images ((H, W, 3) numpy or
    (3, H, W) tensors)."""

    def to_tensor(img):
        if isinstance(img, np.ndarray):
            img = torch.from_numpy(img.astype(np.float32).transpose(2, 0, 1).copy())
        return img.unsqueeze(0) if img.dim() == 3 else img

    return float(perceptual_distance_batch(to_tensor(image_a), to_tensor(image_b), feat_net)[0])


@dataclass
class SweepResult:
    swap_set: str
    asr: float
    perceptual_distance: float


def style_swap_sweep(
    model: SynthesisModel,
    records: list[FaceRecord],
    pairs: list[AttackPair],
    fr: FREmbedder,
    tau: float,
    feat_net,
    fr_cond: FREmbedder,
    batch_size: int = 32,
    labels: tuple[str, ...] = SWAP_LABELS,
) -> list[SweepResult]:
    """For each swap set, run the identity swap with that set's styles also
    taken from the target; report ASR and mean perceptual distance against the
    attacker's own-identity reconstruction."""
    if not -1.0 <= tau <= 1.0:
        raise ValidationError(f"tau must lie in [-1, 1], got {tau}")
    images, masks = records_to_tensors(records, model.cfg.num_classes)
    real_embs = embed_records(fr, images)
    a_idx = torch.tensor([p.attacker_index for p in pairs])

    # own-identity reconstructions of the attackers: the perceptual baseline
    own_recons = []
    with torch.no_grad():
        for lo, hi in _batched(len(pairs), batch_size):
            xa, ma = images[a_idx[lo:hi]], masks[a_idx[lo:hi]]
            own_recons.append(model.reconstruct(xa, ma, fr_cond.embed_t(xa)).image)
    own_recons = torch.cat(own_recons)

    results = []
    for label in labels:
        swap_classes = _swap_class_indices(label)
        successes = 0
        dists = []
        for lo, hi, generated in _swap_generate(
            model, fr_cond, images, masks, pairs, swap_classes, batch_size
        ):
            with torch.no_grad():
                gen_embs = fr.embed_t(generated)
            for j, pair in enumerate(pairs[lo:hi]):
                score = float((gen_embs[j] * real_embs[pair.target_index]).sum())
                successes += score > tau
            dists.append(perceptual_distance_batch(generated, own_recons[lo:hi], feat_net))
        results.append(
            SweepResult(
                swap_set=label,
                asr=successes / len(pairs),
                perceptual_distance=float(torch.cat(dists).mean()),
            )
        )
    return results


def write_sweep_csv(path: str | Path, results: list[SweepResult]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["swap_set", "asr", "perceptual_distance"])
        for row in results:
            writer.writerow([row.swap_set, f"{row.asr:.6f}", f"{row.perceptual_distance:.8f}"])
