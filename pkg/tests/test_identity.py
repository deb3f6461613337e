import numpy as np
import pytest
import torch

from idsis.errors import ConfigurationError, QualityGateError, ShapeError, ValidationError
from idsis.identity import (
    FREmbedderConfig,
    embed,
    ensure_configs_independent,
    load_fr,
    save_fr,
    train_fr,
    verify_pair,
)
from tests.conftest import TINY_RES, make_records


def test_two_identities_perfect_accuracy():
    records = make_records(identity_count=2, variations=10)
    cfg = FREmbedderConfig(
        width=8, depth=2, seed=1, epochs=80, embed_dim=16, resolution=TINY_RES,
        batch_size=8, lr=5e-3,
    )
    fr = train_fr(records, cfg)
    assert fr.training_accuracy == 1.0


def test_embed_deterministic_and_unit_norm(tiny_fr, tiny_records):
    e1 = embed(tiny_fr, tiny_records[0].image)
    e2 = embed(tiny_fr, tiny_records[0].image)
    assert np.array_equal(e1.vector, e2.vector)
    assert e1.source_tag == "train-FR"
    for rec in tiny_records[:8]:
        v = embed(tiny_fr, rec.image).vector
        assert v.shape == (32,)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-5


def test_embed_wrong_resolution_raises(tiny_fr):
    with pytest.raises(ShapeError):
        embed(tiny_fr, np.zeros((16, 16, 3), dtype=np.float32))


def test_genuine_vs_impostor_separation(tiny_fr, tiny_records):
    ids = [r.identity_id for r in tiny_records]
    embs = [embed(tiny_fr, r.image).vector for r in tiny_records]
    genuine, impostor = [], []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            score = float(np.dot(embs[i], embs[j]))
            (genuine if ids[i] == ids[j] else impostor).append(score)
    assert np.mean(genuine) - np.mean(impostor) >= 0.2
    # two variations of one identity score above the mean impostor cosine
    assert np.dot(embs[0], embs[1]) > np.mean(impostor)


def test_verify_pair_self_accepts(tiny_fr, tiny_records):
    result = verify_pair(tiny_fr, tiny_records[0].image, tiny_records[0].image, 0.99)
    assert result.accept and result.score == pytest.approx(1.0, abs=1e-6)


def test_verify_pair_strict_inequality(tiny_fr, tiny_records):
    score = verify_pair(tiny_fr, tiny_records[0].image, tiny_records[1].image, 0.0).score
    at_tau = verify_pair(tiny_fr, tiny_records[0].image, tiny_records[1].image, score)
    assert not at_tau.accept  # score == tau rejects


def test_verify_pair_tau_validated(tiny_fr, tiny_records):
    with pytest.raises(ValidationError):
        verify_pair(tiny_fr, tiny_records[0].image, tiny_records[0].image, 1.5)


def test_quality_gate_fires():
    records = make_records(identity_count=4, variations=4)
    cfg = FREmbedderConfig(
        width=8, depth=2, seed=1, epochs=1, embed_dim=16, resolution=TINY_RES, lr=1e-5,
    )
    with pytest.raises(QualityGateError, match="accuracy"):
        train_fr(records, cfg)


def test_config_independence_enforced():
    a = FREmbedderConfig(width=16, depth=3, seed=1)
    same_seed = FREmbedderConfig(width=24, depth=3, seed=1)
    same_arch = FREmbedderConfig(width=16, depth=3, seed=2)
    ok = FREmbedderConfig(width=24, depth=4, seed=2)
    with pytest.raises(ConfigurationError):
        ensure_configs_independent(a, same_seed)
    with pytest.raises(ConfigurationError):
        ensure_configs_independent(a, same_arch)
    ensure_configs_independent(a, ok)


def test_needs_two_identities():
    records = make_records(identity_count=1, variations=4)
    with pytest.raises(ValidationError):
        train_fr(records, FREmbedderConfig(width=8, depth=2, resolution=TINY_RES))


def test_checkpoint_round_trip(tmp_path, tiny_fr, tiny_records):
    path = tmp_path / "fr.pt"
    save_fr(tiny_fr, path)
    loaded = load_fr(path)
    assert loaded.role == tiny_fr.role
    assert loaded.training_accuracy == tiny_fr.training_accuracy
    v1 = embed(tiny_fr, tiny_records[0].image).vector
    v2 = embed(loaded, tiny_records[0].image).vector
    assert np.array_equal(v1, v2)
    assert not any(p.requires_grad for p in loaded.parameters())


def test_frozen_after_training(tiny_fr):
    assert not any(p.requires_grad for p in tiny_fr.parameters())
