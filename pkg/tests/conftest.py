import numpy as np
import pytest
import torch

from idsis.data import DataConfig, generate_record, identity_spec, record_split
from idsis.identity import FREmbedderConfig, train_fr

torch.set_num_threads(2)

TINY_RES = 32


def make_records(identity_count, variations, seed=0, resolution=TINY_RES):
    cfg = DataConfig(
        resolution=resolution,
        identity_count=identity_count,
        variations_per_identity=variations,
        seed=seed,
    )
    return [
        generate_record(identity_spec(i, seed), v, cfg)
        for i in range(identity_count)
        for v in range(variations)
    ]


@pytest.fixture(scope="session")
def tiny_records():
    return make_records(identity_count=6, variations=6)


@pytest.fixture(scope="session")
def tiny_fr(tiny_records):
    cfg = FREmbedderConfig(
        width=8, depth=2, seed=3, epochs=120, embed_dim=32, resolution=TINY_RES,
        batch_size=16, lr=5e-3,
    )
    return train_fr(tiny_records, cfg, role="train")


@pytest.fixture(scope="session")
def tiny_eval_fr(tiny_records):
    cfg = FREmbedderConfig(
        width=16, depth=3, seed=4, epochs=120, embed_dim=32, resolution=TINY_RES,
        batch_size=16, lr=5e-3,
    )
    return train_fr(tiny_records, cfg, role="eval")
