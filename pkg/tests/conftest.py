import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from radlab.data import EncodedPair, collate  # noqa: E402
from radlab.model import ModelConfig, init_params  # noqa: E402
from radlab.response_aware import RaConfig, init_ra_params  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=11, embed_dim=8, n_layers=1, n_heads=2, ff_dim=12, max_positions=16)


@pytest.fixture
def tiny_params(tiny_config):
    # larger init so attention patterns are far from uniform in oracle checks
    return init_params(tiny_config.__class__(**{**tiny_config.to_dict(), "init_std": 0.5}), np.random.default_rng(7))


@pytest.fixture
def tiny_ra(tiny_config):
    return init_ra_params(RaConfig(embed_dim=tiny_config.embed_dim, n_heads=2, hidden_dim=10, init_std=0.5), np.random.default_rng(8))


def make_batch(rng, vocab_size, sizes):
    """Random batch with given (context_len, response_len) per row; ids avoid PAD."""
    items = []
    for m, n in sizes:
        ctx = rng.integers(5, vocab_size, size=m)
        ctx[-1] = 2
        resp = rng.integers(5, vocab_size, size=n)
        resp[-1] = 3
        items.append(EncodedPair(ctx.astype(np.int64), resp.astype(np.int64)))
    return collate(items)


# held-out copy-task ablation shared by the acceptance gate and the training tests
COPY_MODEL = dict(embed_dim=64, n_layers=2, n_heads=4, ff_dim=256, max_positions=32)
COPY_TRAIN = dict(learning_rate=1e-3, batch_size=16, epochs=15)
COPY_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def copy_ablation():
    import json

    from radlab import data as D
    from radlab.decode import GenerationConfig
    from radlab.train import TrainConfig, run_ablation

    records = D.make_copy_records(2200, seed=0)
    pairs, _ = D.parse_records([json.dumps(r) for r in records])
    train_pairs, test_pairs = pairs[:2000], pairs[2000:]
    vocab = D.build_vocab(train_pairs, 2000)
    cfg = ModelConfig(vocab_size=len(vocab), **COPY_MODEL)
    tr = D.encode_corpus(train_pairs, vocab, cfg.max_positions)
    te = D.encode_corpus(test_pairs, vocab, cfg.max_positions)
    return run_ablation(tr, te, cfg, TrainConfig(**COPY_TRAIN), seeds=COPY_SEEDS,
                        gen_config=GenerationConfig(max_new_tokens=12))
