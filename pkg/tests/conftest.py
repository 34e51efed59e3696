import numpy as np
import pytest

from nextbasket import EncoderConfig, ParameterStore, SyntheticConfig, generate_synthetic
from nextbasket.encoder import init_encoder_params
from nextbasket.pretraining import init_pretrain_heads


@pytest.fixture
def tiny_corpus():
    """Six users, 12 items, deterministic co-occurrence pairs."""
    return generate_synthetic(SyntheticConfig(
        n_users=6, n_items=12, n_baskets_per_user=5,
        co_occur_pairs=[(0, 1), (2, 3), (4, 5)],
        noise_rate=0.0, seed=11))


@pytest.fixture
def tiny_sequential_corpus():
    return generate_synthetic(SyntheticConfig(
        n_users=8, n_items=12, n_baskets_per_user=6,
        sequential_rules=[(0, 1), (2, 3), (4, 5)],
        noise_rate=0.0, seed=7, pairs_per_basket=2))


def make_config(vocab_size, **overrides):
    defaults = dict(hidden_size=16, num_layers=1, num_heads=2,
                    max_sequence_length=32, dropout_rate=0.0)
    defaults.update(overrides)
    return EncoderConfig(vocab_size=vocab_size, **defaults)


def make_model(corpus, seed=0, with_heads=True, **config_overrides):
    """(store, config) with encoder params (+ pretrain heads) initialized."""
    config = make_config(corpus.vocabulary.size, **config_overrides)
    store = ParameterStore(seed)
    init_encoder_params(store, config)
    if with_heads:
        init_pretrain_heads(store, config, corpus.vocabulary.n_items)
    return store, config


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(0))
