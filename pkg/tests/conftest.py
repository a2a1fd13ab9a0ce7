"""Shared fixtures: trained toy captioners plus small enumerable models.

The trained fixtures are session-scoped because training takes ~20s each;
every test that needs a competent model shares them.  Small-model helpers
build 6-token captioners whose latent spaces are cheap to enumerate.
"""

import numpy as np
import pytest

from capattack import gen_synthetic
from capattack.harness import exact_match_rate
from capattack.model import (
    AdversarialState,
    CaptionModel,
    ModelConfig,
    Vocab,
    holdout_split,
    init_params,
    train_toy,
)

SMALL_VOCAB = Vocab(("<bos>", "<eos>", "red", "blue", "dot", "box"))
SMALL_CFG = ModelConfig(
    image_side=3, feature_dim=4, hidden_dim=3, embed_dim=3, max_decode_len=5
)


@pytest.fixture(scope="session")
def dataset2000():
    return gen_synthetic(2000, seed=0)


def _train(dataset, feed_mode):
    cfg = ModelConfig(feed_mode=feed_mode)
    params = train_toy(dataset, cfg, epochs=30, seed=0)
    model = CaptionModel(cfg, dataset.vocab, params)
    _, hold = holdout_split(len(dataset), 0.1, seed=0)
    em = exact_match_rate(model, [dataset[i] for i in hold])
    return model, em


@pytest.fixture(scope="session")
def model_step(dataset2000):
    model, em = _train(dataset2000, "step_feed")
    assert em >= 0.9, "step_feed training gate not met (exact match %.3f)" % em
    return model


@pytest.fixture(scope="session")
def model_init(dataset2000):
    model, em = _train(dataset2000, "init_feed")
    assert em >= 0.9, "init_feed training gate not met (exact match %.3f)" % em
    return model


def small_model(seed, sharp=0.0):
    """6-token model with tiny dims; `sharp` rescales the readout so step
    distributions become peaked (needed by pruning-mass preconditions)."""
    params = init_params(SMALL_CFG, len(SMALL_VOCAB), seed)
    if sharp:
        rng = np.random.default_rng(seed + 999)
        params.out_w[...] = rng.normal(0.0, sharp, params.out_w.shape)
        params.out_b[...] = rng.normal(0.0, sharp, params.out_b.shape)
    return CaptionModel(SMALL_CFG, SMALL_VOCAB, params)


def random_state(rng, noise_scale=0.05):
    image = rng.uniform(0.1, 0.9, SMALL_CFG.pixels)
    noise = rng.normal(0.0, noise_scale, SMALL_CFG.pixels)
    # keep the perturbed image inside the pixel box
    noise = np.clip(image + noise, 0.0, 1.0) - image
    return AdversarialState(image, noise)


@pytest.fixture
def small_model_factory():
    return small_model


@pytest.fixture
def small_state_factory():
    return random_state
