import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capattack.errors import ContractError, GuardError, InputError
from capattack.inference import (
    ENUM_GUARD,
    FactorizedPosterior,
    PartialCaption,
    enumerate_joint_logprobs,
    enumerate_latent_configs,
    greedy_decode,
    latent_completion,
    logsumexp,
    loss_augmented_infer,
    topk_renormalized,
)
from capattack.model import AdversarialState, StepDecoder, sequence_logprob
from tests.conftest import SMALL_CFG, SMALL_VOCAB, random_state, small_model


def test_partial_caption_basics():
    p = PartialCaption(5, (2, 4), (3, 1))
    assert p.latent == (1, 3, 5)
    assert p.observed_map == {2: 3, 4: 1}
    assert not p.is_complete
    full = p.merge_tokens({1: 2, 3: 4, 5: 1})
    assert full == (2, 3, 4, 1, 1)
    d = p.to_dict()
    assert PartialCaption.from_dict(d) == p


def test_partial_caption_guards():
    with pytest.raises(InputError):
        PartialCaption(3, (1, 4), (2, 2))  # position out of range
    with pytest.raises(InputError):
        PartialCaption(3, (1, 1), (2, 2))  # duplicate position
    with pytest.raises(InputError):
        PartialCaption(3, (1, 2), (2,))  # token count mismatch
    with pytest.raises(InputError):
        PartialCaption(0, (), ())


def test_complete_constructor():
    p = PartialCaption.from_tokens((2, 3, 1))
    assert p.is_complete and p.latent == ()


def test_greedy_decode_stops_at_eos():
    model = small_model(0)
    rng = np.random.default_rng(0)
    state = random_state(rng)
    cap = greedy_decode(model, state)
    assert 1 <= len(cap) <= SMALL_CFG.max_decode_len
    if 1 in cap:
        assert cap[-1] == 1 and cap.count(1) == 1


def test_greedy_decode_is_stepwise_argmax():
    for seed in range(5):
        model = small_model(seed)
        rng = np.random.default_rng(seed)
        state = random_state(rng)
        cap = greedy_decode(model, state)
        dec = StepDecoder(model, state.perturbed())
        h, prev = dec.h0, 0
        for tok in cap:
            _, logp, h = dec.dist(h, prev)
            assert tok == int(np.argmax(logp))
            prev = tok


def test_latent_completion_pins_observed():
    model = small_model(1)
    rng = np.random.default_rng(1)
    state = random_state(rng)
    partial = PartialCaption(4, (2, 4), (5, 2))
    full = latent_completion(model, partial, state)
    assert len(full) == 4
    assert full[1] == 5 and full[3] == 2


def test_latent_completion_beats_other_latent_fills():
    # the greedy fill maximizes each latent step given its prefix; for a
    # single latent slot that is the global argmax over completions
    model = small_model(2)
    rng = np.random.default_rng(2)
    state = random_state(rng)
    partial = PartialCaption(3, (1, 3), (4, 1))
    full = latent_completion(model, partial, state)
    best = max(
        (sequence_logprob(model, state, partial.merge_tokens({2: t})), t)
        for t in range(len(SMALL_VOCAB))
    )
    assert full[1] == best[1]


def test_loss_augmented_prefers_rivals_under_penalty():
    model = small_model(3)
    rng = np.random.default_rng(3)
    state = random_state(rng)
    partial = PartialCaption(4, (1, 2, 3, 4), (2, 3, 4, 5))
    res = loss_augmented_infer(model, partial, state, 100.0)
    # with a huge penalty every observed slot picks some mismatch
    assert res.mismatches == 4
    assert all(res.tokens[i] != partial.tokens[i] for i in range(4))


def test_loss_augmented_zeta_zero_is_plain_greedy_walk():
    model = small_model(4)
    rng = np.random.default_rng(4)
    state = random_state(rng)
    partial = PartialCaption(5, (2, 5), (3, 1))
    res = loss_augmented_infer(model, partial, state, 0.0)
    dec = StepDecoder(model, state.perturbed())
    h, prev = dec.h0, 0
    want = []
    for _ in range(5):
        _, logp, h = dec.dist(h, prev)
        prev = int(np.argmax(logp))
        want.append(prev)
    assert res.tokens == tuple(want)
    assert res.mismatches == sum(
        1 for i, t in partial.observed_map.items() if want[i - 1] != t
    )


def test_loss_augmented_rejects_negative_penalty():
    model = small_model(5)
    state = AdversarialState.fresh(np.full(SMALL_CFG.pixels, 0.5))
    with pytest.raises(InputError):
        loss_augmented_infer(model, PartialCaption(2, (1,), (2,)), state, -1.0)


@given(
    probs=st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=12),
    k=st.integers(1, 12),
)
@settings(deadline=None, max_examples=80)
def test_topk_renormalized_properties(probs, k):
    p = np.asarray(probs)
    p = p / p.sum()
    toks, ws = topk_renormalized(p, k)
    kk = min(k, len(p))
    assert len(toks) == kk == len(ws)
    assert abs(ws.sum() - 1.0) < 1e-9
    kept = sorted(p[list(toks)], reverse=True)
    dropped = [p[i] for i in range(len(p)) if i not in set(toks)]
    if dropped:
        assert min(kept) >= max(dropped) - 1e-12


def test_factorized_posterior_validation():
    with pytest.raises(InputError):
        FactorizedPosterior((2,), {2: np.array([0.5, 0.6])})  # not normalized
    q = FactorizedPosterior((2,), {2: np.array([0.25, 0.75])})
    assert abs(q.entropy() - (-(0.25 * np.log(0.25) + 0.75 * np.log(0.75)))) < 1e-12


def test_uniform_posterior_entropy():
    q = FactorizedPosterior.uniform((1, 3), 6)
    assert abs(q.entropy() - 2 * np.log(6)) < 1e-12


def test_enumerate_latent_configs_weights():
    q = FactorizedPosterior(
        (1, 3),
        {1: np.array([0.7, 0.3, 0.0, 0.0, 0.0, 0.0]),
         3: np.array([0.0, 0.5, 0.5, 0.0, 0.0, 0.0])},
    )
    positions, configs = enumerate_latent_configs(q, 2)
    assert positions == (1, 3)
    total = sum(w for _, w in configs)
    assert abs(total - 1.0) < 1e-12
    assert len(configs) == 4


def test_enumeration_guard_trips():
    q = FactorizedPosterior.uniform(tuple(range(1, 9)), 6)
    with pytest.raises(GuardError):
        enumerate_latent_configs(q, 6, guard=1000)


def test_enumerate_joint_logprobs_matches_sequence_logprob():
    model = small_model(6)
    rng = np.random.default_rng(6)
    state = random_state(rng)
    partial = PartialCaption(3, (2,), (4,))
    completions, joints = enumerate_joint_logprobs(model, partial, state)
    assert len(completions) == len(SMALL_VOCAB) ** 2
    for tokens, joint in zip(completions, joints):
        full = partial.merge_tokens(dict(zip(partial.latent, tokens)))
        assert abs(joint - sequence_logprob(model, state, full)) < 1e-10


def test_logsumexp_stable():
    vals = np.array([-1000.0, -1000.0])
    assert abs(logsumexp(vals) - (-1000.0 + np.log(2.0))) < 1e-12
    assert logsumexp(np.array([0.0])) == 0.0
