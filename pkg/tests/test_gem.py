import itertools

import numpy as np
import pytest

from capattack.errors import ContractError, InputError
from capattack.gem import GemConfig, _pruned_terms, e_step, elbo, gem_attack, m_step
from capattack.inference import (
    FactorizedPosterior,
    PartialCaption,
    logsumexp,
    marginal_logprob_oracle,
)
from capattack.model import (
    AdversarialState,
    NoiseObjective,
    StepDecoder,
    sequence_logprob,
)
from tests.conftest import SMALL_CFG, SMALL_VOCAB, random_state, small_model

V = len(SMALL_VOCAB)


def _instance(rng, sharp=0.0):
    model = small_model(int(rng.integers(10**6)), sharp)
    n = int(rng.integers(3, 6))
    n_lat = int(rng.integers(1, min(3, n - 1) + 1))
    lat = sorted(rng.choice(np.arange(1, n + 1), size=n_lat, replace=False).tolist())
    obs = tuple(p for p in range(1, n + 1) if p not in lat)
    toks = tuple(int(rng.integers(1, V)) for _ in obs)
    return model, PartialCaption(n, obs, toks), random_state(rng)


def _random_posterior(rng, partial):
    return FactorizedPosterior(
        partial.latent, {p: rng.dirichlet(np.ones(V)) for p in partial.latent}
    )


def test_elbo_identity_and_nonnegative_kl():
    rng = np.random.default_rng(20)
    for _ in range(25):
        model, partial, state = _instance(rng)
        q = _random_posterior(rng, partial)
        rep = elbo(model, partial, state, q)
        assert abs(rep.lower_bound + rep.kl - rep.evidence) < 1e-8
        assert rep.kl >= -1e-10
        assert abs(rep.evidence - marginal_logprob_oracle(model, partial, state)) < 1e-10


def test_elbo_complete_caption_degenerates():
    model = small_model(0)
    rng = np.random.default_rng(0)
    state = random_state(rng)
    partial = PartialCaption.from_tokens((2, 4, 1))
    rep = elbo(model, partial, state, FactorizedPosterior((), {}))
    assert rep.kl == 0.0 and rep.entropy == 0.0
    assert abs(rep.evidence - sequence_logprob(model, state, (2, 4, 1))) < 1e-12


def test_e_step_full_width_forgets_incoming_posterior():
    # with width >= |V| the sweep rebuilds every factor from the prefix
    # expectations alone, so the starting q cannot leak through
    rng = np.random.default_rng(21)
    for _ in range(10):
        model, partial, state = _instance(rng)
        qa = e_step(model, partial, state, _random_posterior(rng, partial), width=V)
        qb = e_step(model, partial, state, _random_posterior(rng, partial), width=V)
        for pos in partial.latent:
            np.testing.assert_allclose(qa.probs[pos], qb.probs[pos], atol=1e-12)


def test_e_step_never_increases_kl():
    rng = np.random.default_rng(22)
    for _ in range(25):
        model, partial, state = _instance(rng)
        q0 = _random_posterior(rng, partial)
        kl0 = elbo(model, partial, state, q0).kl
        q1 = e_step(model, partial, state, q0, width=V)
        kl1 = elbo(model, partial, state, q1).kl
        assert kl1 <= kl0 + 1e-10


def test_e_step_first_latent_is_step_distribution():
    rng = np.random.default_rng(23)
    for _ in range(10):
        model, partial, state = _instance(rng)
        first = partial.latent[0]
        if any(p not in partial.observed_map for p in range(1, first)):
            continue
        q = e_step(model, partial, state, _random_posterior(rng, partial), width=3)
        dec = StepDecoder(model, state.perturbed())
        h, prev = dec.h0, 0
        for pos in range(1, first):
            _, _, h2 = dec.dist(h, prev)
            h, prev = h2, partial.observed_map[pos]
        _, logp, _ = dec.dist(h, prev)
        np.testing.assert_allclose(q.probs[first], np.exp(logp), atol=1e-10)


def test_e_step_position_mismatch_rejected():
    model = small_model(1)
    rng = np.random.default_rng(1)
    state = random_state(rng)
    partial = PartialCaption(3, (1,), (2,))
    wrong = FactorizedPosterior((1,), {1: np.ones(V) / V})
    with pytest.raises(ContractError):
        e_step(model, partial, state, wrong)


def test_pruned_terms_match_enumeration_at_full_width():
    rng = np.random.default_rng(24)
    for _ in range(10):
        model, partial, state = _instance(rng, sharp=2.0)
        q = e_step(model, partial, state,
                   FactorizedPosterior.uniform(partial.latent, V), width=V)
        value = NoiseObjective(model, state.image,
                               _pruned_terms(partial, q, V)).value(state.noise)
        exact = 0.0
        for combo in itertools.product(range(V), repeat=len(partial.latent)):
            w = 1.0
            for pos, tok in zip(partial.latent, combo):
                w *= float(q.probs[pos][tok])
            full = partial.merge_tokens(dict(zip(partial.latent, combo)))
            exact += w * sequence_logprob(model, state, full)
        assert abs(value - exact) < 1e-10


def test_m_step_large_penalty_shrinks_noise():
    model = small_model(2)
    rng = np.random.default_rng(2)
    state = random_state(rng, noise_scale=0.2)
    partial = PartialCaption(3, (1, 2), (2, 3))
    q = FactorizedPosterior.uniform(partial.latent, V)
    cfg = GemConfig(l2_penalty=1e6, adam_steps=400, learning_rate=0.01)
    new_state, _ = m_step(model, partial, state, q, cfg)
    assert np.linalg.norm(new_state.noise) < 1e-3


def test_m_step_ascends_objective():
    rng = np.random.default_rng(25)
    improved = 0
    for _ in range(10):
        model, partial, state = _instance(rng)
        q = e_step(model, partial, state,
                   FactorizedPosterior.uniform(partial.latent, V), width=3)
        cfg = GemConfig(l2_penalty=0.01, adam_steps=25)

        def objective(s):
            val = NoiseObjective(model, s.image,
                                 _pruned_terms(partial, q, 3)).value(s.noise)
            return val - cfg.l2_penalty * float(s.noise @ s.noise)

        before = objective(state)
        new_state, _ = m_step(model, partial, state, q, cfg)
        if objective(new_state) > before:
            improved += 1
    assert improved >= 9


def test_gem_attack_succeeds_on_trained_model(model_step, dataset2000):
    from capattack.harness import select_eval_pairs

    img, tgt = select_eval_pairs(dataset2000, 1, seed=2)[0]
    out = gem_attack(model_step, img, PartialCaption.from_tokens(tgt),
                     GemConfig(adam_steps=40))
    assert out.success
    assert out.caption == tuple(tgt)
    assert out.metrics.succ_sign == 1 and out.metrics.eps_norm > 0
    # smallest successful noise is what gets reported
    assert np.linalg.norm(out.noise) == pytest.approx(out.metrics.eps_norm)


def test_gem_trace_schema(model_step, dataset2000):
    from capattack.harness import select_eval_pairs

    img, tgt = select_eval_pairs(dataset2000, 1, seed=4)[0]
    out = gem_attack(model_step, img, PartialCaption.from_tokens(tgt),
                     GemConfig(adam_steps=5, iterations=3, early_stop=False))
    assert len(out.trace) == 3
    for entry in out.trace:
        assert {"iter", "elbo", "eps_norm", "success"} <= set(entry)


def test_gem_config_validation():
    with pytest.raises(InputError):
        GemConfig(l2_penalty=-1.0)
    with pytest.raises(InputError):
        GemConfig(prune_width=0)
    with pytest.raises(InputError):
        GemConfig(iterations=0)
