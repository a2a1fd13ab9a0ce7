"""Alternating variational attack on partial captions.

The posterior over latent caption positions is factorized per position.
One sweep of the E update walks positions in ascending order, setting
each latent distribution to the softmax of the expected step
log-probabilities under the already-updated earlier positions (expectations
over the pruned top-K support).  The M update runs a few ADAM ascent
steps on the pruned expected joint log-probability minus an l2 penalty
on the noise.  With no latent positions both updates degrade to plain
likelihood ascent on the full target.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .harness import AttackOutcome, compute_metrics, matches_observed
from .inference import (
    FactorizedPosterior,
    enumerate_joint_logprobs,
    enumerate_latent_configs,
    greedy_decode,
    logsumexp,
    topk_renormalized,
)
from .model import BOS, AdversarialState, NoiseObjective, StepDecoder
from .optimizer import NoiseOptimizer


@dataclass(frozen=True)
class GemConfig:
    l2_penalty: float = 0.1
    iterations: int = 50
    prune_width: int = 3
    adam_steps: int = 10
    learning_rate: float = 0.001
    early_stop: bool = True
    # enumerate the exact KL into the trace while |V|^|latent| stays at or
    # below this bound; 0 disables the extra enumeration entirely
    kl_trace_limit: int = 0

    def __post_init__(self):
        if self.l2_penalty < 0:
            raise InputError("l2_penalty must be nonnegative")
        if self.iterations < 1 or self.prune_width < 1 or self.adam_steps < 1:
            raise InputError("iterations, prune_width and adam_steps must be positive")


@dataclass(frozen=True)
class ElboReport:
    lower_bound: float
    kl: float
    evidence: float
    entropy: float


def e_step(model, partial, state, posterior, width=3):
    """One ascending sweep of posterior updates; returns the new posterior.

    Each latent position's updated distribution uses prefix expectations
    over the top-`width` supports of the positions updated earlier in the
    same sweep, so the result of a full sweep does not depend on the
    incoming distributions when width >= |V|.
    """
    latent = partial.latent
    if tuple(posterior.positions) != latent:
        raise ContractError("posterior positions %r do not match latent positions %r"
                            % (posterior.positions, latent))
    if not latent:
        return FactorizedPosterior((), {})
    model.validate_tokens(partial.tokens)
    dec = StepDecoder(model, state.perturbed())
    obs = partial.observed_map
    last_latent = latent[-1]
    paths = [(dec.h0, BOS, 1.0)]
    new_probs = {}
    for pos in range(1, partial.length + 1):
        stepped = []
        for h, prev, w in paths:
            _, logp, h2 = dec.dist(h, prev)
            stepped.append((h2, logp, w))
        tok = obs.get(pos)
        if tok is not None:
            paths = [(h2, tok, w) for h2, _, w in stepped]
        else:
            expected = stepped[0][1] * stepped[0][2]
            for h2, logp, w in stepped[1:]:
                expected = expected + logp * w
            q = np.exp(expected - logsumexp(expected))
            q = q / q.sum()
            new_probs[pos] = q
            if pos == last_latent:
                break
            toks, ws = topk_renormalized(q, width)
            paths = [
                (h2, t, w * float(wt))
                for h2, _, w in stepped
                for t, wt in zip(toks, ws)
            ]
    return FactorizedPosterior(latent, new_probs)


def elbo(model, partial, state, posterior, guard=10**6):
    """Exact evidence decomposition by enumeration (tiny latent spaces).

    Returns ElboReport(lower_bound, kl, evidence, entropy) with
    lower_bound + kl = evidence up to float error.
    """
    latent = partial.latent
    if tuple(posterior.positions) != latent:
        raise ContractError("posterior positions do not match latent positions")
    completions, joints = enumerate_joint_logprobs(model, partial, state, guard)
    evidence = logsumexp(joints)
    if not latent:
        return ElboReport(float(joints[0]), 0.0, evidence, 0.0)
    log_post = joints - evidence
    lower = 0.0
    kl = 0.0
    for tokens, joint, lp in zip(completions, joints, log_post):
        q = 1.0
        for pos, tok in zip(latent, tokens):
            q *= float(posterior.probs[pos][tok])
        if q <= 0.0:
            continue
        lq = np.log(q)
        lower += q * (float(joint) - lq)
        kl += q * (lq - float(lp))
    return ElboReport(lower, kl, evidence, posterior.entropy())


def _pruned_terms(partial, posterior, width):
    positions, configs = enumerate_latent_configs(posterior, width, up_to=partial.length)
    terms = {}
    for tokens, weight in configs:
        full = partial.merge_tokens(dict(zip(positions, tokens)))
        for i in range(partial.length):
            key = (full[:i], full[i])
            terms[key] = terms.get(key, 0.0) + weight
    return [(prefix, tok, w) for (prefix, tok), w in terms.items()]


def m_step(model, partial, state, posterior, config, optimizer=None):
    """ADAM ascent on the pruned expected joint log-probability minus
    the l2 penalty.

    Returns (new state, objective values); values holds the objective
    before each of the adam_steps updates plus once after the last, so a
    healthy run shows a non-decreasing sequence.
    """
    terms = _pruned_terms(partial, posterior, config.prune_width)
    objective = NoiseObjective(model, state.image, terms)
    opt = optimizer
    if opt is None:
        opt = NoiseOptimizer(state.image, config.learning_rate, noise0=state.noise)
    values = []
    lam = config.l2_penalty
    for _ in range(config.adam_steps):
        noise = opt.noise
        value, grad = objective.eval(noise)
        values.append(value - lam * float(noise @ noise))
        opt.ascend(grad - 2.0 * lam * noise)
    noise = opt.noise
    values.append(objective.value(noise) - lam * float(noise @ noise))
    return AdversarialState(state.image, noise.copy()), values


def gem_attack(model, image, partial, config=None):
    """Full alternating attack; returns an AttackOutcome.

    The posterior is initialized by one E sweep at zero noise, the trace
    records one entry per iteration, early stop triggers on the first
    greedy success, and the returned noise is the smallest-norm
    successful one seen (final noise if the attack never succeeded).
    """
    config = config or GemConfig()
    if not partial.observed:
        raise InputError("attack target needs at least one observed position")
    if partial.length > model.config.max_decode_len:
        raise InputError("target length %d exceeds max decode length %d"
                         % (partial.length, model.config.max_decode_len))
    model.validate_tokens(partial.tokens)
    t_start = time.perf_counter()
    image = np.ascontiguousarray(image, dtype=np.float64)
    state = AdversarialState.fresh(image)
    vocab_size = len(model.vocab)
    posterior = e_step(
        model, partial, state,
        FactorizedPosterior.uniform(partial.latent, vocab_size),
        config.prune_width,
    )
    opt = NoiseOptimizer(image, config.learning_rate)
    trace = []
    best = None
    caption = greedy_decode(model, state)
    for it in range(1, config.iterations + 1):
        state, values = m_step(model, partial, state, posterior, config, optimizer=opt)
        caption = greedy_decode(model, state)
        success = matches_observed(partial, caption)
        norm = state.noise_norm()
        entry = {
            "iter": it,
            # pruned lower-bound estimate: expected joint log-prob under the
            # pruned posterior plus its entropy (exact for complete targets)
            "elbo": values[-1] + config.l2_penalty * norm * norm + posterior.entropy(),
            "eps_norm": norm,
            "success": success,
        }
        if config.kl_trace_limit and vocab_size ** len(partial.latent) <= config.kl_trace_limit:
            entry["kl"] = elbo(model, partial, state, posterior).kl
        trace.append(entry)
        if success and (best is None or norm < best[0]):
            best = (norm, state.noise.copy(), caption)
        if success and config.early_stop:
            break
        if it < config.iterations:
            posterior = e_step(model, partial, state, posterior, config.prune_width)
    if best is not None:
        final_noise, final_caption = best[1], best[2]
    else:
        final_noise, final_caption = state.noise, caption
    metrics = compute_metrics(partial, final_caption, final_noise)
    return AttackOutcome(
        noise=final_noise,
        caption=final_caption,
        metrics=metrics,
        trace=trace,
        wall_time=time.perf_counter() - t_start,
        success=bool(metrics.succ_sign),
        extras={},
    )
