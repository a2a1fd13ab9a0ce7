"""Margin-based attack with latent completion.

Outer loop: complete the latent positions of the target by sequential
greedy fill (the current best explanation of the target under the
noise).  Inner loop: find the strongest rival via loss-augmented
inference, then take a few ADAM descent steps on

    l2_penalty * ||noise||^2 + logP(rival) - logP(completed target).

The mismatch term of the augmented loss is constant in the noise, so it
appears in neither the objective value nor its gradient; it is reported
separately in the trace.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InputError
from .harness import AttackOutcome, compute_metrics, matches_observed
from .inference import greedy_decode, latent_completion, loss_augmented_infer
from .model import AdversarialState, NoiseObjective, sequence_terms
from .optimizer import NoiseOptimizer


@dataclass(frozen=True)
class LssvmConfig:
    l2_penalty: float = 0.1
    outer_iterations: int = 10
    inner_iterations: int = 10
    adam_steps: int = 10
    learning_rate: float = 0.001
    mismatch_penalty: float = 1.0
    early_stop: bool = True

    def __post_init__(self):
        if self.l2_penalty < 0 or self.mismatch_penalty < 0:
            raise InputError("penalties must be nonnegative")
        if min(self.outer_iterations, self.inner_iterations, self.adam_steps) < 1:
            raise InputError("iteration counts must be positive")


def structured_loss(reference, predicted, mismatch_penalty=1.0):
    """mismatch_penalty times the number of positionwise mismatches
    between equal-length sequences."""
    reference = tuple(reference)
    predicted = tuple(predicted)
    if len(reference) != len(predicted):
        raise InputError("structured loss needs equal-length sequences")
    return float(mismatch_penalty) * sum(1 for a, b in zip(reference, predicted) if a != b)


def _margin_terms(rival, target):
    return sequence_terms(rival, 1.0) + sequence_terms(target, -1.0)


def ssvm_objective_grad(model, partial, completion, rival, state, l2_penalty):
    """Value and descent gradient of the margin objective.

    completion: full length-N sequence agreeing with the observed
    positions (the latent completion of the target); rival: full
    length-N sequence from loss-augmented inference.  When rival equals
    completion the log-prob terms cancel exactly and the objective
    reduces to the l2 penalty.
    """
    completion = tuple(int(t) for t in completion)
    rival = tuple(int(t) for t in rival)
    if len(completion) != partial.length or len(rival) != partial.length:
        raise InputError("completion and rival must have the target length")
    obs = partial.observed_map
    for pos, tok in obs.items():
        if completion[pos - 1] != tok:
            raise ContractError("completion disagrees with observed position %d" % pos)
    objective = NoiseObjective(model, state.image, _margin_terms(rival, completion))
    margin, grad = objective.eval(state.noise)
    lam = float(l2_penalty)
    noise = state.noise
    value = lam * float(noise @ noise) + margin
    return value, grad + 2.0 * lam * noise


def lssvm_attack(model, image, partial, config=None):
    """Alternating completion / rival search / noise descent.

    Trace entries carry (outer, inner, objective, loss_aug_delta,
    eps_norm, success); early stop triggers on the first greedy success
    and the smallest-norm successful noise wins.
    """
    config = config or LssvmConfig()
    if not partial.observed:
        raise InputError("attack target needs at least one observed position")
    if partial.length > model.config.max_decode_len:
        raise InputError("target length %d exceeds max decode length %d"
                         % (partial.length, model.config.max_decode_len))
    model.validate_tokens(partial.tokens)
    t_start = time.perf_counter()
    image = np.ascontiguousarray(image, dtype=np.float64)
    opt = NoiseOptimizer(image, config.learning_rate)
    state = AdversarialState.fresh(image)
    lam = config.l2_penalty
    trace = []
    best = None
    caption = greedy_decode(model, state)
    stop = False
    for outer in range(1, config.outer_iterations + 1):
        completion = latent_completion(model, partial, state)
        for inner in range(1, config.inner_iterations + 1):
            rival = loss_augmented_infer(model, partial, state, config.mismatch_penalty)
            objective = NoiseObjective(model, state.image, _margin_terms(rival.tokens, completion))
            for _ in range(config.adam_steps):
                noise = opt.noise
                _, grad = objective.eval(noise)
                opt.descend(grad + 2.0 * lam * noise)
            noise = opt.noise
            state = AdversarialState(image, noise.copy())
            value = lam * float(noise @ noise) + objective.value(noise)
            caption = greedy_decode(model, state)
            success = matches_observed(partial, caption)
            norm = state.noise_norm()
            trace.append({
                "outer": outer,
                "inner": inner,
                "objective": value,
                "loss_aug_delta": config.mismatch_penalty * rival.mismatches,
                "eps_norm": norm,
                "success": success,
            })
            if success and (best is None or norm < best[0]):
                best = (norm, state.noise.copy(), caption)
            if success and config.early_stop:
                stop = True
                break
        if stop:
            break
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
