"""Gradient baselines: targeted logit objectives and an untargeted
likelihood-descent attack.

The targeted baselines teacher-force the complete target sequence and
work on raw logits: "max_logits" ascends the sum of target logits;
"logit_margin" descends per-step hinge losses max(0, max_rival - z_target),
where the rival is found by masking the target logit with a large
constant.  The untargeted attack descends the log-likelihood of the
benign caption until the greedy decode changes.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .harness import AttackOutcome, compute_metrics, matches_observed
from .inference import PartialCaption, greedy_decode
from .model import (
    BOS,
    AdversarialState,
    NoiseObjective,
    TracedDecoder,
    sequence_logprob,
    sequence_terms,
)
from .optimizer import BOX_MODES, NoiseOptimizer


@dataclass(frozen=True)
class BaselineConfig:
    l2_penalty: float = 0.1
    margin_const: float = 10000.0
    iterations: int = 500
    learning_rate: float = 0.001
    box_mode: str = "clip"
    check_every: int = 10
    early_stop: bool = True

    def __post_init__(self):
        if self.l2_penalty < 0:
            raise InputError("l2_penalty must be nonnegative")
        if self.iterations < 0:
            raise InputError("iterations must be nonnegative")
        if self.check_every < 1:
            raise InputError("check_every must be positive")
        if self.box_mode not in BOX_MODES:
            raise InputError("box_mode must be one of %r" % (BOX_MODES,))
        if self.margin_const <= 0:
            raise InputError("margin_const must be positive")


def _full_target(model, target):
    target = tuple(int(t) for t in target)
    if not target:
        raise InputError("target caption is empty")
    if len(target) > model.config.max_decode_len:
        raise InputError("target length %d exceeds max decode length %d"
                         % (len(target), model.config.max_decode_len))
    model.validate_tokens(target)
    return target


def _finish(partial, image, opt_noise, best, caption, trace, t_start, extras=None):
    if best is not None:
        noise, caption = best[1], best[2]
    else:
        noise = opt_noise
    metrics = compute_metrics(partial, caption, noise)
    return AttackOutcome(
        noise=noise,
        caption=caption,
        metrics=metrics,
        trace=trace,
        wall_time=time.perf_counter() - t_start,
        success=bool(metrics.succ_sign),
        extras=extras or {},
    )


def logits_attack(model, image, target, config=None):
    """Ascent on sum of target-token logits minus the l2 penalty."""
    config = config or BaselineConfig()
    target = _full_target(model, target)
    partial = PartialCaption.from_tokens(target)
    t_start = time.perf_counter()
    image = np.ascontiguousarray(image, dtype=np.float64)
    objective = NoiseObjective(model, image, sequence_terms(target, 1.0), use_logits=True)
    opt = NoiseOptimizer(image, config.learning_rate, config.box_mode)
    lam = config.l2_penalty
    trace = []
    best = None
    caption = greedy_decode(model, AdversarialState(image, opt.noise))
    for it in range(1, config.iterations + 1):
        noise = opt.noise
        value, grad = objective.eval(noise)
        opt.ascend(grad - 2.0 * lam * noise)
        if it % config.check_every == 0 or it == config.iterations:
            state = AdversarialState(image, opt.noise.copy())
            caption = greedy_decode(model, state)
            success = matches_observed(partial, caption)
            norm = state.noise_norm()
            trace.append({
                "iter": it,
                "objective": value - lam * float(noise @ noise),
                "eps_norm": norm,
                "success": success,
            })
            if success and (best is None or norm < best[0]):
                best = (norm, state.noise.copy(), caption)
            if success and config.early_stop:
                break
    return _finish(partial, image, opt.noise, best, caption, trace, t_start)


def logit_margin_attack(model, image, target, config=None):
    """Descent on per-step hinge losses plus the l2 penalty.

    At every step the rival is the argmax after subtracting margin_const
    from the target entry; a zero total hinge means the teacher-forced
    argmax path equals the target, i.e. greedy success.
    """
    config = config or BaselineConfig()
    target = _full_target(model, target)
    partial = PartialCaption.from_tokens(target)
    t_start = time.perf_counter()
    image = np.ascontiguousarray(image, dtype=np.float64)
    opt = NoiseOptimizer(image, config.learning_rate, config.box_mode)
    lam = config.l2_penalty
    trace = []
    best = None
    caption = greedy_decode(model, AdversarialState(image, opt.noise))
    for it in range(1, config.iterations + 1):
        noise = opt.noise
        dec = TracedDecoder(model, image, noise)
        hid = dec.h0_id
        prev = BOS
        weights = {}
        hinge_total = 0.0
        for tok in target:
            logits_id, _, h2 = dec.dist(hid, prev)
            logits = dec.tape.value(logits_id)
            masked = logits.copy()
            masked[tok] -= config.margin_const
            rival = int(np.argmax(masked))
            hinge = float(logits[rival] - logits[tok])
            if hinge > 0.0:
                hinge_total += hinge
                sid_r = dec.tape.select(logits_id, rival)
                sid_t = dec.tape.select(logits_id, tok)
                weights[sid_r] = weights.get(sid_r, 0.0) + 1.0
                weights[sid_t] = weights.get(sid_t, 0.0) - 1.0
            hid = h2
            prev = tok
        if weights:
            grad = dec.tape.backward(weights, wrt=[dec.noise_id])[dec.noise_id]
        else:
            grad = np.zeros_like(noise)
        opt.descend(grad + 2.0 * lam * noise)
        if hinge_total == 0.0 or it % config.check_every == 0 or it == config.iterations:
            state = AdversarialState(image, opt.noise.copy())
            caption = greedy_decode(model, state)
            success = matches_observed(partial, caption)
            norm = state.noise_norm()
            trace.append({
                "iter": it,
                "objective": hinge_total + lam * float(noise @ noise),
                "eps_norm": norm,
                "success": success,
            })
            if success and (best is None or norm < best[0]):
                best = (norm, state.noise.copy(), caption)
            if success and config.early_stop:
                break
    return _finish(partial, image, opt.noise, best, caption, trace, t_start)


def untargeted_attack(model, image, config=None):
    """Descent on the benign caption's log-likelihood plus the l2
    penalty until the greedy caption changes.

    The outcome's metrics field is None (the targeted triple is not
    defined here); success means the caption changed, and extras carry
    the benign caption and the log-likelihood drop.
    """
    config = config or BaselineConfig()
    t_start = time.perf_counter()
    image = np.ascontiguousarray(image, dtype=np.float64)
    benign_state = AdversarialState.fresh(image)
    benign = greedy_decode(model, benign_state)
    benign_ll = sequence_logprob(model, benign_state, benign)
    objective = NoiseObjective(model, image, sequence_terms(benign, 1.0))
    opt = NoiseOptimizer(image, config.learning_rate, config.box_mode)
    lam = config.l2_penalty
    trace = []
    best = None
    caption = benign
    for it in range(1, config.iterations + 1):
        noise = opt.noise
        value, grad = objective.eval(noise)
        opt.descend(grad + 2.0 * lam * noise)
        if it % config.check_every == 0 or it == config.iterations:
            state = AdversarialState(image, opt.noise.copy())
            caption = greedy_decode(model, state)
            changed = caption != benign
            norm = state.noise_norm()
            trace.append({
                "iter": it,
                "objective": value + lam * float(noise @ noise),
                "eps_norm": norm,
                "success": changed,
            })
            if changed and (best is None or norm < best[0]):
                best = (norm, state.noise.copy(), caption)
            if changed and config.early_stop:
                break
    if best is not None:
        noise, caption = best[1], best[2]
    else:
        noise = opt.noise
    final_state = AdversarialState(image, noise)
    drop = benign_ll - sequence_logprob(model, final_state, benign)
    return AttackOutcome(
        noise=noise,
        caption=caption,
        metrics=None,
        trace=trace,
        wall_time=time.perf_counter() - t_start,
        success=caption != benign,
        extras={"benign_caption": list(benign), "logprob_drop": drop},
    )
