"""Finite-difference validation of every analytic noise gradient.

Used by the `gradcheck` CLI command as a deployment guard: each attack
objective is probed at randomly chosen pixels and the analytic gradient
must match central differences to a small relative error.
"""

import numpy as np

from .errors import InputError
from .gem import GemConfig, e_step, _pruned_terms
from .inference import (
    FactorizedPosterior,
    PartialCaption,
    greedy_decode,
    latent_completion,
    loss_augmented_infer,
)
from .lssvm import ssvm_objective_grad
from .model import (
    BOS,
    AdversarialState,
    NoiseObjective,
    StepDecoder,
    TracedDecoder,
    sequence_terms,
)
from .numerics.kernels import BACKEND

DEFAULT_TOLERANCE = 1e-4


def central_difference(value_fn, noise, index, step=1e-5):
    up = noise.copy()
    up[index] += step
    down = noise.copy()
    down[index] -= step
    return (value_fn(up) - value_fn(down)) / (2.0 * step)


def _margin_forward(model, image, target, margin_const, noise, want_grad):
    """Hinge-loss sum over teacher-forced steps; optionally its gradient
    with the rival set taken at this evaluation point."""
    dec = TracedDecoder(model, image, noise)
    hid = dec.h0_id
    prev = BOS
    weights = {}
    total = 0.0
    for tok in target:
        logits_id, _, h2 = dec.dist(hid, prev)
        logits = dec.tape.value(logits_id)
        masked = logits.copy()
        masked[tok] -= margin_const
        rival = int(np.argmax(masked))
        hinge = float(logits[rival] - logits[tok])
        if hinge > 0.0:
            total += hinge
            sid_r = dec.tape.select(logits_id, rival)
            sid_t = dec.tape.select(logits_id, tok)
            weights[sid_r] = weights.get(sid_r, 0.0) + 1.0
            weights[sid_t] = weights.get(sid_t, 0.0) - 1.0
        hid = h2
        prev = tok
    if not want_grad:
        return total, None
    if weights:
        grad = dec.tape.backward(weights, wrt=[dec.noise_id])[dec.noise_id]
    else:
        grad = np.zeros_like(noise)
    return total, grad


def _build_objectives(model, image, seed, l2_penalty=0.1):
    """(name, value_fn, grad_fn) triples covering every attack objective."""
    rng = np.random.default_rng(seed)
    vocab_size = len(model.vocab)
    length = min(7, model.config.max_decode_len)
    tokens = tuple(int(t) for t in rng.integers(1, vocab_size, size=length))
    latent = sorted(int(p) for p in rng.choice(np.arange(1, length + 1), size=2, replace=False))
    observed = tuple(p for p in range(1, length + 1) if p not in latent)
    partial = PartialCaption(length, observed, tuple(tokens[p - 1] for p in observed))

    base_noise = rng.uniform(-0.05, 0.05, size=image.shape)
    base_noise = np.clip(image + base_noise, 0.0, 1.0) - image
    state0 = AdversarialState(image, base_noise)
    lam = l2_penalty

    specs = []

    posterior = e_step(model, partial, state0, FactorizedPosterior.uniform(partial.latent, vocab_size), 3)
    gem_terms = _pruned_terms(partial, posterior, GemConfig().prune_width)
    gem_obj = NoiseObjective(model, image, gem_terms)

    def gem_value(noise):
        return gem_obj.value(noise) - lam * float(noise @ noise)

    def gem_grad(noise):
        _, g = gem_obj.eval(noise)
        return g - 2.0 * lam * noise

    specs.append(("gem_m_step", gem_value, gem_grad))

    completion = latent_completion(model, partial, state0)
    rival = loss_augmented_infer(model, partial, state0, 1.0).tokens

    def ssvm_value(noise):
        value, _ = ssvm_objective_grad(model, partial, completion, rival,
                                       AdversarialState(image, noise), lam)
        return value

    def ssvm_grad(noise):
        _, g = ssvm_objective_grad(model, partial, completion, rival,
                                   AdversarialState(image, noise), lam)
        return g

    specs.append(("ssvm_margin", ssvm_value, ssvm_grad))

    target = tokens
    logits_obj = NoiseObjective(model, image, sequence_terms(target, 1.0), use_logits=True)

    def logits_value(noise):
        return logits_obj.value(noise) - lam * float(noise @ noise)

    def logits_grad(noise):
        _, g = logits_obj.eval(noise)
        return g - 2.0 * lam * noise

    specs.append(("max_logits", logits_value, logits_grad))

    margin_const = 10000.0

    def margin_value(noise):
        total, _ = _margin_forward(model, image, target, margin_const, noise, False)
        return total + lam * float(noise @ noise)

    def margin_grad(noise):
        _, g = _margin_forward(model, image, target, margin_const, noise, True)
        return g + 2.0 * lam * noise

    specs.append(("logit_margin", margin_value, margin_grad))

    benign = greedy_decode(model, AdversarialState.fresh(image))
    unt_obj = NoiseObjective(model, image, sequence_terms(benign, 1.0))

    def unt_value(noise):
        return unt_obj.value(noise) + lam * float(noise @ noise)

    def unt_grad(noise):
        _, g = unt_obj.eval(noise)
        return g + 2.0 * lam * noise

    specs.append(("untargeted", unt_value, unt_grad))
    return specs, base_noise


def check_objectives(model, image, seed=0, probes=10, tolerance=DEFAULT_TOLERANCE,
                     corrupt=False, step=1e-5):
    """Probes every objective's gradient at `probes` pixels.

    corrupt=True deliberately skews the analytic gradients; the check
    must then fail (negative-control hook for tests and deployment).
    """
    if probes < 1:
        raise InputError("probes must be positive")
    image = np.ascontiguousarray(image, dtype=np.float64)
    specs, base_noise = _build_objectives(model, image, seed)
    report = {"backend": BACKEND, "seed": int(seed), "tolerance": tolerance,
              "probes": probes, "corrupted": bool(corrupt), "objectives": {},
              "passed": True, "max_rel_err": 0.0}
    for name, value_fn, grad_fn in specs:
        grad = grad_fn(base_noise)
        if corrupt:
            grad = grad * 1.02 + 1e-4
        # probe the largest-magnitude components: central differences on
        # near-zero entries measure roundoff noise, not gradient quality
        order = np.argsort(-np.abs(grad), kind="stable")
        picks = order[:probes]
        worst = 0.0
        for idx in picks:
            idx = int(idx)
            fd = central_difference(value_fn, base_noise, idx, step)
            rel = abs(grad[idx] - fd) / max(abs(grad[idx]), abs(fd), 1e-10)
            worst = max(worst, rel)
        report["objectives"][name] = {"max_rel_err": worst, "probes": int(picks.size)}
        report["max_rel_err"] = max(report["max_rel_err"], worst)
        if worst > tolerance:
            report["passed"] = False
    return report
