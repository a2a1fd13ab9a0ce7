"""Decoding and search routines over the captioner.

Positions are 1-based throughout: a target of length N has positions
{1..N}, split into observed (pinned tokens) and latent (free) sets.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, GuardError, InputError
from .model import BOS, EOS, StepDecoder

ENUM_GUARD = 10**6


@dataclass(frozen=True)
class PartialCaption:
    """Length-N target with tokens pinned at the observed positions."""

    length: int
    observed: tuple  # sorted 1-based positions
    tokens: tuple    # aligned with `observed`

    def __post_init__(self):
        object.__setattr__(self, "observed", tuple(int(p) for p in self.observed))
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.length < 1:
            raise InputError("length must be positive")
        if len(self.observed) != len(self.tokens):
            raise InputError("observed positions and tokens must align")
        if len(set(self.observed)) != len(self.observed):
            raise InputError("observed positions must be distinct")
        if any(not 1 <= p <= self.length for p in self.observed):
            raise InputError("observed positions must lie in 1..length")
        if tuple(sorted(self.observed)) != self.observed:
            raise InputError("observed positions must be sorted ascending")

    @classmethod
    def from_tokens(cls, tokens):
        """Complete target: every position observed."""
        tokens = tuple(int(t) for t in tokens)
        return cls(len(tokens), tuple(range(1, len(tokens) + 1)), tokens)

    @property
    def latent(self):
        obs = set(self.observed)
        return tuple(p for p in range(1, self.length + 1) if p not in obs)

    @property
    def observed_map(self):
        return dict(zip(self.observed, self.tokens))

    @property
    def is_complete(self):
        return len(self.observed) == self.length

    def merge_tokens(self, latent_assignment):
        """Full token tuple from {latent position: token}."""
        obs = self.observed_map
        out = []
        for p in range(1, self.length + 1):
            if p in obs:
                out.append(obs[p])
            else:
                try:
                    out.append(int(latent_assignment[p]))
                except KeyError:
                    raise ContractError("latent position %d missing from assignment" % p) from None
        return tuple(out)

    def to_dict(self):
        return {"length": self.length, "observed": list(self.observed), "tokens": list(self.tokens)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["length"], tuple(d["observed"]), tuple(d["tokens"]))


def greedy_decode(model, state, max_len=None):
    """Argmax decoding from BOS; ties resolve to the lowest token index.
    Stops after emitting EOS or after max_len tokens."""
    limit = int(max_len) if max_len is not None else model.config.max_decode_len
    dec = StepDecoder(model, state.perturbed())
    h = dec.h0
    prev = BOS
    out = []
    for _ in range(limit):
        _, logp, h = dec.dist(h, prev)
        tok = int(np.argmax(logp))  # first occurrence wins, i.e. lowest index on ties
        out.append(tok)
        prev = tok
        if tok == EOS:
            break
    return tuple(out)


def latent_completion(model, partial, state, allow_empty_observed=False):
    """Sequential greedy fill of latent positions with observed tokens
    pinned; returns the full length-N sequence."""
    if not partial.observed and not allow_empty_observed:
        raise InputError("partial caption has no observed positions")
    model.validate_tokens(partial.tokens)
    dec = StepDecoder(model, state.perturbed())
    obs = partial.observed_map
    h = dec.h0
    prev = BOS
    out = []
    for pos in range(1, partial.length + 1):
        _, logp, h = dec.dist(h, prev)
        tok = obs.get(pos)
        if tok is None:
            tok = int(np.argmax(logp))
        out.append(tok)
        prev = tok
    return tuple(out)


@dataclass(frozen=True)
class LossAugmentedResult:
    tokens: tuple      # full length-N sequence
    score: float       # sum of augmented per-step scores
    mismatches: int    # observed positions where tokens differ from the target


def loss_augmented_infer(model, partial, state, mismatch_penalty):
    """Sequential maximization of logP + penalty * 1[mismatch at an
    observed position]; latent positions score plain logP."""
    model.validate_tokens(partial.tokens)
    mismatch_penalty = float(mismatch_penalty)
    if mismatch_penalty < 0:
        raise InputError("mismatch penalty must be nonnegative")
    dec = StepDecoder(model, state.perturbed())
    obs = partial.observed_map
    h = dec.h0
    prev = BOS
    out = []
    score = 0.0
    mismatches = 0
    for pos in range(1, partial.length + 1):
        _, logp, h = dec.dist(h, prev)
        target = obs.get(pos)
        if target is None:
            tok = int(np.argmax(logp))
            score += float(logp[tok])
        else:
            aug = logp + mismatch_penalty
            aug[target] -= mismatch_penalty
            tok = int(np.argmax(aug))
            score += float(aug[tok])
            if tok != target:
                mismatches += 1
        out.append(tok)
        prev = tok
    return LossAugmentedResult(tuple(out), score, mismatches)


def topk_renormalized(probs, k):
    """Top-k entries of a probability vector with weights renormalized to
    sum to one; ties break toward the lower index."""
    if k < 1:
        raise InputError("k must be positive")
    k = min(int(k), probs.shape[0])
    order = np.argsort(-probs, kind="stable")[:k]
    w = probs[order]
    total = w.sum()
    if total <= 0.0:
        raise ContractError("probability vector has no mass on its top-%d support" % k)
    return [int(i) for i in order], w / total


@dataclass
class FactorizedPosterior:
    """Independent per-position distributions over the vocabulary for
    each latent position."""

    positions: tuple  # sorted 1-based latent positions
    probs: dict       # position -> (V,) ndarray summing to 1

    def __post_init__(self):
        self.positions = tuple(int(p) for p in self.positions)
        if tuple(sorted(set(self.positions))) != self.positions:
            raise InputError("positions must be sorted and distinct")
        if set(self.probs) != set(self.positions):
            raise InputError("probs keys must match positions")
        for pos, vec in self.probs.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.ndim != 1 or vec.shape[0] < 2:
                raise InputError("probs[%d] must be a distribution vector" % pos)
            if vec.min() < 0 or abs(vec.sum() - 1.0) > 1e-8:
                raise InputError("probs[%d] is not normalized" % pos)
            self.probs[pos] = vec

    @classmethod
    def uniform(cls, positions, vocab_size):
        return cls(tuple(positions), {int(p): np.full(vocab_size, 1.0 / vocab_size)
                                      for p in positions})

    def top_support(self, position, width):
        return topk_renormalized(self.probs[position], width)

    def entropy(self):
        total = 0.0
        for vec in self.probs.values():
            nz = vec[vec > 0]
            total -= float(np.sum(nz * np.log(nz)))
        return total


def enumerate_latent_configs(posterior, width, up_to=None, guard=ENUM_GUARD):
    """Cartesian product of per-position top-`width` supports for latent
    positions <= up_to (all of them when up_to is None).

    Returns (positions, configs) where configs is a list of
    (tokens aligned with positions, weight); weights are products of the
    per-position renormalized top-k weights and sum to one.
    """
    if width < 1:
        raise InputError("width must be positive")
    positions = tuple(p for p in posterior.positions if up_to is None or p <= up_to)
    if positions and width ** len(positions) > guard:
        raise GuardError("pruned configuration count %d^%d exceeds guard %d"
                         % (width, len(positions), guard))
    configs = [((), 1.0)]
    for pos in positions:
        toks, ws = posterior.top_support(pos, width)
        configs = [(c + (t,), w * float(wt)) for c, w in configs for t, wt in zip(toks, ws)]
    return positions, configs


def enumerate_joint_logprobs(model, partial, state, guard=ENUM_GUARD):
    """All |V|^|latent| completions with their joint log-probabilities.

    Shares prefix forward passes via depth-first traversal; returns
    (list of latent token tuples aligned with partial.latent, ndarray of
    joint log-probs in the same order).
    """
    vocab_size = len(model.vocab)
    n_latent = len(partial.latent)
    if vocab_size ** n_latent > guard:
        raise GuardError("latent space %d^%d exceeds guard %d" % (vocab_size, n_latent, guard))
    model.validate_tokens(partial.tokens)
    dec = StepDecoder(model, state.perturbed())
    obs = partial.observed_map
    completions = []
    logps = []
    chosen = []

    def walk(pos, h, prev, acc):
        if pos > partial.length:
            completions.append(tuple(chosen))
            logps.append(acc)
            return
        _, logp, h2 = dec.dist(h, prev)
        tok = obs.get(pos)
        if tok is not None:
            walk(pos + 1, h2, tok, acc + float(logp[tok]))
        else:
            for k in range(vocab_size):
                chosen.append(k)
                walk(pos + 1, h2, k, acc + float(logp[k]))
                chosen.pop()

    walk(1, dec.h0, BOS, 0.0)
    return completions, np.asarray(logps)


def logsumexp(values):
    values = np.asarray(values, dtype=np.float64)
    m = values.max()
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.exp(values - m).sum()))


def marginal_logprob_oracle(model, partial, state, guard=ENUM_GUARD):
    """Exact log P(observed tokens) by full enumeration of the latent
    positions.  Intended for tests and tiny instances; guarded."""
    _, logps = enumerate_joint_logprobs(model, partial, state, guard)
    return logsumexp(logps)
