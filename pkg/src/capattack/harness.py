"""Evaluation harness: target construction, metrics, batch experiments.

Evaluation protocol: each attacked image draws its target caption from a
different image's ground truth, so targets are wrong-by-construction for
the attacked image.  Success and the precision/recall pair are measured
on observed positions only:

- covered: observed positions that fall inside the decoded caption
- matches: covered positions whose decoded token equals the target
- succ_sign = 1 iff every observed position is covered and matched
- precision = matches / covered (0 when nothing is covered)
- recall = matches / |observed|

so precision >= recall >= succ_sign always holds.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
import json

import numpy as np

from .errors import InputError
from .inference import PartialCaption, greedy_decode

METHODS = ("gem", "lssvm", "max_logits", "logit_margin", "untargeted")


@dataclass(frozen=True)
class AttackMetrics:
    succ_sign: int
    precision: float
    recall: float
    eps_norm: float

    def to_dict(self):
        return {
            "succ_sign": self.succ_sign,
            "precision": self.precision,
            "recall": self.recall,
            "eps_norm": self.eps_norm,
        }


@dataclass
class AttackOutcome:
    """Uniform attack result: final noise, the adversarial caption, the
    observed-position metrics (None for untargeted runs), the iteration
    trace, and wall time."""

    noise: np.ndarray
    caption: tuple
    metrics: AttackMetrics
    trace: list
    wall_time: float
    success: bool
    extras: dict


def observed_hits(partial, predicted):
    """(covered, matches) of a decoded sequence against the observed positions."""
    covered = 0
    matches = 0
    n = len(predicted)
    for pos, tok in zip(partial.observed, partial.tokens):
        if pos <= n:
            covered += 1
            if predicted[pos - 1] == tok:
                matches += 1
    return covered, matches


def compute_metrics(partial, predicted, noise):
    if not partial.observed:
        raise InputError("metrics need at least one observed position")
    covered, matches = observed_hits(partial, predicted)
    n_obs = len(partial.observed)
    succ = 1 if matches == n_obs else 0
    precision = matches / covered if covered else 0.0
    recall = matches / n_obs
    return AttackMetrics(succ, precision, recall, float(np.linalg.norm(noise)))


def matches_observed(partial, predicted):
    _, matches = observed_hits(partial, predicted)
    return matches == len(partial.observed)


# ---- target construction ----


def make_partial_targets(source, mode, k, seed, vocab, pin_eos=False):
    """Builds a PartialCaption from a source caption.

    mode "n_latent": k in {1,2,3} positions become latent, drawn
    uniformly; position 1 is protected (kept observed) when its token is
    the article "a".
    mode "n_observed": k in {1,2,3} observed positions drawn uniformly
    from 2..min(7,N); the position-1 article is additionally observed.
    pin_eos additionally observes the final position.
    """
    source = tuple(int(t) for t in source)
    n = len(source)
    if n < 1:
        raise InputError("source caption is empty")
    if mode not in ("n_latent", "n_observed"):
        raise InputError("mode must be n_latent or n_observed")
    if k not in (1, 2, 3):
        raise InputError("k must be in {1,2,3}")
    protected_first = vocab.token(source[0]) == "a"
    rng = np.random.default_rng(seed)

    if mode == "n_latent":
        pool = [p for p in range(1, n + 1) if not (p == 1 and protected_first)]
        if pin_eos:
            pool = [p for p in pool if p != n]
        if k > len(pool):
            raise InputError("source too short to hide %d positions" % k)
        latent = set(int(p) for p in rng.choice(pool, size=k, replace=False))
        observed = [p for p in range(1, n + 1) if p not in latent]
    else:
        pool = list(range(2, min(7, n) + 1))
        if pin_eos and n in pool:
            pool.remove(n)
        if k > len(pool):
            raise InputError("source too short to observe %d positions" % k)
        chosen = set(int(p) for p in rng.choice(pool, size=k, replace=False))
        if protected_first:
            chosen.add(1)
        if pin_eos:
            chosen.add(n)
        observed = sorted(chosen)

    tokens = tuple(source[p - 1] for p in observed)
    return PartialCaption(n, tuple(observed), tokens)


def select_eval_pairs(dataset, n, seed):
    """n (image, target caption) pairs; targets come from other images
    with a different caption."""
    if len(dataset) < 2:
        raise InputError("need at least two samples to cross captions")
    rng = np.random.default_rng(seed)
    total = len(dataset)
    replacing = n > total
    chosen = rng.choice(total, size=n, replace=replacing)
    captions = [cap for _, cap in dataset]
    pairs = []
    for i in chosen:
        i = int(i)
        own = captions[i]
        candidates = [j for j in range(total) if captions[j] != own]
        if not candidates:
            raise InputError("dataset has a single caption class; no cross targets exist")
        j = int(candidates[int(rng.integers(len(candidates)))])
        pairs.append((dataset[i][0], captions[j]))
    return pairs


def exact_match_rate(model, samples):
    """Fraction of samples whose greedy decode equals the reference caption."""
    from .model import AdversarialState

    hits = 0
    total = 0
    for img, caption in samples:
        total += 1
        if greedy_decode(model, AdversarialState.fresh(img)) == tuple(caption):
            hits += 1
    return hits / total if total else 0.0


# ---- batch experiments ----


def default_config(method):
    method = method.replace("-", "_")
    if method == "gem":
        from .gem import GemConfig
        return GemConfig()
    if method == "lssvm":
        from .lssvm import LssvmConfig
        return LssvmConfig()
    if method in ("max_logits", "logit_margin", "untargeted"):
        from .baselines import BaselineConfig
        return BaselineConfig()
    raise InputError("unknown method %r (expected one of %r)" % (method, METHODS))


def _complete_tokens(target):
    if isinstance(target, PartialCaption):
        if not target.is_complete:
            raise InputError("this method needs a complete target caption")
        return target.tokens
    return tuple(int(t) for t in target)


def _as_partial(target):
    if isinstance(target, PartialCaption):
        return target
    return PartialCaption.from_tokens(tuple(int(t) for t in target))


def _run_single(model, image, target, method, config):
    method = method.replace("-", "_")
    if method == "gem":
        from .gem import gem_attack
        return gem_attack(model, image, _as_partial(target), config)
    if method == "lssvm":
        from .lssvm import lssvm_attack
        return lssvm_attack(model, image, _as_partial(target), config)
    if method == "max_logits":
        from .baselines import logits_attack
        return logits_attack(model, image, _complete_tokens(target), config)
    if method == "logit_margin":
        from .baselines import logit_margin_attack
        return logit_margin_attack(model, image, _complete_tokens(target), config)
    if method == "untargeted":
        from .baselines import untargeted_attack
        return untargeted_attack(model, image, config)
    raise InputError("unknown method %r (expected one of %r)" % (method, METHODS))


def _worker(payload):
    model, image, target, method, config, index = payload
    try:
        outcome = _run_single(model, image, target, method, config)
        return index, outcome, None
    except Exception as exc:  # record, never abort the batch
        return index, None, "%s: %s" % (type(exc).__name__, exc)


@dataclass
class ExperimentReport:
    method: str
    config: dict
    aggregates: dict
    outcomes: list
    meta: dict

    def to_dict(self):
        return {
            "method": self.method,
            "config": self.config,
            "aggregates": self.aggregates,
            "outcomes": self.outcomes,
            "meta": self.meta,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(self.to_dict(), fp, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fp:
            d = json.load(fp)
        return cls(d["method"], d["config"], d["aggregates"], d["outcomes"], d.get("meta", {}))


def _record_from(index, target, outcome, error):
    if target is not None:
        target = _as_partial(target)
    if error is not None:
        return {
            "index": index,
            "target": target.to_dict() if target is not None else None,
            "success": False,
            "eps_norm": 0.0,
            "metrics": None,
            "caption": None,
            "wall_time": 0.0,
            "error": error,
            "extras": {},
        }
    return {
        "index": index,
        "target": target.to_dict() if target is not None else None,
        "success": bool(outcome.success),
        "eps_norm": float(np.linalg.norm(outcome.noise)),
        "metrics": outcome.metrics.to_dict() if outcome.metrics is not None else None,
        "caption": list(outcome.caption),
        "wall_time": outcome.wall_time,
        "error": None,
        "extras": {k: v for k, v in outcome.extras.items()},
    }


def aggregate_records(records, targeted):
    n = len(records)
    if n == 0:
        raise InputError("no records to aggregate")
    sr = sum(1 for r in records if r["success"]) / n
    eps = sum(r["eps_norm"] for r in records) / n
    if targeted:
        # failed/errored records contribute zeros, keeping means comparable
        precision = sum((r["metrics"] or {}).get("precision", 0.0) for r in records) / n
        recall = sum((r["metrics"] or {}).get("recall", 0.0) for r in records) / n
    else:
        precision = None
        recall = None
    return {"sr": sr, "precision": precision, "recall": recall, "eps_norm": eps}


def run_experiment(model, images, targets, method, config=None, jobs=1, meta=None,
                   return_outcomes=False):
    """Runs one attack per (image, target) pair and aggregates metrics.

    targets may be None for method "untargeted".  Per-target exceptions
    are recorded in the outcome list and never abort the batch.  With
    jobs > 1 attacks run in separate processes; results are identical to
    the sequential order because each attack is deterministic.  With
    return_outcomes=True also returns the raw AttackOutcome list (None
    entries where the attack errored) so callers can save noise arrays.
    """
    method = method.replace("-", "_")
    if method not in METHODS:
        raise InputError("unknown method %r (expected one of %r)" % (method, METHODS))
    untargeted = method == "untargeted"
    if untargeted:
        targets = [None] * len(images)
    if targets is None or len(images) != len(targets):
        raise InputError("images and targets must align")
    if config is None:
        config = default_config(method)

    payloads = [
        (model, images[i], targets[i], method, config, i)
        for i in range(len(images))
    ]
    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_worker, payloads, chunksize=1))
    else:
        results = [_worker(p) for p in payloads]

    records = [_record_from(i, targets[i], outcome, err) for i, outcome, err in results]
    report_meta = {"n": len(records), "jobs": jobs, "elapsed": time.perf_counter() - t0}
    if meta:
        report_meta.update(meta)
    report = ExperimentReport(
        method=method,
        config=_config_dict(config),
        aggregates=aggregate_records(records, targeted=not untargeted),
        outcomes=records,
        meta=report_meta,
    )
    if return_outcomes:
        return report, [outcome for _, outcome, _ in results]
    return report


def _config_dict(config):
    from dataclasses import asdict, is_dataclass

    if is_dataclass(config):
        return asdict(config)
    return dict(config)


def lambda_sweep(model, images, targets, method, lam_grid, config=None, jobs=1):
    """run_experiment per l2 penalty value; returns a list of
    (l2_penalty, ExperimentReport) in grid order."""
    if config is None:
        config = default_config(method)
    points = []
    for lam in lam_grid:
        cfg = replace(config, l2_penalty=float(lam))
        points.append((float(lam), run_experiment(model, images, targets, method, cfg, jobs=jobs)))
    return points


def location_sr_stats(report):
    """Success rate per observed-word location for one-observed-word
    targets (observed set {1, loc} or {loc})."""
    stats = {}
    for rec in report.outcomes:
        tgt = rec.get("target")
        if not tgt:
            raise InputError("record %r has no target" % rec.get("index"))
        locs = [p for p in tgt["observed"] if p != 1]
        if len(locs) != 1:
            raise InputError("location stats need exactly one observed word besides the article")
        loc = locs[0]
        hits, count = stats.get(loc, (0, 0))
        stats[loc] = (hits + (1 if rec["success"] else 0), count + 1)
    return {
        loc: {"sr": hits / count, "count": count}
        for loc, (hits, count) in sorted(stats.items())
    }


def kendall_tau(xs, ys):
    """Kendall tau-b; 0.0 when either sequence is fully tied."""
    if len(xs) != len(ys):
        raise InputError("kendall_tau needs equal-length sequences")
    n = len(xs)
    nc = nd = 0
    ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = (xs[i] > xs[j]) - (xs[i] < xs[j])
            dy = (ys[i] > ys[j]) - (ys[i] < ys[j])
            if dx == 0 and dy == 0:
                ties_x += 1
                ties_y += 1
            elif dx == 0:
                ties_x += 1
            elif dy == 0:
                ties_y += 1
            elif dx == dy:
                nc += 1
            else:
                nd += 1
    n0 = n * (n - 1) // 2
    denom = ((n0 - ties_x) * (n0 - ties_y)) ** 0.5
    if denom == 0:
        return 0.0
    return (nc - nd) / denom
