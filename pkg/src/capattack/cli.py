"""Command line interface.

Subcommands:
  gen-data   render a synthetic shape-caption dataset to disk
  train      fit the reference captioner on a dataset directory
  attack     run an attack method against a trained checkpoint
  gradcheck  finite-difference audit of the analytic gradients

Exit codes: 0 success, 1 runtime/input failure, 2 usage error.
Option precedence: built-in defaults < --config JSON file < explicit flags.
Seeds resolve as: --seed flag, else CAPATTACK_SEED env var, else 0.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .baselines import BaselineConfig
from .data import default_vocab, flat_to_image, gen_synthetic, load_dataset, read_pgm, save_dataset, write_pgm
from .errors import CapAttackError, InputError
from .gem import GemConfig
from .gradcheck import check_objectives
from .harness import METHODS, exact_match_rate, run_experiment
from .inference import PartialCaption
from .lssvm import LssvmConfig
from .model import (
    EOS,
    CaptionModel,
    ModelConfig,
    holdout_split,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_toy,
)
from .numerics import tensorio
from .numerics.kernels import BACKEND

_CONFIG_CLASSES = {
    "gem": GemConfig,
    "lssvm": LssvmConfig,
    "max_logits": BaselineConfig,
    "logit_margin": BaselineConfig,
    "untargeted": BaselineConfig,
}

# CLI flag -> config dataclass field, per method family
_FLAG_FIELDS = {
    "l2_penalty": {"gem", "lssvm", "max_logits", "logit_margin", "untargeted"},
    "learning_rate": {"gem", "lssvm", "max_logits", "logit_margin", "untargeted"},
    "iterations": {"gem", "max_logits", "logit_margin", "untargeted"},
    "outer_iterations": {"lssvm"},
    "inner_iterations": {"lssvm"},
    "mismatch_penalty": {"lssvm"},
    "prune_width": {"gem"},
    "adam_steps": {"gem", "lssvm"},
    "box_mode": {"max_logits", "logit_margin", "untargeted"},
}


def _resolve_seed(flag_value):
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("CAPATTACK_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise InputError("CAPATTACK_SEED must be an integer, got %r" % env)
    return 0


def _load_config_file(path):
    with open(path, "r", encoding="ascii") as fp:
        data = json.load(fp)
    if not isinstance(data, dict):
        raise InputError("config file must hold a JSON object")
    return data


def _write_resolved(out_dir, command, payload):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"tool": "capattack", "version": __version__, "command": command,
           "backend": BACKEND}
    doc.update(payload)
    path = os.path.join(out_dir, "resolved_config.json")
    with open(path, "w", encoding="ascii") as fp:
        json.dump(doc, fp, indent=2, sort_keys=True)
        fp.write("\n")
    return path


def _build_method_config(method, file_cfg, args):
    cls = _CONFIG_CLASSES[method]
    fields = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in file_cfg.items():
        if key not in fields:
            raise InputError("config key %r does not apply to method %r" % (key, method))
        kwargs[key] = value
    for flag, methods in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if method not in methods:
            raise InputError("--%s does not apply to method %r" % (flag.replace("_", "-"), method))
        kwargs[flag] = value
    return cls(**kwargs)


def _parse_target_template(template, vocab, pin_eos):
    """Parses "a _ square on the _ _" style strings; `_` marks a latent
    position. Positions are 1-based; with --pin-eos the final position is
    forced to <eos> when the template leaves it latent."""
    words = template.split()
    if not words:
        raise InputError("empty target template")
    pairs = []
    for pos, word in enumerate(words, start=1):
        if word == "_":
            continue
        pairs.append((pos, vocab.index(word)))
    length = len(words)
    if pin_eos and all(pos != length for pos, _ in pairs):
        pairs.append((length, EOS))
    if not pairs:
        raise InputError("target template %r has no observed positions" % template)
    pairs.sort()
    return PartialCaption(length, tuple(p for p, _ in pairs), tuple(t for _, t in pairs))


def _load_images(paths, side):
    images = []
    for path in paths:
        img = read_pgm(path)
        if img.shape != (side, side):
            raise InputError("image %s is %dx%d but the model expects %dx%d"
                             % (path, img.shape[0], img.shape[1], side, side))
        images.append(img.reshape(-1))
    return images


def cmd_gen_data(args):
    seed = _resolve_seed(args.seed)
    dataset = gen_synthetic(args.n, seed)
    save_dataset(dataset, args.out)
    _write_resolved(args.out, "gen-data", {"n": args.n, "seed": seed})
    print("wrote %d samples to %s" % (len(dataset), args.out))
    return 0


def cmd_train(args):
    seed = _resolve_seed(args.seed)
    defaults = {"epochs": 30, "learning_rate": 0.008, "holdout_fraction": 0.1,
                "feed_mode": "step_feed", "feature_dim": 32, "hidden_dim": 32,
                "embed_dim": 16, "max_decode_len": 12}
    resolved = dict(defaults)
    if args.config:
        file_cfg = _load_config_file(args.config)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise InputError("unknown train config keys: %s" % ", ".join(sorted(unknown)))
        resolved.update(file_cfg)
    for key in ("epochs", "learning_rate", "holdout_fraction", "feed_mode"):
        value = getattr(args, key)
        if value is not None:
            resolved[key] = value

    dataset = load_dataset(args.data)
    config = ModelConfig(
        image_side=dataset.side,
        feature_dim=int(resolved["feature_dim"]),
        hidden_dim=int(resolved["hidden_dim"]),
        embed_dim=int(resolved["embed_dim"]),
        feed_mode=resolved["feed_mode"],
        max_decode_len=int(resolved["max_decode_len"]),
    )
    params = train_toy(
        dataset,
        model_config=config,
        epochs=int(resolved["epochs"]),
        seed=seed,
        learning_rate=float(resolved["learning_rate"]),
        holdout_fraction=float(resolved["holdout_fraction"]),
        log=print if args.verbose else None,
    )
    model = CaptionModel(config, dataset.vocab, params)
    _, hold_idx = holdout_split(len(dataset), float(resolved["holdout_fraction"]), seed)
    holdout = [dataset[i] for i in hold_idx]
    em = exact_match_rate(model, holdout) if holdout else float("nan")
    save_checkpoint(args.out, model, extra={
        "held_out_exact_match": em,
        "train_seed": seed,
        "epochs": int(resolved["epochs"]),
        "dataset_size": len(dataset),
    })
    _write_resolved(args.out, "train", {"seed": seed, "data": args.data, **resolved})
    print("trained %s model (%d samples, %d epochs): held-out exact match %.3f"
          % (config.feed_mode, len(dataset), int(resolved["epochs"]), em))
    return 0


def cmd_attack(args):
    seed = _resolve_seed(args.seed)
    method = args.method.replace("-", "_")
    if method not in METHODS:
        raise InputError("unknown method %r" % args.method)
    model = load_checkpoint(args.checkpoint)
    images = _load_images(args.image, model.config.image_side)

    file_cfg = _load_config_file(args.config) if args.config else {}
    config = _build_method_config(method, file_cfg, args)

    if method == "untargeted":
        if args.target:
            raise InputError("--target does not apply to the untargeted method")
        targets = None
    else:
        if not args.target:
            raise InputError("method %r needs at least one --target" % args.method)
        templates = list(args.target)
        if len(templates) == 1 and len(images) > 1:
            templates = templates * len(images)
        if len(templates) != len(images):
            raise InputError("got %d targets for %d images" % (len(templates), len(images)))
        targets = [_parse_target_template(s, model.vocab, args.pin_eos) for s in templates]

    report, outcomes = run_experiment(model, images, targets, method, config,
                                      jobs=args.jobs, meta={"seed": seed},
                                      return_outcomes=True)
    os.makedirs(args.out, exist_ok=True)
    report.save(os.path.join(args.out, "report.json"))
    _write_resolved(args.out, "attack", {
        "seed": seed,
        "checkpoint": args.checkpoint,
        "method": method,
        "jobs": args.jobs,
        "pin_eos": bool(args.pin_eos),
        "images": list(args.image),
        "targets": list(args.target) if args.target else [],
        "config": dataclasses.asdict(config),
    })

    side = model.config.image_side
    for i, (image, outcome) in enumerate(zip(images, outcomes)):
        record = report.outcomes[i]
        if outcome is None:
            print("[%03d] error: %s" % (i, record.get("error")))
            continue
        sub = os.path.join(args.out, "attack_%03d" % i)
        os.makedirs(sub, exist_ok=True)
        adversarial = np.clip(image + outcome.noise, 0.0, 1.0)
        write_pgm(os.path.join(sub, "adversarial.pgm"), flat_to_image(adversarial, side))
        tensorio.save_tensors(os.path.join(sub, "noise.capt"), [outcome.noise])
        with open(os.path.join(sub, "outcome.json"), "w", encoding="ascii") as fp:
            json.dump(record, fp, indent=2, sort_keys=True)
            fp.write("\n")
        caption = " ".join(model.vocab.to_strings(outcome.caption))
        print("[%03d] success=%s eps_norm=%.4f caption=%r"
              % (i, outcome.success, float(np.linalg.norm(outcome.noise)), caption))

    agg = report.aggregates
    line = "aggregate: sr=%.3f mean_eps=%.4f" % (agg["sr"], agg["eps_norm"])
    if agg.get("precision") is not None:
        line += " precision=%.3f recall=%.3f" % (agg["precision"], agg["recall"])
    print(line)
    return 0


def cmd_gradcheck(args):
    seed = _resolve_seed(args.seed)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        config = ModelConfig()
        vocab = default_vocab()
        model = CaptionModel(config, vocab, init_params(config, len(vocab), seed))
    rng = np.random.default_rng(seed)
    image = rng.uniform(0.1, 0.9, size=model.config.pixels)
    report = check_objectives(model, image, seed=seed, probes=args.probes,
                              corrupt=args.corrupt_gradients)
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="ascii") as fp:
            json.dump(report, fp, indent=2, sort_keys=True)
            fp.write("\n")
    if not report["passed"]:
        print("gradcheck FAILED (max rel err %.3g)" % report["max_rel_err"], file=sys.stderr)
        return 1
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="capattack",
        description="Targeted partial-caption attacks on a toy captioning model.",
    )
    parser.add_argument("--version", action="version", version="capattack %s" % __version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    p.add_argument("--n", type=int, default=180, help="number of samples")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the reference captioner")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--holdout-fraction", dest="holdout_fraction", type=float, default=None)
    p.add_argument("--feed-mode", dest="feed_mode", choices=("init_feed", "step_feed"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with train settings")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a trained checkpoint")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("--image", action="append", required=True, help="input PGM (repeatable)")
    p.add_argument("--target", action="append", default=None,
                   help="caption template; use _ for latent positions (repeatable)")
    p.add_argument("--method", required=True,
                   choices=("gem", "lssvm", "max-logits", "logit-margin", "untargeted"))
    p.add_argument("--lambda", dest="l2_penalty", type=float, default=None,
                   help="L2 penalty weight on the noise")
    p.add_argument("--zeta", dest="mismatch_penalty", type=float, default=None,
                   help="per-position mismatch penalty (lssvm)")
    p.add_argument("--iters", dest="iterations", type=int, default=None)
    p.add_argument("--outer-iters", dest="outer_iterations", type=int, default=None)
    p.add_argument("--inner-iters", dest="inner_iterations", type=int, default=None)
    p.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--prune-width", dest="prune_width", type=int, default=None)
    p.add_argument("--adam-steps", dest="adam_steps", type=int, default=None)
    p.add_argument("--box-mode", dest="box_mode", choices=("clip", "arctanh"), default=None,
                   help="box constraint handling (baseline methods)")
    p.add_argument("--pin-eos", dest="pin_eos", action="store_true",
                   help="observe <eos> at the final template position when latent")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with method settings")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--checkpoint", default=None, help="optional checkpoint directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--probes", type=int, default=10)
    p.add_argument("--out", default=None, help="optional JSON report path")
    p.add_argument("--corrupt-gradients", dest="corrupt_gradients", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CapAttackError as exc:
        print("capattack: error: %s" % exc, file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print("capattack: error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
