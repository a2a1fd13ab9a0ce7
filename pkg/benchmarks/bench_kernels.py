"""Compiled-vs-python backend benchmark.

Times each numeric kernel at the reference model's shapes, then runs an
identical attack end to end under both backends in subprocesses (the
backend is fixed at import time, so the macro comparison needs separate
interpreters).  Usage:

    python3 benchmarks/bench_kernels.py [--repeats N] [--macro-iterations N]
                                        [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import time
import textwrap

import numpy as np

import capattack.numerics._kernels_py as pyk

try:
    import capattack.numerics._kernels as ck
except ImportError:
    ck = None

HIDDEN = 32
GRU_IN = 48   # embedding (16) + image feature (32) under step feeding
VOCAB = 20


def _micro_cases(rng):
    w = rng.normal(0.0, 1.0, (VOCAB, HIDDEN))
    x = rng.normal(0.0, 1.0, HIDDEN)
    b = rng.normal(0.0, 1.0, VOCAB)
    gy = rng.normal(0.0, 1.0, VOCAB)
    z = rng.normal(0.0, 3.0, VOCAB)
    o = pyk.log_softmax_fwd(z)
    gx = rng.normal(0.0, 1.0, GRU_IN)
    gh = rng.normal(0.0, 1.0, HIDDEN)
    ws = [rng.normal(0.0, 1.0, s) for s in
          ((HIDDEN, GRU_IN), (HIDDEN, HIDDEN), (HIDDEN,)) * 3]
    gru_args = (gx, gh) + tuple(ws)
    h2, r, zz, c = pyk.gru_fwd(*gru_args)
    gru_bwd_args = (gx, gh, r, zz, c, ws[0], ws[1], ws[3], ws[4], ws[6], ws[7],
                    rng.normal(0.0, 1.0, HIDDEN), True, True, True)
    return [
        ("dense_fwd", (w, x, b)),
        ("dense_bwd", (w, x, gy, True, True)),
        ("tanh_fwd", (rng.normal(0.0, 1.0, HIDDEN),)),
        ("log_softmax_fwd", (z,)),
        ("log_softmax_bwd", (o, gy)),
        ("gru_fwd", gru_args),
        ("gru_bwd", gru_bwd_args),
    ]


def _time_call(fn, args, repeats):
    best = np.inf
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best * 1e6  # microseconds


def run_micro(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for name, args in _micro_cases(rng):
        py_us = _time_call(getattr(pyk, name), args, repeats)
        row = {"kernel": name, "python_us": py_us}
        if ck is not None:
            c_us = _time_call(getattr(ck, name), args, repeats)
            row["compiled_us"] = c_us
            row["speedup"] = py_us / c_us
        rows.append(row)
    return rows


_MACRO_SNIPPET = textwrap.dedent("""
    import json, time
    import numpy as np
    from capattack.data import caption_for, default_vocab
    from capattack.gem import GemConfig, gem_attack
    from capattack.inference import PartialCaption
    from capattack.model import CaptionModel, ModelConfig, init_params
    from capattack.numerics.kernels import BACKEND

    config = ModelConfig()
    vocab = default_vocab()
    model = CaptionModel(config, vocab, init_params(config, len(vocab), 0))
    image = np.random.default_rng(1).uniform(0.1, 0.9, config.pixels)
    full = caption_for(vocab, "dark", "square", "left")
    observed = tuple(p for p in range(1, 8) if p not in (2, 6))
    target = PartialCaption(7, observed, tuple(full[p - 1] for p in observed))
    cfg = GemConfig(iterations=%d, early_stop=False)
    t0 = time.perf_counter()
    out = gem_attack(model, image, target, cfg)
    print(json.dumps({
        "backend": BACKEND,
        "seconds": time.perf_counter() - t0,
        "eps_norm": float(np.linalg.norm(out.noise)),
    }))
""")


def run_macro(iterations):
    results = {}
    for backend in ("python", "compiled"):
        if backend == "compiled" and ck is None:
            continue
        env = dict(os.environ, CAPATTACK_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, "-c", _MACRO_SNIPPET % iterations],
            capture_output=True, text=True, env=env, check=True,
        )
        results[backend] = json.loads(proc.stdout.strip().splitlines()[-1])
    return results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=2000,
                    help="micro-benchmark calls per timing pass")
    ap.add_argument("--macro-iterations", type=int, default=10,
                    help="attack iterations for the end-to-end comparison")
    ap.add_argument("--json", default=None, help="write results to this path")
    args = ap.parse_args(argv)

    if ck is None:
        print("compiled extension not importable; timing the python backend only")

    micro = run_micro(args.repeats)
    print("%-17s %12s %12s %9s" % ("kernel", "python (us)", "compiled (us)", "speedup"))
    for row in micro:
        if "compiled_us" in row:
            print("%-17s %12.2f %12.2f %8.1fx"
                  % (row["kernel"], row["python_us"], row["compiled_us"], row["speedup"]))
        else:
            print("%-17s %12.2f %12s %9s" % (row["kernel"], row["python_us"], "-", "-"))

    macro = run_macro(args.macro_iterations)
    print()
    for backend, res in sorted(macro.items()):
        print("attack (%d iterations, %s backend): %.2fs"
              % (args.macro_iterations, backend, res["seconds"]))
    if len(macro) == 2:
        agree = abs(macro["python"]["eps_norm"] - macro["compiled"]["eps_norm"])
        print("end-to-end speedup %.1fx; |eps python - eps compiled| = %.3g"
              % (macro["python"]["seconds"] / macro["compiled"]["seconds"], agree))

    if args.json:
        with open(args.json, "w", encoding="ascii") as fp:
            json.dump({"micro": micro, "macro": macro}, fp, indent=2)
            fp.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
