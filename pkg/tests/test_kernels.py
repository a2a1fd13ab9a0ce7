"""Backend parity: the compiled extension and the pure-python kernels must
agree to accumulation-order precision on every primitive."""

import os
import subprocess
import sys

import numpy as np
import pytest

import capattack.numerics._kernels_py as pyk
from capattack.errors import DimensionError
from capattack.numerics import kernels

try:
    import capattack.numerics._kernels as ck
except ImportError:
    ck = None

needs_compiled = pytest.mark.skipif(ck is None, reason="compiled extension unavailable")

RTOL = 1e-12
ATOL = 1e-13


def _rand(rng, *shape):
    return rng.normal(0.0, 1.0, shape)


def _pair(fn_a, fn_b, *args):
    out_a = fn_a(*args)
    out_b = fn_b(*args)
    if not isinstance(out_a, tuple):
        out_a, out_b = (out_a,), (out_b,)
    assert len(out_a) == len(out_b)
    for a, b in zip(out_a, out_b):
        if a is None or b is None:
            assert a is None and b is None
            continue
        if isinstance(a, tuple):
            for ai, bi in zip(a, b):
                np.testing.assert_allclose(ai, bi, rtol=RTOL, atol=ATOL)
        else:
            np.testing.assert_allclose(a, b, rtol=RTOL, atol=ATOL)


@needs_compiled
def test_dense_parity():
    rng = np.random.default_rng(0)
    for m, n in ((4, 7), (1, 1), (16, 3)):
        w, x, b = _rand(rng, m, n), _rand(rng, n), _rand(rng, m)
        _pair(ck.dense_fwd, pyk.dense_fwd, w, x, b)
        gy = _rand(rng, m)
        for need_w, need_x in ((True, True), (True, False), (False, True)):
            _pair(ck.dense_bwd, pyk.dense_bwd, w, x, gy, need_w, need_x)


@needs_compiled
def test_tanh_parity():
    rng = np.random.default_rng(1)
    x = _rand(rng, 33) * 3
    _pair(ck.tanh_fwd, pyk.tanh_fwd, x)
    y = np.tanh(x)
    _pair(ck.tanh_bwd, pyk.tanh_bwd, y, _rand(rng, 33))


@needs_compiled
def test_log_softmax_parity():
    rng = np.random.default_rng(2)
    z = _rand(rng, 20) * 8
    _pair(ck.log_softmax_fwd, pyk.log_softmax_fwd, z)
    o = pyk.log_softmax_fwd(z)
    _pair(ck.log_softmax_bwd, pyk.log_softmax_bwd, o, _rand(rng, 20))


@needs_compiled
def test_gru_parity():
    rng = np.random.default_rng(3)
    dx, dh = 5, 4
    x, h = _rand(rng, dx), _rand(rng, dh)
    ws = dict(
        wr=_rand(rng, dh, dx), ur=_rand(rng, dh, dh), br=_rand(rng, dh),
        wz=_rand(rng, dh, dx), uz=_rand(rng, dh, dh), bz=_rand(rng, dh),
        wn=_rand(rng, dh, dx), un=_rand(rng, dh, dh), bn=_rand(rng, dh),
    )
    args = (x, h, ws["wr"], ws["ur"], ws["br"], ws["wz"], ws["uz"], ws["bz"],
            ws["wn"], ws["un"], ws["bn"])
    _pair(ck.gru_fwd, pyk.gru_fwd, *args)
    h2, r, z, c = pyk.gru_fwd(*args)
    gh2 = _rand(rng, dh)
    for need in ((True, True, True), (True, False, False), (False, True, False)):
        _pair(
            ck.gru_bwd, pyk.gru_bwd,
            x, h, r, z, c, ws["wr"], ws["ur"], ws["wz"], ws["uz"], ws["wn"],
            ws["un"], gh2, *need
        )


def test_gru_fd_gradients():
    # independent oracle: central differences through the python kernel
    rng = np.random.default_rng(4)
    dx, dh = 3, 4
    x, h = _rand(rng, dx), _rand(rng, dh)
    ws = [_rand(rng, dh, dx), _rand(rng, dh, dh), _rand(rng, dh),
          _rand(rng, dh, dx), _rand(rng, dh, dh), _rand(rng, dh),
          _rand(rng, dh, dx), _rand(rng, dh, dh), _rand(rng, dh)]
    gh2 = _rand(rng, dh)

    def scalar(xv, hv):
        h2, _, _, _ = pyk.gru_fwd(xv, hv, *ws)
        return float(gh2 @ h2)

    h2, r, z, c = pyk.gru_fwd(x, h, *ws)
    gx, gh, _ = pyk.gru_bwd(x, h, r, z, c, ws[0], ws[1], ws[3], ws[4], ws[6],
                            ws[7], gh2, True, True, False)
    eps = 1e-6
    for i in range(dx):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        fd = (scalar(xp, h) - scalar(xm, h)) / (2 * eps)
        assert abs(fd - gx[i]) < 1e-7
    for i in range(dh):
        hp, hm = h.copy(), h.copy()
        hp[i] += eps
        hm[i] -= eps
        fd = (scalar(x, hp) - scalar(x, hm)) / (2 * eps)
        assert abs(fd - gh[i]) < 1e-7


def test_log_softmax_normalizes():
    rng = np.random.default_rng(5)
    z = _rand(rng, 11) * 30
    o = kernels.log_softmax_fwd(z)
    assert abs(np.exp(o).sum() - 1.0) < 1e-12
    # shift invariance
    o2 = kernels.log_softmax_fwd(z + 123.4)
    np.testing.assert_allclose(o, o2, atol=1e-10)


def test_dense_shape_guard():
    with pytest.raises(DimensionError):
        pyk.dense_fwd(np.zeros((3, 4)), np.zeros(5), np.zeros(3))


def test_backend_env_selection():
    env = dict(os.environ, CAPATTACK_BACKEND="python")
    out = subprocess.run(
        [sys.executable, "-c", "from capattack.numerics import kernels; print(kernels.BACKEND)"],
        capture_output=True, text=True, env=env,
    )
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "python"


def test_backend_bogus_env_rejected():
    env = dict(os.environ, CAPATTACK_BACKEND="fortran")
    out = subprocess.run(
        [sys.executable, "-c", "import capattack.numerics.kernels"],
        capture_output=True, text=True, env=env,
    )
    assert out.returncode != 0
    assert "CAPATTACK_BACKEND" in out.stderr


@needs_compiled
def test_cross_backend_attack_equivalence():
    # a short end-to-end attack must agree across backends to float
    # accumulation error; run the python backend out of process
    code = (
        "import numpy as np\n"
        "from capattack.model import ModelConfig, Vocab, CaptionModel, init_params\n"
        "from capattack.inference import PartialCaption\n"
        "from capattack.gem import gem_attack, GemConfig\n"
        "vocab = Vocab(('<bos>', '<eos>', 'red', 'blue', 'dot', 'box'))\n"
        "cfg = ModelConfig(image_side=3, feature_dim=4, hidden_dim=3, embed_dim=3, max_decode_len=5)\n"
        "model = CaptionModel(cfg, vocab, init_params(cfg, len(vocab), 77))\n"
        "image = np.linspace(0.2, 0.8, cfg.pixels)\n"
        "part = PartialCaption(4, (1, 3), (2, 4))\n"
        "out = gem_attack(model, image, part, GemConfig(iterations=4, adam_steps=4))\n"
        "print(repr(float(out.metrics.eps_norm)), list(out.caption))\n"
    )
    results = {}
    for backend in ("compiled", "python"):
        env = dict(os.environ, CAPATTACK_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", code],
                             capture_output=True, text=True, env=env)
        assert out.returncode == 0, out.stderr
        results[backend] = out.stdout.strip()
    eps_c, cap_c = results["compiled"].split(" ", 1)
    eps_p, cap_p = results["python"].split(" ", 1)
    assert cap_c == cap_p
    assert abs(float(eps_c) - float(eps_p)) < 1e-10
