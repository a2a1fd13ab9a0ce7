import itertools

import numpy as np
import pytest

from capattack.data import (
    CAPTION_LEN,
    INTENSITIES,
    POSITIONS,
    SHAPES,
    caption_for,
    default_vocab,
    flat_to_image,
    gen_synthetic,
    load_dataset,
    read_pgm,
    save_dataset,
    write_pgm,
)
from capattack.errors import InputError


def test_vocab_layout():
    v = default_vocab()
    assert v.tokens[0] == "<bos>" and v.tokens[1] == "<eos>"
    assert len(v) == 20
    for w in INTENSITIES + SHAPES + POSITIONS + ("a", "on", "the"):
        v.index(w)


def test_caption_template():
    v = default_vocab()
    cap = caption_for(v, "dark", "square", "left")
    words = v.to_strings(cap)
    assert words == ["a", "dark", "square", "on", "the", "left", "<eos>"]
    assert len(cap) == CAPTION_LEN


def test_gen_synthetic_covers_all_classes():
    ds = gen_synthetic(360, seed=0)
    assert len(ds) == 360
    seen = set()
    for img, cap in ds:
        assert img.shape == (256,) and img.dtype == np.float64
        assert img.min() >= 0.0 and img.max() <= 1.0
        words = tuple(ds.vocab.to_strings(cap))
        assert len(words) == CAPTION_LEN and words[-1] == "<eos>"
        seen.add(words[1:3] + (words[5],))
    # every (intensity, shape, position) combination appears
    assert len(seen) == len(INTENSITIES) * len(SHAPES) * len(POSITIONS)


def test_gen_synthetic_deterministic():
    a = gen_synthetic(40, seed=9)
    b = gen_synthetic(40, seed=9)
    c = gen_synthetic(40, seed=10)
    for (ia, ca), (ib, cb) in zip(a, b):
        assert np.array_equal(ia, ib) and ca == cb
    assert any(
        not np.array_equal(ia, ic) for (ia, _), (ic, _) in zip(a, c)
    )


def test_images_quantized_to_8bit_grid():
    ds = gen_synthetic(10, seed=3)
    for img, _ in ds:
        scaled = img * 255.0
        assert np.allclose(scaled, np.round(scaled), atol=1e-9)


def test_pgm_roundtrip_exact(tmp_path):
    ds = gen_synthetic(3, seed=1)
    img = flat_to_image(ds[0][0], 16)
    path = tmp_path / "x.pgm"
    write_pgm(str(path), img)
    back = read_pgm(str(path))
    assert back.shape == (16, 16)
    assert np.array_equal(back, img)


def test_pgm_rejects_garbage(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P3\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(InputError):
        read_pgm(str(path))


def test_dataset_roundtrip(tmp_path):
    ds = gen_synthetic(12, seed=2)
    save_dataset(ds, str(tmp_path / "ds"))
    back = load_dataset(str(tmp_path / "ds"))
    assert back.vocab.tokens == ds.vocab.tokens
    assert len(back) == len(ds)
    for (ia, ca), (ib, cb) in zip(ds, back):
        assert np.array_equal(ia, ib)
        assert tuple(ca) == tuple(cb)


def test_gen_synthetic_rejects_nonpositive():
    with pytest.raises(InputError):
        gen_synthetic(0, seed=0)
