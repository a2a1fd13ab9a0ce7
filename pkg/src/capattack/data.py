"""Synthetic shapes-on-canvas dataset and its on-disk format.

Each 16x16 grayscale image shows one shape (square, triangle, bar) at
one horizontal position (left, center, right) in one intensity band
(dark, bright); 18 classes total.  Geometry and exact gray level jitter
per sample, but the caption is a deterministic function of the class:

    a <intensity> <shape> on the <position> <eos>

Pixel values are quantized to the k/255 grid at generation time so PGM
round-trips are exact.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import EOS, Vocab

INTENSITIES = ("dark", "bright")
SHAPES = ("square", "triangle", "bar")
POSITIONS = ("left", "center", "right")

# Filler vocabulary entries: plausible caption words the generator never
# uses, so attacks have somewhere to push probability mass.
DISTRACTORS = ("tiny", "huge", "circle", "cross", "top", "bottom", "middle")

CAPTION_LEN = 7  # a <intensity> <shape> on the <position> <eos>


def default_vocab():
    return Vocab(("<bos>", "<eos>", "a", "on", "the")
                 + INTENSITIES + SHAPES + POSITIONS + DISTRACTORS)


def caption_for(vocab, intensity, shape, position):
    words = ("a", intensity, shape, "on", "the", position)
    return tuple(vocab.index(w) for w in words) + (EOS,)


@dataclass
class SyntheticDataset:
    samples: list  # of (flat image ndarray, caption tuple)
    vocab: Vocab
    side: int

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def _render(side, intensity, shape, position, rng):
    img = np.zeros((side, side))
    cx = {"left": 4, "center": 8, "right": 12}[position] + int(rng.integers(-1, 2))
    cy = side // 2 + int(rng.integers(-2, 3))
    level = {"dark": 0.35, "bright": 0.9}[intensity] + float(rng.uniform(-0.05, 0.05))
    level = min(max(level, 0.0), 1.0)
    ys, xs = np.mgrid[0:side, 0:side]
    if shape == "square":
        mask = (np.abs(xs - cx) <= 3) & (np.abs(ys - cy) <= 3)
    elif shape == "triangle":
        top = cy - 3
        mask = (ys >= top) & (ys <= cy + 3) & (np.abs(xs - cx) <= (ys - top))
    elif shape == "bar":
        mask = (np.abs(xs - cx) <= 1) & (np.abs(ys - cy) <= 6)
    else:
        raise InputError("unknown shape %r" % (shape,))
    img[mask] = level
    return np.round(img * 255.0) / 255.0


def gen_synthetic(n, seed=0):
    """Deterministic dataset of n samples cycling through all 18 classes."""
    if n < 1:
        raise InputError("need at least one sample")
    vocab = default_vocab()
    rng = np.random.default_rng(seed)
    classes = [(i, s, p) for i in INTENSITIES for s in SHAPES for p in POSITIONS]
    order = rng.permutation(len(classes))
    samples = []
    side = 16
    for k in range(n):
        intensity, shape, position = classes[order[k % len(classes)]]
        img = _render(side, intensity, shape, position, rng)
        samples.append((img.reshape(-1), caption_for(vocab, intensity, shape, position)))
    return SyntheticDataset(samples, vocab, side)


# ---- PGM (binary P5, maxval 255) ----


def write_pgm(path, image2d):
    image2d = np.asarray(image2d, dtype=np.float64)
    if image2d.ndim != 2:
        raise InputError("PGM writer expects a 2-d image")
    if image2d.min() < 0.0 or image2d.max() > 1.0:
        raise InputError("PGM writer expects values in [0,1]")
    data = np.round(image2d * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fp:
        fp.write(b"P5\n%d %d\n255\n" % (w, h))
        fp.write(data.tobytes())


def _pgm_token(fp):
    tok = b""
    while True:
        ch = fp.read(1)
        if not ch:
            raise InputError("truncated PGM header")
        if ch == b"#":
            while ch and ch != b"\n":
                ch = fp.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pgm(path):
    """Reads a binary P5 file into a float image in [0,1]."""
    with open(path, "rb") as fp:
        if _pgm_token(fp) != b"P5":
            raise InputError("only binary P5 PGM files are supported")
        w = int(_pgm_token(fp))
        h = int(_pgm_token(fp))
        maxval = int(_pgm_token(fp))
        if maxval != 255:
            raise InputError("only maxval 255 PGM files are supported")
        payload = fp.read(w * h)
        if len(payload) != w * h:
            raise InputError("truncated PGM payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    return data.astype(np.float64) / 255.0


def flat_to_image(flat, side):
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (side * side,):
        raise InputError("flat image of length %d does not match side %d" % (flat.size, side))
    return flat.reshape(side, side)


# ---- dataset directory format ----

DATASET_INDEX = "index.json"


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, (flat, caption) in enumerate(dataset):
        name = "img_%05d.pgm" % i
        write_pgm(os.path.join(directory, name), flat_to_image(flat, dataset.side))
        entries.append({"image": name, "tokens": dataset.vocab.to_strings(caption)})
    index = {
        "format": "capattack-dataset-v1",
        "side": dataset.side,
        "vocab": list(dataset.vocab.tokens),
        "samples": entries,
    }
    with open(os.path.join(directory, DATASET_INDEX), "w", encoding="utf-8") as fp:
        json.dump(index, fp, indent=2)


def load_dataset(directory):
    index_path = os.path.join(directory, DATASET_INDEX)
    if not os.path.isfile(index_path):
        raise InputError("no dataset at %r (missing %s)" % (directory, DATASET_INDEX))
    with open(index_path, "r", encoding="utf-8") as fp:
        index = json.load(fp)
    vocab = Vocab(tuple(index["vocab"]))
    side = int(index["side"])
    samples = []
    for entry in index["samples"]:
        img = read_pgm(os.path.join(directory, entry["image"]))
        if img.shape != (side, side):
            raise InputError("image %r has shape %r, expected side %d" % (entry["image"], img.shape, side))
        samples.append((img.reshape(-1), vocab.to_ids(entry["tokens"])))
    return SyntheticDataset(samples, vocab, side)
