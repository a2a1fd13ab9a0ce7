"""A small trainable GRU captioner with exact noise gradients.

The captioner encodes a grayscale image (flattened, pixel values in
[0,1]) into a feature vector through two tanh dense layers, initializes
the GRU state from that feature, and decodes autoregressively from BOS.
Two conditioning variants exist:

- "init_feed": the image feature only enters through the initial state.
- "step_feed": the feature is additionally projected and added to every
  step's token embedding.

Both variants share parameter shapes (the feed projection simply goes
unused under init_feed), so a single checkpoint format covers both.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    InputError,
    NumericalError,
    TrainingError,
)
from .numerics import tensorio
from .numerics import kernels as K
from .numerics.rng import SplitMix64
from .numerics.tape import Tape
from .optimizer import AdamState, adam_step

BOS = 0
EOS = 1

FEED_MODES = ("init_feed", "step_feed")


@dataclass(frozen=True)
class Vocab:
    """Token table; index 0 is reserved for BOS and index 1 for EOS."""

    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 4:
            raise InputError("vocab needs at least 4 tokens (bos, eos, two words)")
        if len(set(self.tokens)) != len(self.tokens):
            raise InputError("vocab tokens must be unique")
        object.__setattr__(self, "_lookup", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def token(self, index):
        return self.tokens[index]

    def index(self, token):
        try:
            return self._lookup[token]
        except KeyError:
            raise InputError("unknown token %r" % (token,)) from None

    def to_strings(self, ids):
        return [self.tokens[i] for i in ids]

    def to_ids(self, words):
        return tuple(self.index(w) for w in words)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fp:
            for tok in self.tokens:
                fp.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fp:
            lines = [line.rstrip("\n") for line in fp]
        return cls(tuple(line for line in lines if line))


@dataclass(frozen=True)
class ModelConfig:
    image_side: int = 16
    feature_dim: int = 32
    hidden_dim: int = 32
    embed_dim: int = 16
    feed_mode: str = "step_feed"
    max_decode_len: int = 12

    def __post_init__(self):
        if self.feed_mode not in FEED_MODES:
            raise InputError("feed_mode must be one of %r" % (FEED_MODES,))
        for name in ("image_side", "feature_dim", "hidden_dim", "embed_dim", "max_decode_len"):
            if int(getattr(self, name)) < 1:
                raise InputError("%s must be positive" % name)

    @property
    def pixels(self):
        return self.image_side * self.image_side

    def to_dict(self):
        return {
            "image_side": self.image_side,
            "feature_dim": self.feature_dim,
            "hidden_dim": self.hidden_dim,
            "embed_dim": self.embed_dim,
            "feed_mode": self.feed_mode,
            "max_decode_len": self.max_decode_len,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


PARAM_FIELDS = (
    "enc_w1", "enc_b1", "enc_w2", "enc_b2",
    "init_w", "init_b",
    "embed", "feed_w",
    "gru_wr", "gru_ur", "gru_br",
    "gru_wz", "gru_uz", "gru_bz",
    "gru_wn", "gru_un", "gru_bn",
    "out_w", "out_b",
)

_GRU_FIELDS = ("gru_wr", "gru_ur", "gru_br", "gru_wz", "gru_uz", "gru_bz",
               "gru_wn", "gru_un", "gru_bn")


@dataclass
class ModelParams:
    """Parameter arrays; treat as immutable once training finishes."""

    enc_w1: np.ndarray
    enc_b1: np.ndarray
    enc_w2: np.ndarray
    enc_b2: np.ndarray
    init_w: np.ndarray
    init_b: np.ndarray
    embed: np.ndarray
    feed_w: np.ndarray
    gru_wr: np.ndarray
    gru_ur: np.ndarray
    gru_br: np.ndarray
    gru_wz: np.ndarray
    gru_uz: np.ndarray
    gru_bz: np.ndarray
    gru_wn: np.ndarray
    gru_un: np.ndarray
    gru_bn: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    def arrays(self):
        return [getattr(self, name) for name in PARAM_FIELDS]

    @classmethod
    def from_arrays(cls, arrays):
        if len(arrays) != len(PARAM_FIELDS):
            raise InputError("expected %d parameter tensors, got %d" % (len(PARAM_FIELDS), len(arrays)))
        return cls(**dict(zip(PARAM_FIELDS, arrays)))

    def copy(self):
        return ModelParams.from_arrays([a.copy() for a in self.arrays()])


def param_shapes(config, vocab_size):
    p = config.pixels
    d = config.feature_dim
    h = config.hidden_dim
    e = config.embed_dim
    return {
        "enc_w1": (d, p), "enc_b1": (d,),
        "enc_w2": (d, d), "enc_b2": (d,),
        "init_w": (h, d), "init_b": (h,),
        "embed": (vocab_size, e),
        "feed_w": (e, d),
        "gru_wr": (h, e), "gru_ur": (h, h), "gru_br": (h,),
        "gru_wz": (h, e), "gru_uz": (h, h), "gru_bz": (h,),
        "gru_wn": (h, e), "gru_un": (h, h), "gru_bn": (h,),
        "out_w": (vocab_size, h), "out_b": (vocab_size,),
    }


def init_params(config, vocab_size, seed):
    """Uniform [-0.1, 0.1] init from a splitmix64 stream keyed by `seed`.

    Field order is fixed, so identical seeds give bit-identical params on
    any platform.
    """
    gen = SplitMix64(seed)
    shapes = param_shapes(config, vocab_size)
    return ModelParams(**{name: gen.uniform(-0.1, 0.1, shapes[name]) for name in PARAM_FIELDS})


@dataclass
class CaptionModel:
    config: ModelConfig
    vocab: Vocab
    params: ModelParams

    def __post_init__(self):
        shapes = param_shapes(self.config, len(self.vocab))
        for name in PARAM_FIELDS:
            arr = getattr(self.params, name)
            if arr.shape != shapes[name]:
                raise DimensionError(
                    "param %s has shape %r, expected %r" % (name, arr.shape, shapes[name])
                )

    def validate_tokens(self, tokens):
        v = len(self.vocab)
        for t in tokens:
            if not 0 <= int(t) < v:
                raise InputError("token id %r outside vocab of size %d" % (t, v))


@dataclass
class AdversarialState:
    """Benign image plus current noise, both flat (pixels,) float64."""

    image: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float64)
        self.noise = np.ascontiguousarray(self.noise, dtype=np.float64)
        if self.image.ndim != 1 or self.image.shape != self.noise.shape:
            raise DimensionError("image and noise must be equal-shape flat vectors")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise InputError("image entries must lie in [0,1]")

    @classmethod
    def fresh(cls, image):
        image = np.ascontiguousarray(image, dtype=np.float64)
        return cls(image, np.zeros_like(image))

    def perturbed(self):
        return self.image + self.noise

    def noise_norm(self):
        return float(np.linalg.norm(self.noise))


class StepDecoder:
    """Incremental gradient-free forward evaluation for one input image."""

    def __init__(self, model, image):
        cfg = model.config
        p = model.params
        image = np.ascontiguousarray(image, dtype=np.float64)
        if image.shape != (cfg.pixels,):
            raise DimensionError("image shape %r, expected (%d,)" % (image.shape, cfg.pixels))
        self._p = p
        f = K.tanh_fwd(K.dense_fwd(p.enc_w1, image, p.enc_b1))
        f = K.tanh_fwd(K.dense_fwd(p.enc_w2, f, p.enc_b2))
        self.feature = f
        self.h0 = K.tanh_fwd(K.dense_fwd(p.init_w, f, p.init_b))
        self._feed = p.feed_w @ f if cfg.feed_mode == "step_feed" else None
        self._xcache = {}

    def _x(self, token):
        x = self._xcache.get(token)
        if x is None:
            x = self._p.embed[token].copy()
            if self._feed is not None:
                x += self._feed
            self._xcache[token] = x
        return x

    def advance(self, h, prev_token):
        p = self._p
        h2, _, _, _ = K.gru_fwd(
            self._x(prev_token), h,
            p.gru_wr, p.gru_ur, p.gru_br,
            p.gru_wz, p.gru_uz, p.gru_bz,
            p.gru_wn, p.gru_un, p.gru_bn,
        )
        return h2

    def dist(self, h, prev_token):
        """Returns (logits, logprobs, new_h) for the next position."""
        h2 = self.advance(h, prev_token)
        logits = K.dense_fwd(self._p.out_w, h2, self._p.out_b)
        return logits, K.log_softmax_fwd(logits), h2


def step_logprobs(model, state, prefix):
    """Log-probability vector of the next token after `prefix` (teacher
    forced); an empty prefix asks for the first position."""
    model.validate_tokens(prefix)
    dec = StepDecoder(model, state.perturbed())
    h = dec.h0
    prev = BOS
    for tok in prefix:
        h = dec.advance(h, prev)
        prev = int(tok)
    _, logp, _ = dec.dist(h, prev)
    if not np.all(np.isfinite(logp)):
        raise NumericalError("non-finite step log-probabilities")
    return logp


def sequence_logprob(model, state, tokens):
    """Joint log-probability of `tokens` under teacher forcing."""
    model.validate_tokens(tokens)
    dec = StepDecoder(model, state.perturbed())
    h = dec.h0
    prev = BOS
    total = 0.0
    for tok in tokens:
        tok = int(tok)
        _, logp, h = dec.dist(h, prev)
        total += float(logp[tok])
        prev = tok
    if not np.isfinite(total):
        raise NumericalError("non-finite sequence log-probability")
    return total


class TracedDecoder:
    """Same forward as StepDecoder but recorded on a Tape.

    Token inputs are cached per token id, so repeated prefixes across a
    batch of weighted terms share nodes.
    """

    def __init__(self, model, image, noise):
        cfg = model.config
        p = model.params
        image = np.ascontiguousarray(image, dtype=np.float64)
        noise = np.ascontiguousarray(noise, dtype=np.float64)
        if image.shape != (cfg.pixels,) or noise.shape != image.shape:
            raise DimensionError("image/noise must both have shape (%d,)" % cfg.pixels)
        t = Tape()
        self.tape = t
        self.param_ids = {name: t.leaf(getattr(p, name)) for name in PARAM_FIELDS}
        self.image_id = t.leaf(image)
        self.noise_id = t.leaf(noise)
        perturbed = t.add(self.image_id, self.noise_id)
        f = t.tanh(t.dense(self.param_ids["enc_w1"], perturbed, self.param_ids["enc_b1"]))
        f = t.tanh(t.dense(self.param_ids["enc_w2"], f, self.param_ids["enc_b2"]))
        self.feature_id = f
        self.h0_id = t.tanh(t.dense(self.param_ids["init_w"], f, self.param_ids["init_b"]))
        self._gru_pids = tuple(self.param_ids[name] for name in _GRU_FIELDS)
        if cfg.feed_mode == "step_feed":
            zero_bias = t.leaf(np.zeros(cfg.embed_dim))
            self._feed_id = t.dense(self.param_ids["feed_w"], f, zero_bias)
        else:
            self._feed_id = None
        self._xcache = {}

    def input_id(self, token):
        nid = self._xcache.get(token)
        if nid is None:
            nid = self.tape.embed(self.param_ids["embed"], token)
            if self._feed_id is not None:
                nid = self.tape.add(nid, self._feed_id)
            self._xcache[token] = nid
        return nid

    def advance(self, hid, prev_token):
        return self.tape.gru(self.input_id(prev_token), hid, self._gru_pids)

    def dist(self, hid, prev_token):
        h2 = self.advance(hid, prev_token)
        logits = self.tape.dense(self.param_ids["out_w"], h2, self.param_ids["out_b"])
        return logits, self.tape.log_softmax(logits), h2


class _TrieNode:
    __slots__ = ("children", "terms")

    def __init__(self):
        self.children = {}
        self.terms = []

    def child(self, token):
        node = self.children.get(token)
        if node is None:
            node = _TrieNode()
            self.children[token] = node
        return node


class NoiseObjective:
    """Weighted sum of per-step log-prob (or raw logit) entries as a
    function of the noise field.

    terms: iterable of (prefix tokens, token, weight); duplicates merge.
    Terms sharing a prefix share forward work through a prefix trie, and
    the recorded tape is replayed (not rebuilt) for each new noise value.
    """

    def __init__(self, model, image, terms, use_logits=False):
        merged = {}
        vocab_size = len(model.vocab)
        for prefix, token, weight in terms:
            prefix = tuple(int(t) for t in prefix)
            token = int(token)
            for t in prefix + (token,):
                if not 0 <= t < vocab_size:
                    raise InputError("term token %d outside vocab" % t)
            key = (prefix, token)
            merged[key] = merged.get(key, 0.0) + float(weight)
        root = _TrieNode()
        for (prefix, token) in sorted(merged):
            node = root
            for tok in prefix:
                node = node.child(tok)
            node.terms.append((token, merged[(prefix, token)]))

        dec = TracedDecoder(model, image, np.zeros_like(np.asarray(image, dtype=np.float64)))
        self._dec = dec
        self._weights = {}

        def emit(node, hid, prev):
            if node.terms:
                logits_id, logp_id, h2 = dec.dist(hid, prev)
                src = logits_id if use_logits else logp_id
                for token, w in node.terms:
                    sid = dec.tape.select(src, token)
                    self._weights[sid] = self._weights.get(sid, 0.0) + w
            elif node.children:
                h2 = dec.advance(hid, prev)
            else:
                return
            for tok in sorted(node.children):
                emit(node.children[tok], h2, tok)

        emit(root, dec.h0_id, BOS)

    def _replay(self, noise):
        tape = self._dec.tape
        tape.set_leaf(self._dec.noise_id, noise)
        tape.replay()
        value = 0.0
        for sid, w in self._weights.items():
            value += w * tape.value(sid)
        return value

    def value(self, noise):
        value = self._replay(noise)
        if not np.isfinite(value):
            raise NumericalError("non-finite objective value")
        return value

    def eval(self, noise):
        """Returns (value, gradient w.r.t. noise)."""
        value = self._replay(noise)
        grads = self._dec.tape.backward(self._weights, wrt=[self._dec.noise_id])
        g = grads[self._dec.noise_id]
        if not (np.isfinite(value) and np.all(np.isfinite(g))):
            raise NumericalError("non-finite objective value or gradient")
        return value, g


def sequence_terms(tokens, weight=1.0):
    """Per-step (prefix, token, weight) terms whose sum is the weighted
    sequence log-probability."""
    tokens = tuple(int(t) for t in tokens)
    return [(tokens[:i], tokens[i], weight) for i in range(len(tokens))]


def grad_wrt_noise(model, state, terms, l2_weight=0.0):
    """Ascent gradient of sum(w * logP(token | prefix)) - l2_weight * ||noise||^2."""
    obj = NoiseObjective(model, state.image, terms)
    _, g = obj.eval(state.noise)
    if l2_weight:
        g = g - 2.0 * l2_weight * state.noise
    return g


# ---- training ----


def _caption_grads(model, image, caption, zero_noise):
    dec = TracedDecoder(model, image, zero_noise)
    hid = dec.h0_id
    prev = BOS
    weights = {}
    total = 0.0
    for tok in caption:
        tok = int(tok)
        _, logp_id, h2 = dec.dist(hid, prev)
        sid = dec.tape.select(logp_id, tok)
        weights[sid] = 1.0
        total += dec.tape.value(sid)
        hid = h2
        prev = tok
    grads = dec.tape.backward(weights, wrt=list(dec.param_ids.values()))
    return total, {name: grads[nid] for name, nid in dec.param_ids.items()}


# image-conditioning path; without decay these saturate the tanh
# layers early, erasing gray-level magnitudes (dark vs bright becomes
# unlearnable) and killing the conditioning gradients
VISUAL_FIELDS = ("enc_w1", "enc_b1", "enc_w2", "enc_b2", "init_w", "init_b", "feed_w")


def train_toy(dataset, model_config=None, epochs=30, seed=0, learning_rate=0.008,
              holdout_fraction=0.1, batch_size=16, visual_weight_decay=0.1,
              log=None):
    """Mini-batch ADAM ascent on teacher-forced log-likelihood.

    Deterministic in (dataset, config, epochs, seed): parameter init uses
    a splitmix64 stream and shuffling uses a seeded numpy generator.
    visual_weight_decay applies decoupled decay on VISUAL_FIELDS, keeping
    the encoder unsaturated so gray-level magnitudes stay distinguishable.
    Returns the trained ModelParams; measure the held-out exact-match
    gate with harness.exact_match_rate on the holdout_split indices.
    """
    cfg = model_config or ModelConfig()
    vocab = dataset.vocab
    if len(dataset) < 2:
        raise InputError("dataset too small to train on")
    if batch_size < 1:
        raise InputError("batch_size must be positive")
    sample_image = dataset[0][0]
    if sample_image.shape != (cfg.pixels,):
        raise InputError("dataset image size does not match model config")

    params = init_params(cfg, len(vocab), seed)
    model = CaptionModel(cfg, vocab, params)
    rng = np.random.default_rng(seed)
    train_idx, _ = holdout_split(len(dataset), holdout_fraction, seed)

    shapes = param_shapes(cfg, len(vocab))
    flat_dim = sum(int(np.prod(s)) for s in shapes.values())
    adam = AdamState.like(np.zeros(flat_dim), learning_rate)
    zero_noise = np.zeros(cfg.pixels)

    for epoch in range(int(epochs)):
        order = rng.permutation(len(train_idx))
        epoch_ll = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            flat = np.zeros(flat_dim)
            for j in batch:
                img, caption = dataset[train_idx[j]]
                ll, grads = _caption_grads(model, img, caption, zero_noise)
                if not np.isfinite(ll):
                    raise TrainingError(
                        "training diverged: non-finite log-likelihood at epoch %d" % epoch)
                epoch_ll += ll
                offset = 0
                for name in PARAM_FIELDS:
                    g = grads[name]
                    flat[offset:offset + g.size] += g.ravel()
                    offset += g.size
            flat /= len(batch)
            delta = adam_step(adam, -flat)  # ascend on log-likelihood
            decay = learning_rate * visual_weight_decay
            offset = 0
            for name in PARAM_FIELDS:
                arr = getattr(params, name)
                step = delta[offset:offset + arr.size].reshape(arr.shape)
                if name in VISUAL_FIELDS and decay:
                    step = step - decay * arr
                setattr(params, name, arr + step)
                offset += arr.size
        if log is not None:
            log(epoch, epoch_ll / max(1, len(train_idx)))
    return params


def holdout_split(n, holdout_fraction, seed):
    """Deterministic (train_indices, holdout_indices) split used by train_toy."""
    if not 0.0 <= holdout_fraction < 1.0:
        raise InputError("holdout_fraction must be in [0,1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_hold = int(round(n * holdout_fraction))
    return list(order[n_hold:]), list(order[:n_hold])


# ---- checkpoint IO ----

CHECKPOINT_CONFIG = "config.json"
CHECKPOINT_PARAMS = "params.capt"
CHECKPOINT_VOCAB = "vocab.txt"


def save_checkpoint(directory, model, extra=None):
    os.makedirs(directory, exist_ok=True)
    model.vocab.save(os.path.join(directory, CHECKPOINT_VOCAB))
    tensorio.save_tensors(os.path.join(directory, CHECKPOINT_PARAMS), model.params.arrays())
    meta = {
        "format": "capattack-checkpoint-v1",
        "model": model.config.to_dict(),
        "vocab_file": CHECKPOINT_VOCAB,
        "params_file": CHECKPOINT_PARAMS,
        "param_fields": list(PARAM_FIELDS),
        "extra": extra or {},
    }
    with open(os.path.join(directory, CHECKPOINT_CONFIG), "w", encoding="utf-8") as fp:
        json.dump(meta, fp, indent=2, sort_keys=True)


def load_checkpoint(directory):
    cfg_path = os.path.join(directory, CHECKPOINT_CONFIG)
    if not os.path.isfile(cfg_path):
        raise InputError("no checkpoint at %r (missing %s)" % (directory, CHECKPOINT_CONFIG))
    with open(cfg_path, "r", encoding="utf-8") as fp:
        meta = json.load(fp)
    if meta.get("param_fields") != list(PARAM_FIELDS):
        raise InputError("checkpoint parameter layout does not match this version")
    config = ModelConfig.from_dict(meta["model"])
    vocab = Vocab.load(os.path.join(directory, meta["vocab_file"]))
    arrays = tensorio.load_tensors(os.path.join(directory, meta["params_file"]))
    params = ModelParams.from_arrays(arrays)
    return CaptionModel(config, vocab, params)
