"""First-order optimization utilities for the noise field.

Two box-constraint strategies keep image + noise inside [0,1]: "clip"
projects after every step, "arctanh" optimizes an unconstrained field w
with pixels = (tanh(w)+1)/2 so no projection is ever needed.  Reported
norms are always pixel-space regardless of strategy.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InputError

BOX_MODES = ("clip", "arctanh")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, arr, learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            m=np.zeros_like(arr),
            v=np.zeros_like(arr),
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(state, grad):
    """One ADAM update for the gradient of a loss to *minimize*.

    Mutates `state` and returns the delta to add to the variable.
    """
    if grad.shape != state.m.shape:
        raise DimensionError("gradient shape %r does not match state %r" % (grad.shape, state.m.shape))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    mhat = state.m / (1.0 - b1 ** state.step)
    vhat = state.v / (1.0 - b2 ** state.step)
    return -state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)


def project_box(image, noise):
    """Smallest correction of `noise` such that image + noise lies in [0,1]."""
    if image.shape != noise.shape:
        raise DimensionError("image and noise shapes differ")
    return np.clip(image + noise, 0.0, 1.0) - image


def to_arctanh(image, clamp=1e-6):
    """Map [0,1] pixels to the unconstrained field w = arctanh(2x - 1).

    Pixels are first pulled to [clamp, 1-clamp] so the transform stays
    finite at saturated values.
    """
    x = np.clip(image, clamp, 1.0 - clamp)
    return np.arctanh(2.0 * x - 1.0)


def from_arctanh(w):
    """Inverse of `to_arctanh`: pixels (tanh(w)+1)/2, strictly inside (0,1)."""
    return (np.tanh(w) + 1.0) / 2.0


class NoiseOptimizer:
    """Owns the optimization variable behind a pixel-space noise field.

    Callers hand in pixel-space gradients; `ascend`/`descend` apply one
    ADAM step under the selected box strategy and `noise` always reads
    back the current pixel-space noise.
    """

    def __init__(self, image, learning_rate=0.001, box_mode="clip", noise0=None, clamp=1e-6):
        if box_mode not in BOX_MODES:
            raise InputError("box_mode must be one of %r, got %r" % (BOX_MODES, box_mode))
        self.image = np.asarray(image, dtype=np.float64)
        self.box_mode = box_mode
        start = np.zeros_like(self.image) if noise0 is None else np.asarray(noise0, dtype=np.float64)
        if start.shape != self.image.shape:
            raise DimensionError("noise0 shape does not match image")
        if box_mode == "clip":
            self._noise = project_box(self.image, start)
            self._adam = AdamState.like(self._noise, learning_rate)
        else:
            self._w = to_arctanh(np.clip(self.image + start, 0.0, 1.0), clamp)
            self._adam = AdamState.like(self._w, learning_rate)
            self._noise = from_arctanh(self._w) - self.image

    @property
    def noise(self):
        return self._noise

    def ascend(self, pixel_grad):
        self._apply(-np.asarray(pixel_grad, dtype=np.float64))

    def descend(self, pixel_grad):
        self._apply(np.asarray(pixel_grad, dtype=np.float64))

    def _apply(self, grad):
        if self.box_mode == "clip":
            delta = adam_step(self._adam, grad)
            self._noise = project_box(self.image, self._noise + delta)
        else:
            th = np.tanh(self._w)
            gw = grad * 0.5 * (1.0 - th * th)
            self._w = self._w + adam_step(self._adam, gw)
            self._noise = from_arctanh(self._w) - self.image
