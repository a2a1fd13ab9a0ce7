"""Numeric foundations: kernels, tape autodiff, tensor IO, seeded RNG."""

from . import kernels, tensorio
from .kernels import BACKEND
from .rng import SplitMix64
from .tape import Tape

__all__ = ["kernels", "tensorio", "BACKEND", "SplitMix64", "Tape"]
