"""Glorot (Xavier) uniform initialisation."""
from __future__ import annotations

import math

import numpy as np


def fans(shape) -> tuple[int, int]:
    """``(fan_in, fan_out)`` for FC ``(u, m)`` or conv ``(c_out, c_in, k, k, k)`` weights."""
    shape = tuple(shape)
    if len(shape) == 2:
        units, m = shape
        return m, units
    if len(shape) >= 3:
        receptive = math.prod(shape[2:])
        return shape[1] * receptive, shape[0] * receptive
    raise ValueError(f"cannot derive fan-in/fan-out from shape {shape}")


def glorot_bound(shape) -> float:
    fan_in, fan_out = fans(shape)
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_init(shape, rng=None, dtype=np.float32) -> np.ndarray:
    """Uniform on ``[-sqrt(6 / (fan_in + fan_out)), +sqrt(...)]``.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    bound = glorot_bound(shape)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
