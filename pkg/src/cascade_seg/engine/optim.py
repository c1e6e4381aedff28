"""ADADELTA: per-parameter step sizes from decaying averages of g^2 and dx^2."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeMismatch


@dataclass(frozen=True)
class AdadeltaConfig:
    rho: float = 0.95
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def adadelta_step(param, grad, state, cfg: AdadeltaConfig = AdadeltaConfig()):
    """One update. ``state`` is ``(E[g^2], E[dx^2])``; returns ``(param, state)`` as new arrays."""
    eg2, edx2 = state
    param, grad = np.asarray(param), np.asarray(grad)
    if not (param.shape == grad.shape == np.shape(eg2) == np.shape(edx2)):
        raise ShapeMismatch("param, grad and accumulators must share a shape")
    rho, eps = cfg.rho, cfg.epsilon
    eg2 = rho * eg2 + (1 - rho) * grad * grad
    dx = -(np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps)) * grad
    edx2 = rho * edx2 + (1 - rho) * dx * dx
    return param + dx, (eg2, edx2)


class Adadelta:
    """In-place ADADELTA over every trainable tensor of a network."""

    def __init__(self, cfg: AdadeltaConfig = AdadeltaConfig()):
        self.cfg = cfg
        self.state: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}

    def init_state(self, network):
        for key, p in network.named_parameters():
            self.state[key] = (np.zeros_like(p), np.zeros_like(p))

    def step(self, network):
        rho, eps = self.cfg.rho, self.cfg.epsilon
        for key, p in network.named_parameters():
            g = network.layers[key[0]].grads[key[1]]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {key} has shape {g.shape}, param {p.shape}")
            if key not in self.state:
                self.state[key] = (np.zeros_like(p), np.zeros_like(p))
            eg2, edx2 = self.state[key]
            g = g.astype(p.dtype, copy=False)
            eg2 *= rho
            eg2 += (1 - rho) * g * g
            dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
            edx2 *= rho
            edx2 += (1 - rho) * dx * dx
            p += dx
