"""Bias-corrected Adam over NetworkParams."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument, NumericalFailure


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument("learning rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidArgument("Adam betas must lie in [0, 1)")


def adam_step(params, grads, state: AdamState):
    """Update ``params`` in place from ``grads = {layer: (gW, gb)}``.

    Returns ``(params, state)``. A non-finite gradient raises before any
    parameter is touched.
    """
    for name, (gw, gb) in grads.items():
        if name not in params.layers:
            raise InvalidArgument(f"gradient for unknown layer {name!r}")
        layer = params.layers[name]
        if gw.shape != layer.weight.shape or gb.shape != layer.bias.shape:
            raise InvalidArgument(f"gradient shape mismatch in layer {name!r}")
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NumericalFailure(f"non-finite gradient in layer {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, (gw, gb) in grads.items():
        layer = params.layers[name]
        for key, p, g in ((name + ".weight", layer.weight, gw), (name + ".bias", layer.bias, gb)):
            m = state.m.setdefault(key, np.zeros_like(p))
            v = state.v.setdefault(key, np.zeros_like(p))
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
