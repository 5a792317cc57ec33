"""SGD with momentum and coupled weight decay, plus parameter EMA."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from afd.errors import ConfigError, DimensionError


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], lr: float, momentum: float = 0.9,
                   weight_decay: float = 5e-4) -> "OptimizerState":
        vel = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(lr=lr, momentum=momentum, weight_decay=weight_decay, velocity=vel)


def sgd_momentum_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      state: OptimizerState) -> dict[str, np.ndarray]:
    """One SGD step over the parameters named in ``grads``.

    v <- momentum * v + (grad + wd * param);  param <- param - lr * v

    Parameters absent from ``grads`` are passed through untouched (same array
    object). Updated arrays are fresh; inputs are never modified in place.
    """
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise DimensionError(f"velocity for {name!r} has shape {v.shape}, parameter has {p.shape}")
        dt = p.dtype.type
        v = dt(state.momentum) * v + (g.astype(p.dtype, copy=False) + dt(state.weight_decay) * p)
        state.velocity[name] = v
        out[name] = p - dt(state.lr) * v
    return out


def ema_update(ema: Mapping[str, np.ndarray], live: Mapping[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    if not 0.0 <= decay <= 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1], got {decay}")
    out = {}
    for name, e in ema.items():
        p = live[name]
        if decay == 0.0:
            out[name] = p.astype(e.dtype, copy=True)
        elif decay == 1.0:
            out[name] = e
        else:
            # same average as d*e + (1-d)*p, but leaves e bitwise fixed when p == e
            out[name] = e + e.dtype.type(1.0 - decay) * (p - e)
    return out
