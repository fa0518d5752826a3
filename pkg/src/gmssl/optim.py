"""Bias-corrected Adam over name -> array parameter dicts, plus a cosine schedule."""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam. ``params`` and ``grads`` are name -> array dicts; returns new copies."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {np.shape(p)}")
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        step = lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = (np.asarray(p, dtype=np.float64) - step).astype(np.asarray(p).dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


def cosine_lr(base, step, total, floor=0.0):
    """Cosine annealing from ``base`` at step 0 down to ``floor`` at ``total``."""
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * min(step, total - 1) / (total - 1)))
