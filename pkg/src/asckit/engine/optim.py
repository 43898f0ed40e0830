"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np


def adam_init(params) -> dict:
    return {
        "t": 0,
        "m": [np.zeros_like(p.value, dtype=np.float64) for p in params],
        "v": [np.zeros_like(p.value, dtype=np.float64) for p in params],
    }


def adam_step(params, state: dict, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update in place; zeroes gradients afterwards."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, m, v in zip(params, state["m"], state["v"]):
        g = p.grad.astype(np.float64)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.value = (p.value - update).astype(p.value.dtype)
        p.grad.fill(0.0)
