"""Bias-corrected Adam over named parameter blocks."""

from __future__ import annotations

import numpy as np

from ..errors import NumericError


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState | None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict, AdamState]:
    """One Adam update; returns new parameters and the mutated state.

    Blocks present in `params` but absent from `grads` are left untouched
    (frozen). Non-finite gradients raise NumericError naming the block.
    """
    if state is None:
        state = AdamState(params)
    state.t += 1
    t = state.t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise NumericError(f"gradient shape {g.shape} != parameter shape {p.shape} for block {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter block {name!r}")
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1**t)
        v_hat = state.v[name] / (1 - beta2**t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out, state
