"""Adam optimizer (beta1=0.5, beta2=0.999) and the learning-rate schedule.

The schedule holds the maximum rate for the first half of training and then
decays linearly to zero at the final epoch; the full-scale defaults are a
2e-4 maximum over 100 epochs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter moment accumulators keyed like the parameter dict."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(named_params, beta1=0.5, beta2=0.999, eps=1e-8):
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    for name, p in named_params:
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(named_params, state, lr):
    """One bias-corrected Adam update; missing gradients count as zero.

    Parameters receive fresh arrays (data is swapped, not mutated) and their
    gradient accumulators are cleared.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = np.ascontiguousarray(p.data - lr * update.astype(p.data.dtype))
        p.grad = None


def zero_grads(named_params):
    for _, p in named_params:
        p.grad = None


def grad_norm(named_params):
    """Global L2 norm over every present gradient."""
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def lr_at(epoch, max_lr, total_epochs):
    """Constant ``max_lr`` through epoch total/2, then linear decay to zero
    at ``total_epochs``; non-increasing and continuous at the breakpoint."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    half = total_epochs / 2.0
    if epoch <= half:
        return float(max_lr)
    frac = (total_epochs - epoch) / (total_epochs - half)
    return float(max_lr * max(frac, 0.0))
