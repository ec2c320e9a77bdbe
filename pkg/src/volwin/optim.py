"""AdamW with decoupled weight decay.

The decay multiplies parameters by (1 - lr * wd) before the moment update,
so a zero-gradient step still shrinks decayed parameters. Moments are
bias-corrected in the usual way.
"""

from __future__ import annotations

import numpy as np

from .errors import StateError
from .tensor import Tensor


class AdamW:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise StateError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            mhat = self.m[i] / c1
            vhat = self.v[i] / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)


def adamw_step(param: Tensor, grad: np.ndarray, state: dict, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """Single-tensor functional form; ``state`` holds m, v, and t."""
    if state.get("m") is None:
        state["m"] = np.zeros_like(param.data)
        state["v"] = np.zeros_like(param.data)
        state["t"] = 0
    if state["m"].shape != param.data.shape:
        raise StateError(f"state shape {state['m'].shape} does not match parameter {param.data.shape}")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    if weight_decay:
        param.data *= 1.0 - lr * weight_decay
    state["m"] = b1 * state["m"] + (1.0 - b1) * grad
    state["v"] = b2 * state["v"] + (1.0 - b2) * grad * grad
    mhat = state["m"] / (1.0 - b1**t)
    vhat = state["v"] / (1.0 - b2**t)
    param.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return param, state
