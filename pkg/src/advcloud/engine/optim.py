"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from advcloud.engine.tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamWState) -> None:
    """Apply one AdamW update in place to ``params`` (arrays or tensors)."""
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    if len(grads) != len(arrays):
        raise ValueError(f"adamw_step: {len(arrays)} params but {len(grads)} grads")
    for i, g in enumerate(grads):
        if g is None:
            raise ValueError(f"adamw_step: parameter {i} has no gradient")
        if g.shape != arrays[i].shape:
            raise ValueError(f"adamw_step: grad {i} shape {g.shape} != param shape {arrays[i].shape}")
    if not state.m:
        state.m = [np.zeros_like(a) for a in arrays]
        state.v = [np.zeros_like(a) for a in arrays]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        if state.weight_decay:
            a -= state.lr * state.weight_decay * a
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        a -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    def __init__(self, params, lr=1e-4, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamWState(lr=lr, weight_decay=weight_decay,
                                beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
