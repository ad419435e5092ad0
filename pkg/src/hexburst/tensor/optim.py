"""AdamW with decoupled weight decay (Loshchilov & Hutter)."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericalError, ShapeError


@dataclass
class OptimState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One in-place AdamW update of ``params`` (name -> ndarray).

    Raises NumericalError, leaving params and state untouched, when any
    gradient is non-finite.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name!r}; step rejected")

    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    """Optimizer over a name -> Tensor mapping, reading ``.grad`` of each."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.state = OptimState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        arrays = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        adamw_step(arrays, grads, self.state)
