"""Adaptive-moment optimizer with a stepwise learning-rate decay.

The effective learning rate at a given epoch is
``base * factor ** (epoch // period)``; moments carry the usual bias
correction.  States are immutable: each step returns fresh arrays, so a
state can be checkpointed and training resumed bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad


class NonFiniteGradientError(FloatingPointError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float
    decay: float = 0.99
    decay_every: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n, lr, decay=0.99, decay_every=2000, **kw):
        return cls(step=0, m=np.zeros(n), v=np.zeros(n), lr=lr,
                   decay=decay, decay_every=decay_every, **kw)

    def effective_lr(self, epoch):
        return self.lr * self.decay ** (epoch // self.decay_every)


def opt_step(state, params, grad, epoch):
    """One bias-corrected adaptive-moment update; returns (params, state).

    A non-finite gradient rejects the step: the state is returned unchanged
    and the error surfaced to the caller.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != params shape {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError("non-finite gradient; step rejected")
    step = state.step + 1
    # fresh moment arrays (states are immutable); remaining math reuses buffers
    m = state.beta1 * state.m
    m += (1.0 - state.beta1) * grad
    v = state.beta2 * state.v
    v += (1.0 - state.beta2) * grad * grad
    denom = v * (1.0 / (1.0 - state.beta2 ** step))
    np.sqrt(denom, out=denom)
    denom += state.eps
    lr = state.effective_lr(epoch)
    update = m * (lr / (1.0 - state.beta1 ** step))
    update /= denom
    new_params = params - update
    return new_params, replace(state, step=step, m=m, v=v)


class TrainableSet:
    """Joint flat parameter vector over several trainable components.

    Each component exposes ``trainables() -> [(block_name, ndarray)]`` and
    ``rebind(block_name, array)``; construction concatenates all blocks into
    one owning vector and rebinds the components to views of it, so optimizer
    updates are visible everywhere without copying.
    """

    def __init__(self, components):
        self.components = list(components)
        blocks = []
        self.index = {}
        off = 0
        for prefix, obj in self.components:
            for name, arr in obj.trainables():
                flat = np.asarray(arr, dtype=float).ravel()
                self.index[(prefix, name)] = (off, flat.size)
                blocks.append(flat)
                off += flat.size
        self.flat = np.concatenate(blocks) if blocks else np.zeros(0)
        for prefix, obj in self.components:
            for name, _ in obj.trainables():
                o, n = self.index[(prefix, name)]
                obj.rebind(name, self.flat[o:o + n])

    @property
    def size(self):
        return self.flat.size

    def slots(self, theta):
        """Per-component dicts of parameter Nodes sliced from ``theta``."""
        out = {prefix: {} for prefix, _ in self.components}
        for (prefix, name), (o, n) in self.index.items():
            out[prefix][name] = ad.segment(theta, o, n)
        return out

    def assign(self, new_flat):
        """Overwrite the shared storage in place (keeps all views valid)."""
        self.flat[...] = new_flat

    def block_slice(self, prefix, name):
        o, n = self.index[(prefix, name)]
        return slice(o, o + n)


def grad_params(loss_fn, params):
    """Exact reverse-mode gradient of ``loss_fn`` over a flat vector.

    ``loss_fn`` receives the parameters as an autodiff Node and must return a
    scalar Node built from autodiff operations.  Returns (value, gradient).
    """
    theta = ad.Node(np.asarray(params, dtype=float))
    loss = loss_fn(theta)
    value = float(ad.value_of(loss))
    if not np.isfinite(value):
        raise NonFiniteLossError(f"loss evaluated to {value}")
    ad.backward(loss)
    g = theta.grad if theta.grad is not None else np.zeros_like(theta.value)
    return value, g
