"""Optimizers that consume {name: gradient} maps over a parameter registry.

Both optimizers touch only trainable parameters; frozen entries are left
bitwise untouched. AdamW uses decoupled weight decay applied to weight
matrices only — one-dimensional parameters (biases, layer-norm gains and
biases, scaling vectors) are never decayed.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ContractError
from .model import ParameterRegistry


def _grad_array(g) -> np.ndarray:
    return g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)


class SGD:
    def __init__(self, registry: ParameterRegistry, lr: float):
        self.registry = registry
        self.lr = float(lr)

    def step(self, grads: dict) -> None:
        for name in self.registry.names():
            if not self.registry.is_trainable(name):
                continue
            p = self.registry[name]
            p.data = p.data - self.lr * _grad_array(grads[name])


class AdamW:
    def __init__(self, registry: ParameterRegistry, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.registry = registry
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _decayed(self, name: str) -> bool:
        return self.registry[name].data.ndim > 1

    def step(self, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in self.registry.names():
            if not self.registry.is_trainable(name):
                continue
            if name not in grads:
                raise ContractError(f"missing gradient for trainable parameter {name!r}")
            g = _grad_array(grads[name])
            p = self.registry[name]
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            v = self._v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and self._decayed(name):
                update = update + self.weight_decay * p.data
            p.data = p.data - self.lr * update


def make_optimizer(kind: str, registry: ParameterRegistry, lr: float, weight_decay: float = 0.01):
    kind = kind.lower()
    if kind == "adamw":
        return AdamW(registry, lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(registry, lr)
    raise ContractError(f"unknown optimizer {kind!r}; known: adamw, sgd")
