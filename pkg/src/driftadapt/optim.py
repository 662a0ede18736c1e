"""Named parameter store and Adam updates.

The store owns every learnable tensor of a model, keyed by a dotted
name.  Adaptation methods mark a subset trainable; ``adam_step`` then
updates exactly the trainable parameters that received a gradient and
leaves everything else bit-identical.  Adam moments live here so that
snapshot/restore can capture optimizer state together with weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import ConfigError


@dataclass
class Param:
    name: str
    tensor: Tensor
    trainable: bool = True
    m: np.ndarray = field(default=None)  # first moment, allocated on first step
    v: np.ndarray = field(default=None)  # second moment


class ParamStore:
    """Ordered mapping of parameter name to Param."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Param:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Param(name=name, tensor=tensor, trainable=trainable)
        tensor.requires_grad = trainable
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        if name not in self._params:
            raise ConfigError(f"unknown parameter {name!r}")
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def num_values(self, trainable_only: bool = False) -> int:
        return sum(p.tensor.data.size for p in self
                   if p.trainable or not trainable_only)

    def set_trainable(self, names) -> None:
        """Mark exactly `names` trainable; everything else frozen."""
        wanted = set(names)
        unknown = wanted - set(self._params)
        if unknown:
            raise ConfigError(f"unknown parameters in trainable set: {sorted(unknown)}")
        for p in self:
            p.trainable = p.name in wanted
            p.tensor.requires_grad = p.trainable
            if not p.trainable:
                p.tensor.grad = None

    def zero_grad(self) -> None:
        for p in self:
            p.tensor.grad = None


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> int:
    """One Adam update over trainable params that hold a gradient.

    Returns the number of parameters updated.  When no gradients were
    populated (for example after a fully masked loss) nothing changes,
    including the step counter, so unrelated state stays bit-identical.
    """
    touched = [p for p in store if p.trainable and p.tensor.grad is not None]
    if not touched:
        return 0

    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in touched:
        g = p.tensor.grad.astype(np.float64)
        if p.m is None:
            p.m = np.zeros(p.tensor.data.shape, dtype=np.float64)
            p.v = np.zeros(p.tensor.data.shape, dtype=np.float64)
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        mhat = p.m / c1
        vhat = p.v / c2
        upd = lr * mhat / (np.sqrt(vhat) + eps)
        p.tensor.data = (p.tensor.data.astype(np.float64) - upd).astype(p.tensor.data.dtype)
        p.tensor.grad = None
    return len(touched)
