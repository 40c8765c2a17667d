"""Named parameter storage and the AdamW update."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered mapping of unique names to trainable tensors plus AdamW state."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def num_values(self) -> int:
        return sum(t.size for t in self.params.values())


def adamw_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01, names=None) -> None:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Gradients are left in place; the caller zeroes them.
    """
    for name in (store.params if names is None else names):
        p = store.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        store.steps[name] += 1
        k = store.steps[name]
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        m = store.m[name] = beta1 * store.m[name] + (1 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** k)
        v_hat = v / (1 - beta2 ** k)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
