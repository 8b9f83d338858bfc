"""Named parameter container and the Adam optimiser."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Ordered, uniquely named trainable tensors.

    Initialisation draws from one seeded generator in creation order, so a
    fixed seed and model config give bit-identical parameters.
    """

    def __init__(self, seed: int = 0):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()  # non-trainable state, e.g. running stats
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def create(self, name: str, shape: tuple[int, ...], init: str = "glorot") -> Tensor:
        if init == "glorot":
            fan_in = shape[0] if len(shape) > 1 else 1
            fan_out = shape[-1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            value = self.rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown initialiser {init!r}")
        return self.add(name, value)

    def buffer(self, name: str, value) -> np.ndarray:
        if name in self.buffers or name in self._params:
            raise KeyError(f"duplicate name {name!r}")
        self.buffers[name] = np.array(value, dtype=np.float64)
        return self.buffers[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def n_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state(self) -> OrderedDict[str, np.ndarray]:
        """Parameters then buffers, each in creation order."""
        out = OrderedDict((k, v.data.copy()) for k, v in self._params.items())
        out.update((k, v.copy()) for k, v in self.buffers.items())
        return out

    def load_state(self, state) -> None:
        names = list(self._params) + list(self.buffers)
        missing = set(names) - set(state)
        extra = set(state) - set(names)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            target = self._params[k].data if k in self._params else self.buffers[k]
            if v.shape != target.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {target.shape}")
            if k in self._params:
                self._params[k].data = v.copy()
            else:
                self.buffers[k][...] = v


class Adam:
    def __init__(self, store: ParameterStore, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.store, self.lr, self.beta1, self.beta2, self.eps = store, lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in store.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in store.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.store.items():
            if p.grad is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad**2
            if self.lr:
                p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
