"""Adam optimizer with bias correction, supporting per-group learning rates."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class Adam:
    """Standard Adam. Groups are (params, lr) pairs sharing one step counter."""

    def __init__(self, groups, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        # groups: iterable of (list[Parameter], lr) or a flat (params, lr) pair
        if groups and isinstance(groups[0], Parameter):
            raise TypeError("pass groups as [(params, lr), ...]")
        self.groups = []
        for params, lr in groups:
            if lr <= 0:
                raise ValueError(f"learning rate must be positive, got {lr}")
            self.groups.append((list(params), float(lr)))
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}
        for params, _ in self.groups:
            for p in params:
                if p.name in self.m:
                    raise ValueError(f"duplicate parameter name {p.name!r}")
                self.m[p.name] = np.zeros_like(p.data)
                self.v[p.name] = np.zeros_like(p.data)

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for params, lr in self.groups:
            for p in params:
                if not p.trainable:
                    continue
                g = p.grad
                m = self.m[p.name]
                v = self.v[p.name]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()

    def lr_of(self, name: str) -> float:
        for params, lr in self.groups:
            for p in params:
                if p.name == name:
                    return lr
        raise KeyError(name)

    # -- checkpoint support ---------------------------------------------------

    def state_tensors(self) -> dict:
        """Moment buffers keyed for serialization (step counter separate)."""
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: dict, t: int) -> None:
        for name in self.m:
            self.m[name][...] = tensors[f"adam.m.{name}"]
            self.v[name][...] = tensors[f"adam.v.{name}"]
        self.t = int(t)
