"""Adaptive-moment optimizer with decoupled weight decay, plus warmup.

Tensors are immutable, so optimized parameters live in mutable containers
(model param dicts, prompt slots).  Each ParamRef knows how to read the
current leaf tensor and write a replacement; the optimizer owns the moment
state and steps all refs with per-group learning rates.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["ParamRef", "AdamW", "warmup_lr", "TrainingError"]


class TrainingError(ArithmeticError):
    """A training loop hit a numeric failure (divergence, NaN loss)."""


def warmup_lr(base: float, step: int, warmup: int) -> float:
    """Linear warmup: step/warmup * base while step <= warmup, then base.

    Steps are 1-indexed, so the configured rate is reached exactly at
    step == warmup.
    """
    if step < 1:
        raise ValueError(f"step={step} must be >= 1")
    if warmup <= 0:
        return base
    return base * min(1.0, step / warmup)


class ParamRef:
    """Read/write handle for one optimized tensor plus its lr group."""

    __slots__ = ("getter", "setter", "lr_key", "name")

    def __init__(self, getter, setter, lr_key: str, name: str):
        self.getter = getter
        self.setter = setter
        self.lr_key = lr_key
        self.name = name

    def get(self) -> Tensor:
        return self.getter()

    def set(self, t: Tensor) -> None:
        self.setter(t)


class AdamW:
    """Adam moments with decoupled weight decay.

    update = lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)

    State arrays keep the parameter dtype, so float32 runs stay float32
    end to end and are bit-reproducible for a fixed seed and host.
    """

    def __init__(
        self,
        refs: list[ParamRef],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.refs = list(refs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = [np.zeros(r.get().shape, dtype=r.get().dtype) for r in self.refs]
        self._v = [np.zeros(r.get().shape, dtype=r.get().dtype) for r in self.refs]

    def step(self, grads: dict[Tensor, np.ndarray], lr_for: dict[str, float]) -> None:
        """Apply one update from a backward() gradient map.

        Args:
            grads: map produced by tensor.backward for the current graph.
            lr_for: effective learning rate per ParamRef.lr_key, already
                warmup-scaled by the caller.
        """
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, ref in enumerate(self.refs):
            p = ref.get()
            g = grads.get(p)
            if g is None:
                continue
            m = self._m[i]
            v = self._v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            lr = lr_for[ref.lr_key]
            new = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)
            ref.set(Tensor(new, trainable=True, name=p.name, dtype=p.dtype))
