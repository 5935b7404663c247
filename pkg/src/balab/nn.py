"""Module container and the float linear layer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes to find tensors, like a stripped-down ``nn.Module``.

    Tensors, sub-modules, and lists/dicts of either are discovered; plain
    numpy arrays are treated as constants.
    """

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(val, prefix + key)

    def tensors(self) -> dict[str, Tensor]:
        return dict(self.named_tensors())

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors() if t.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors() if not t.requires_grad}

    def num_params(self, trainable_only: bool = False) -> int:
        ts = self.trainable() if trainable_only else self.tensors()
        return int(np.sum([t.size for t in ts.values()], dtype=np.int64))

    def to(self, dtype) -> "Module":
        """Cast every float tensor in place."""
        dtype = np.dtype(dtype)
        for _, t in self.named_tensors():
            if t.dtype in T.FLOAT_DTYPES and t.dtype != dtype:
                t.data = t.data.astype(dtype)
                t.grad = None
        return self

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None


def _walk(val, name: str):
    if isinstance(val, Tensor):
        yield name, val
    elif isinstance(val, Module):
        yield from val.named_tensors(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, v in enumerate(val):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(val, dict):
        for k, v in val.items():
            yield from _walk(v, f"{name}.{k}")


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, dtype=np.float32) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); Kaiming-uniform with a=sqrt(5)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored ``[out, in]``."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray | None = None, trainable: bool = False):
        self.weight = Tensor(weight, requires_grad=trainable)
        self.bias = None if bias is None else Tensor(bias, requires_grad=trainable)

    @classmethod
    def init(cls, rng, d_in: int, d_out: int, bias: bool = True, trainable: bool = False,
             std: float | None = None) -> "Linear":
        if std is None:
            w = kaiming_uniform(rng, d_in, (d_out, d_in))
        else:
            w = (rng.standard_normal((d_out, d_in)) * std).astype(np.float32)
        b = np.zeros(d_out, dtype=np.float32) if bias else None
        return cls(w, b, trainable)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def dense_weight(self) -> np.ndarray:
        return self.weight.data

    def __call__(self, x: Tensor) -> Tensor:
        if self.weight.requires_grad:
            y = T.matmul(x, T.transpose(self.weight))
        else:
            y = T.matmul(x, Tensor(self.weight.data.T))
        return y if self.bias is None else T.add(y, self.bias)
