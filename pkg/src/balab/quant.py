"""Symmetric per-output-channel int8 weight-only quantization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor

QMAX = 127


def quantize_rows(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Quantize ``w[out, in]`` row by row; all-zero rows get scale 1.0."""
    w = np.asarray(w)
    amax = np.abs(w).max(axis=1)
    scales = np.where(amax > 0, amax / QMAX, 1.0).astype(w.dtype if w.dtype.kind == "f" else np.float32)
    q = np.clip(np.rint(w / scales[:, None]), -QMAX, QMAX).astype(np.int8)
    return q, scales


def dequantize_rows(q: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return q.astype(scales.dtype) * scales[:, None]


class QuantLinear(Module):
    """Frozen linear layer storing int8 weights, dequantized on every call."""

    def __init__(self, q_weight: np.ndarray, scales: np.ndarray, bias: np.ndarray | None = None):
        self.q_weight = Tensor(q_weight, dtype=np.int8)
        self.scales = Tensor(scales)
        self.bias = None if bias is None else Tensor(bias)

    @classmethod
    def from_linear(cls, lin: Linear) -> "QuantLinear":
        q, s = quantize_rows(lin.weight.data)
        return cls(q, s, None if lin.bias is None else lin.bias.data.copy())

    @property
    def in_features(self) -> int:
        return self.q_weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.q_weight.shape[0]

    def dense_weight(self) -> np.ndarray:
        return dequantize_rows(self.q_weight.data, self.scales.data)

    def __call__(self, x: Tensor) -> Tensor:
        w = dequantize_rows(self.q_weight.data, self.scales.data.astype(x.dtype))
        y = T.matmul(x, Tensor(np.ascontiguousarray(w.T)))
        return y if self.bias is None else T.add(y, Tensor(self.bias.data.astype(x.dtype)))


@dataclass
class LayerBytes:
    name: str
    shape: tuple[int, int]
    float_bytes: int
    quant_bytes: int


@dataclass
class MemoryReport:
    layers: list[LayerBytes] = field(default_factory=list)
    other_bytes: int = 0

    @property
    def float_bytes(self) -> int:
        return sum(layer.float_bytes for layer in self.layers) + self.other_bytes

    @property
    def quant_bytes(self) -> int:
        return sum(layer.quant_bytes for layer in self.layers) + self.other_bytes

    @property
    def reduction(self) -> float:
        return self.float_bytes / self.quant_bytes

    def to_dict(self) -> dict:
        return {
            "float_bytes": self.float_bytes,
            "quant_bytes": self.quant_bytes,
            "reduction": self.reduction,
            "other_bytes": self.other_bytes,
            "layers": [vars(layer) | {"shape": list(layer.shape)} for layer in self.layers],
        }


def linear_bytes(out_features: int, in_features: int, has_bias: bool, itemsize: int = 4) -> tuple[int, int]:
    """(float bytes, int8 bytes) for one layer; bias stays float in both."""
    bias = out_features * itemsize if has_bias else 0
    return (out_features * in_features * itemsize + bias,
            out_features * in_features + out_features * itemsize + bias)


def _frozen_linears(module: Module, prefix: str = ""):
    for key, val in vars(module).items():
        name = prefix + key
        if isinstance(val, Linear) and not val.weight.requires_grad:
            yield module, key, None, name, val
        elif isinstance(val, Module):
            yield from _frozen_linears(val, name + ".")
        elif isinstance(val, list):
            for i, v in enumerate(val):
                if isinstance(v, Linear) and not v.weight.requires_grad:
                    yield module, key, i, f"{name}.{i}", v
                elif isinstance(v, Module):
                    yield from _frozen_linears(v, f"{name}.{i}.")


def quantize_module(module: Module) -> MemoryReport:
    """Swap every frozen :class:`Linear` under ``module`` for a :class:`QuantLinear`.

    The report's ``other_bytes`` covers every tensor left unquantized
    (embeddings, norm gains, trainable parameters).
    """
    report = MemoryReport()
    for owner, key, idx, name, lin in list(_frozen_linears(module)):
        ql = QuantLinear.from_linear(lin)
        fb, qb = linear_bytes(lin.out_features, lin.in_features, lin.bias is not None,
                              lin.weight.data.itemsize)
        report.layers.append(LayerBytes(name, lin.weight.shape, fb, qb))
        if idx is None:
            setattr(owner, key, ql)
        else:
            getattr(owner, key)[idx] = ql
    quantized = {f"{layer.name}.{p}" for layer in report.layers for p in ("q_weight", "scales", "bias")}
    report.other_bytes = sum(t.data.nbytes for n, t in module.named_tensors() if n not in quantized)
    return report
