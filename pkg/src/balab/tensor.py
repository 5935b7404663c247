"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a :class:`Node` to the active :class:`Graph`.
``backward`` walks the tape in reverse append order, which is a valid
topological order because an op can only consume tensors that already exist.

Only the operations the adapter lab needs are provided. Broadcasting is
limited to trailing-dimension broadcasts (bias rows, per-head constants and
scalar gates).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
INT_DTYPES = (np.dtype(np.int8), np.dtype(np.int32))
RMS_EPS = 1e-5
MASK_VALUE = -1e9

_local = threading.local()


def _normalize_dtype(arr: np.ndarray, dtype) -> np.ndarray:
    if dtype is not None:
        dt = np.dtype(dtype)
        if dt not in FLOAT_DTYPES + INT_DTYPES:
            raise TypeError(f"unsupported dtype {dt}")
        return np.ascontiguousarray(arr, dtype=dt)
    if arr.dtype in FLOAT_DTYPES + INT_DTYPES:
        return np.ascontiguousarray(arr)
    if arr.dtype.kind == "f":
        return np.ascontiguousarray(arr, dtype=np.float32)
    if arr.dtype.kind in "iub":
        return np.ascontiguousarray(arr, dtype=np.int32)
    raise TypeError(f"unsupported dtype {arr.dtype}")


class Tensor:
    """An n-d array that can take part in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad", "_graph", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        arr = data.data if isinstance(data, Tensor) else np.asarray(data)
        arr = _normalize_dtype(arr, dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if requires_grad and arr.dtype not in FLOAT_DTYPES:
            raise TypeError("integer tensors cannot require grad")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.reshape(-1)[0].item()

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; all route through the recorded ops below.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Append-only tape of recorded operations.

    Use as a context manager to scope recording::

        with Graph() as g:
            loss = f(x)
        backward(loss, g)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        node.output._graph = self
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._graph = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


def _stack() -> list[Graph]:
    if not hasattr(_local, "stack"):
        _local.stack = []
        _local.default = Graph()
        _local.enabled = True
    return _local.stack


def current_graph() -> Graph:
    stack = _stack()
    return stack[-1] if stack else _local.default


def grad_enabled() -> bool:
    _stack()
    return _local.enabled


@contextmanager
def no_grad():
    """Disable recording within the block."""
    _stack()
    prev = _local.enabled
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _finish(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(Node(op, inputs, out, grad_fn))
    return out


def _require_float(*ts: Tensor) -> None:
    for t in ts:
        if t.dtype not in FLOAT_DTYPES:
            raise TypeError(f"float tensor required, got {t.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None
    if a.dtype != b.dtype:
        raise TypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    return _finish(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    return _finish(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    return _finish(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a Python constant."""
    f = x.dtype.type(factor)
    return _finish("scale", x.data * f, (x,), lambda g: (g * f,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for large |x| and no masked indexing
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    _require_float(x)
    s = _sigmoid(x.data)
    return _finish("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def _silu_grad(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (1 + x * (1 - s))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    _require_float(x)
    s = _sigmoid(x.data)
    return _finish("silu", x.data * s, (x,), lambda g: (g * _silu_grad(x.data, s),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_float(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", y, (x,), grad_fn)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """Row-wise ``x / sqrt(mean(x^2) + eps) * gain`` over the last axis."""
    _require_float(x, gain)
    if gain.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm: gain {gain.shape} does not match rows of {x.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * r
    out = normed * gain.data

    def grad_fn(g):
        gg = g * gain.data
        c = x.shape[-1]
        dx = r * gg - normed * (r * (gg * normed).sum(axis=-1, keepdims=True) / c)
        dgain = (g * normed).reshape(-1, c).sum(axis=0)
        return dx, dgain

    return _finish("rmsnorm", out, (x, gain), grad_fn)


def rotate_half(x: Tensor) -> Tensor:
    """Map the last axis ``[x1, x2]`` to ``[-x2, x1]`` (rotary helper)."""
    h = x.shape[-1] // 2
    if x.shape[-1] % 2:
        raise DimensionError(f"rotate_half needs an even last axis, got {x.shape}")
    out = np.concatenate([-x.data[..., h:], x.data[..., :h]], axis=-1)

    def grad_fn(g):
        return (np.concatenate([g[..., h:], -g[..., :h]], axis=-1),)

    return _finish("rotate_half", out, (x,), grad_fn)


# -------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must agree."""
    _require_float(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _finish("matmul", a.data @ b.data, (a, b), grad_fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _finish(
        "transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
        lambda g: (g.transpose(inverse),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice / integer) indexing."""
    out = np.array(x.data[index], copy=True)
    if out.ndim == 0:
        out = out.reshape(1)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[index] += g.reshape(full[index].shape)
        return (full,)

    return _finish("getitem", out, (x,), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat of nothing")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
        if t.dtype != ref.dtype:
            raise TypeError("concat: dtype mismatch")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def grad_fn(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _finish("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    """Sum over one axis (dropped) or over everything (shape ``(1,)``)."""
    if axis is None:
        return _finish(
            "sum", np.asarray(x.data.sum()).reshape(1), (x,),
            lambda g: (np.full(x.shape, g.reshape(()), dtype=x.dtype),),
        )
    ax = axis % x.ndim
    out = x.data.sum(axis=ax)
    if out.ndim == 0:
        out = out.reshape(1)

    def grad_fn(g):
        kept = g.reshape(tuple(s for i, s in enumerate(x.shape) if i != ax))
        return (np.broadcast_to(np.expand_dims(kept, ax), x.shape).copy(),)

    return _finish("sum", out, (x,), grad_fn)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def grad_fn(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _finish("embedding", weight.data[ids], (weight,), grad_fn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not -1."""
    _require_float(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    m = logits.shape[1]
    if np.any((targets < -1) | (targets >= m)):
        raise IndexError(f"cross_entropy: target outside [0, {m})")
    rows = np.nonzero(targets >= 0)[0]
    if rows.size == 0:
        raise ContractError("cross_entropy: every position is masked")
    z = logits.data[rows]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(rows.size), targets[rows]]
    loss = (logsum - picked).mean()

    def grad_fn(g):
        p = np.exp(shifted - logsum[:, None])
        p[np.arange(rows.size), targets[rows]] -= 1
        full = np.zeros_like(logits.data)
        full[rows] = p * (g.reshape(()) / rows.size)
        return (full,)

    return _finish("cross_entropy", np.asarray([loss], dtype=logits.dtype), (logits,), grad_fn)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``.grad`` of every recorded tensor upstream of ``loss``.

    Gradients accumulate into existing buffers. The thread's default graph is
    cleared afterwards; explicit graphs are left to their owner.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = loss._graph
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    if graph is None:
        return
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
            inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    _stack()
    if graph is _local.default:
        graph.clear()


# ---------------------------------------------------------------- grad check


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise NumericError("grad_check: non-finite gradient")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and
    central differences, ``|a - n| / max(1, |n|)`` over all coordinates."""
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    with Graph() as g:
        out = f(probe)
    backward(out, g)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(base.size):
            plus = base.copy().reshape(-1)
            minus = base.copy().reshape(-1)
            plus[i] += h
            minus[i] -= h
            fp = f(Tensor(plus.reshape(base.shape))).item()
            fm = f(Tensor(minus.reshape(base.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: non-finite function value")
            flat[i] = (fp - fm) / (2 * h)
    return _relative_error(analytic, numeric)


def grad_check_tensors(
    f: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Like :func:`grad_check` but perturbs float64 tensors ``f`` closes over.

    With ``max_coords`` set, each tensor is probed at that many randomly
    chosen coordinates instead of all of them.
    """
    tensors = list(tensors)
    for t in tensors:
        if t.dtype != np.float64:
            raise TypeError("grad_check_tensors needs float64 tensors")
        t.grad = None
    with Graph() as g:
        out = f()
    backward(out, g)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t in tensors:
            analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
            flat = t.data.reshape(-1)
            coords = np.arange(t.size)
            if max_coords is not None and t.size > max_coords:
                coords = rng.choice(t.size, size=max_coords, replace=False)
            numeric = np.empty(coords.size)
            for j, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("grad_check: non-finite function value")
                numeric[j] = (fp - fm) / (2 * h)
            worst = max(worst, _relative_error(analytic[coords], numeric))
    return worst
