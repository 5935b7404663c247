"""Adapter families: residual bottleneck with grouped up-projection and the
router, concatenation and LoHa variants used for ablation.

All families share one contract: ``Adapter(spec, rng)(Z) -> Z'`` with ``Z``
of shape ``[n, c]``. Output-side weights start at zero so every freshly built
adapter is exactly the identity map. ``spec.scale`` multiplies the residual
branch; the functional forwards below are the unscaled forms.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import tensor as T
from .errors import DimensionError, SpecError
from .nn import Module, kaiming_uniform
from .tensor import Tensor

FAMILIES = (
    "bottleneck",
    "bottleneck_weight_scaled",
    "concat",
    "router_mixture",
    "loha_plain",
    "loha_routed",
    "loha_silu",
)
ROUTED = ("bottleneck_weight_scaled", "router_mixture", "loha_routed")
LOHA = ("loha_plain", "loha_routed", "loha_silu")


@dataclass(frozen=True)
class AdapterSpec:
    family: str = "bottleneck"
    channel_dim: int = 64
    bottleneck_dim: int = 16
    groups: int = 2
    rank: int = 8
    route_temperature: float = 10.0
    scale: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise SpecError(f"family: unknown adapter family {self.family!r}")
        for name in ("channel_dim", "bottleneck_dim", "groups", "rank"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise SpecError(f"{name}: must be a positive int, got {v!r}")
        c, d, k = self.channel_dim, self.bottleneck_dim, self.groups
        if d % k:
            raise SpecError(f"groups: {k} does not divide bottleneck_dim {d}")
        if c % k:
            raise SpecError(f"groups: {k} does not divide channel_dim {c}")
        if d >= c:
            raise SpecError(f"bottleneck_dim: {d} must be smaller than channel_dim {c}")
        if not self.route_temperature > 0:
            raise SpecError(f"route_temperature: must be positive, got {self.route_temperature}")
        if not self.scale > 0:
            raise SpecError(f"scale: must be positive, got {self.scale}")
        if self.family == "concat" and (c % 2 or (c // 2) % k):
            raise SpecError(f"channel_dim: concat needs {c}/2 divisible by groups {k}")

    def with_channels(self, c: int) -> "AdapterSpec":
        return replace(self, channel_dim=c)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ functional


def grouped_linear(Z: Tensor, blocks, bias: Tensor) -> Tensor:
    """Block-diagonal projection: column group ``i`` of ``Z`` times ``blocks[i]``,
    results concatenated along columns, plus ``bias``."""
    k = len(blocks)
    c_in = Z.shape[-1]
    if k == 0 or c_in % k:
        raise SpecError(f"groups: {k} does not divide input width {c_in}")
    gi = c_in // k
    go = blocks[0].shape[1]
    if bias.shape != (go * k,):
        raise SpecError(f"groups: bias width {bias.shape} is not {k} x {go}")
    for b in blocks:
        if b.shape != (gi, go):
            raise DimensionError(f"grouped_linear: block {b.shape} expected {(gi, go)}")
    if k == 1:
        return T.add(T.matmul(Z, blocks[0]), bias)
    parts = [T.matmul(Z[:, i * gi:(i + 1) * gi], blocks[i]) for i in range(k)]
    return T.add(T.concat(parts, axis=1), bias)


def _blocks(p: dict, prefix: str) -> list[Tensor]:
    out = []
    i = 0
    while f"{prefix}.block{i}" in p:
        out.append(p[f"{prefix}.block{i}"])
        i += 1
    return out


def _check_width(Z: Tensor, c: int) -> None:
    if Z.ndim != 2 or Z.shape[1] != c:
        raise DimensionError(f"adapter expects [n, {c}] input, got {Z.shape}")


def bottleneck_branch(Z: Tensor, p: dict, prefix: str = "") -> Tensor:
    """Linear dense-down, grouped-up path without the residual."""
    w = p[prefix + "down.weight"]
    _check_width(Z, w.shape[0])
    h = T.add(T.matmul(Z, w), p[prefix + "down.bias"])
    return grouped_linear(h, _blocks(p, prefix + "up"), p[prefix + "up.bias"])


def bottleneck_forward(Z: Tensor, p: dict) -> Tensor:
    """``Z + up(down(Z))``; no non-linearity between the projections."""
    return T.add(Z, bottleneck_branch(Z, p))


def loha_compose(X1: Tensor, Y1: Tensor, X2: Tensor, Y2: Tensor) -> Tensor:
    """``(X1 Y1^T) * (X2 Y2^T)`` elementwise."""
    ranks = {X1.shape[1], Y1.shape[1], X2.shape[1], Y2.shape[1]}
    if len(ranks) != 1:
        raise SpecError(f"rank: factor ranks disagree {sorted(ranks)}")
    if X1.shape != X2.shape or Y1.shape != Y2.shape:
        raise DimensionError(f"loha_compose: factor shapes {X1.shape}/{X2.shape}, {Y1.shape}/{Y2.shape}")
    return T.mul(T.matmul(X1, T.transpose(Y1)), T.matmul(X2, T.transpose(Y2)))


def _loha_weight(p: dict, prefix: str) -> Tensor:
    return loha_compose(p[prefix + "x1"], p[prefix + "y1"], p[prefix + "x2"], p[prefix + "y2"])


def causal_mean_matrix(n: int, dtype=np.float32) -> np.ndarray:
    """Row ``t`` averages rows ``0..t``: ``M @ Z`` is the running token mean."""
    return (np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]).astype(dtype)


def route_weights(Z: Tensor, router: Tensor, bias: Tensor, temperature: float,
                  causal: bool = False) -> Tensor:
    """Mean-pool tokens, project to two logits, softmax at ``temperature``.

    Returns a ``[1, 2]`` tensor whose columns are the two branch weights. With
    ``causal`` the pool at row ``t`` covers rows ``0..t`` only and the result
    is ``[n, 2]``, so a decoder's routes never see later tokens.
    """
    if not temperature > 0:
        raise SpecError(f"route_temperature: must be positive, got {temperature}")
    if causal:
        pooled = T.matmul(Tensor(causal_mean_matrix(Z.shape[0], Z.dtype)), Z)
    else:
        pooled = T.reshape(T.mean(Z, axis=0), (1, -1))
    logits = T.add(T.matmul(pooled, router), bias)
    return T.softmax(T.scale(logits, 1.0 / temperature), axis=-1)


def _routes(Z: Tensor, p: dict, temperature: float, causal: bool) -> tuple[Tensor, Tensor]:
    w = route_weights(Z, p["router.weight"], p["router.bias"], temperature, causal)
    return w[:, 0:1], w[:, 1:2]


def loha_forward(Z: Tensor, p: dict, variant: str, temperature: float = 10.0, causal: bool = False) -> Tensor:
    if variant == "loha_plain":
        W = _loha_weight(p, "w.")
        _check_width(Z, W.shape[0])
        return T.add(Z, T.matmul(Z, W))
    if variant == "loha_routed":
        W1, W2 = _loha_weight(p, "w1."), _loha_weight(p, "w2.")
        _check_width(Z, W1.shape[0])
        r1, r2 = _routes(Z, p, temperature, causal)
        mixed = T.add(T.mul(T.matmul(Z, W1), r1), T.mul(T.matmul(Z, W2), r2))
        return T.add(Z, mixed)
    if variant == "loha_silu":
        inner, outer = _loha_weight(p, "inner."), _loha_weight(p, "outer.")
        _check_width(Z, inner.shape[0])
        return T.add(Z, T.matmul(T.silu(T.matmul(Z, inner)), outer))
    raise SpecError(f"family: {variant!r} is not a LoHa variant")


def concat_forward(Z: Tensor, p: dict) -> Tensor:
    """``Z + [branch1(Z), branch2(Z)]``, each branch emitting half the width."""
    if Z.shape[-1] % 2:
        raise SpecError(f"channel_dim: concat needs even width, got {Z.shape[-1]}")
    halves = [bottleneck_branch(Z, p, "branch1."), bottleneck_branch(Z, p, "branch2.")]
    return T.add(Z, T.concat(halves, axis=1))


def weight_scaled_forward(Z: Tensor, p: dict, temperature: float = 10.0, causal: bool = False) -> Tensor:
    """``Z + w1 * branch1(Z) + w2 * branch2(Z)`` with routed scalar weights."""
    r1, r2 = _routes(Z, p, temperature, causal)
    b1 = bottleneck_branch(Z, p, "branch1.")
    b2 = bottleneck_branch(Z, p, "branch2.")
    return T.add(Z, T.add(T.mul(b1, r1), T.mul(b2, r2)))


def router_mixture_forward(Z: Tensor, p: dict, temperature: float = 10.0, causal: bool = False) -> Tensor:
    """Shared down-projection feeding two routed grouped up-projections."""
    w = p["down.weight"]
    _check_width(Z, w.shape[0])
    h = T.add(T.matmul(Z, w), p["down.bias"])
    r1, r2 = _routes(Z, p, temperature, causal)
    u1 = grouped_linear(h, _blocks(p, "up1"), p["up1.bias"])
    u2 = grouped_linear(h, _blocks(p, "up2"), p["up2.bias"])
    return T.add(Z, T.add(T.mul(u1, r1), T.mul(u2, r2)))


# ---------------------------------------------------------------- parameters


def count_params(spec: AdapterSpec) -> int:
    """Trainable scalar count, from the shape formulas of each family."""
    c, d, k, r = spec.channel_dim, spec.bottleneck_dim, spec.groups, spec.rank
    branch = c * d + d + d * c // k + c
    router = 2 * c + 2
    loha = 4 * c * r
    return {
        "bottleneck": branch,
        "bottleneck_weight_scaled": 2 * branch + router,
        "concat": 2 * (c * d + d + d * (c // 2) // k + c // 2),
        "router_mixture": c * d + d + 2 * (d * c // k + c) + router,
        "loha_plain": loha,
        "loha_routed": 2 * loha + router,
        "loha_silu": 2 * loha,
    }[spec.family]


def _branch_params(rng, c: int, d: int, k: int, c_out: int, prefix: str, dtype) -> dict:
    p = {
        prefix + "down.weight": kaiming_uniform(rng, c, (c, d), dtype),
        prefix + "down.bias": np.zeros(d, dtype),
        prefix + "up.bias": np.zeros(c_out, dtype),
    }
    for i in range(k):
        p[f"{prefix}up.block{i}"] = np.zeros((d // k, c_out // k), dtype)
    return p


def _loha_params(rng, c: int, r: int, prefix: str, zero_out: bool, dtype) -> dict:
    std = c ** -0.125 * r ** -0.25
    p = {prefix + n: (rng.standard_normal((c, r)) * std).astype(dtype) for n in ("x1", "y1", "x2", "y2")}
    if zero_out:
        p[prefix + "y2"][:] = 0
    return p


def init_params(spec: AdapterSpec, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    c, d, k, r = spec.channel_dim, spec.bottleneck_dim, spec.groups, spec.rank
    fam = spec.family
    p: dict[str, np.ndarray] = {}
    if fam == "bottleneck":
        p = _branch_params(rng, c, d, k, c, "", dtype)
    elif fam == "bottleneck_weight_scaled":
        p = {**_branch_params(rng, c, d, k, c, "branch1.", dtype),
             **_branch_params(rng, c, d, k, c, "branch2.", dtype)}
    elif fam == "concat":
        p = {**_branch_params(rng, c, d, k, c // 2, "branch1.", dtype),
             **_branch_params(rng, c, d, k, c // 2, "branch2.", dtype)}
    elif fam == "router_mixture":
        p = {"down.weight": kaiming_uniform(rng, c, (c, d), dtype), "down.bias": np.zeros(d, dtype)}
        for up in ("up1", "up2"):
            p[f"{up}.bias"] = np.zeros(c, dtype)
            for i in range(k):
                p[f"{up}.block{i}"] = np.zeros((d // k, c // k), dtype)
    elif fam == "loha_plain":
        p = _loha_params(rng, c, r, "w.", True, dtype)
    elif fam == "loha_routed":
        p = {**_loha_params(rng, c, r, "w1.", True, dtype), **_loha_params(rng, c, r, "w2.", True, dtype)}
    elif fam == "loha_silu":
        p = {**_loha_params(rng, c, r, "inner.", False, dtype), **_loha_params(rng, c, r, "outer.", True, dtype)}
    if fam in ROUTED:
        p["router.weight"] = kaiming_uniform(rng, c, (c, 2), dtype)
        p["router.bias"] = np.zeros(2, dtype)
    return p


class Adapter(Module):
    """One adapter instance; ``params`` holds its trainable tensors."""

    def __init__(self, spec: AdapterSpec, rng: np.random.Generator | None = None, dtype=np.float32,
                 params: dict[str, np.ndarray] | None = None, causal: bool = False):
        self.spec = spec
        self.causal = causal
        rng = rng if rng is not None else np.random.default_rng(0)
        raw = params if params is not None else init_params(spec, rng, dtype)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}

    def __call__(self, Z: Tensor) -> Tensor:
        out = self._forward(Z)
        if self.spec.scale == 1.0:
            return out
        # Z + s * (f(Z) - Z): the zero-initialized branch stays exactly zero
        return T.add(Z, T.scale(T.sub(out, Z), self.spec.scale))

    def _forward(self, Z: Tensor) -> Tensor:
        fam, p, tau = self.spec.family, self.params, self.spec.route_temperature
        if fam == "bottleneck":
            return bottleneck_forward(Z, p)
        if fam == "bottleneck_weight_scaled":
            return weight_scaled_forward(Z, p, tau, self.causal)
        if fam == "concat":
            return concat_forward(Z, p)
        if fam == "router_mixture":
            return router_mixture_forward(Z, p, tau, self.causal)
        return loha_forward(Z, p, fam, tau, self.causal)
