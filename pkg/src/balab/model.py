"""Tiny ViT encoder + decoder LM joined by a visual neck, with adapters.

Pipeline for one sample::

    V   = [cls] states of the encoder after every ``cls_stride``-th layer
    V'  = silu(V W_v + b_v) W_t + b_t
    Z   = [u_m, V', T]  (image)   or   [u_m, T]  (text only)
    logits = LM(Z)

The backbone (encoder, LM, token embeddings, head) is random-initialized from
``ModelConfig.seed`` and frozen; adapters, neck and modality prefixes train.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .adapters import Adapter, AdapterSpec
from .errors import ConfigError, ContractError, DimensionError, InputError, SpecError
from .nn import Linear, Module, kaiming_uniform
from .quant import MemoryReport, quantize_module
from .tensor import Tensor

VIT_SITES = ("before_mha", "before_ffn")
LM_SITES = ("before_block",)

# Random-init stand-ins for the vision backbones compared in ablations.
VISION_PRESETS = {
    "clip": dict(enc_layers=8, enc_dim=64, enc_heads=4, image_size=16),
    "alip": dict(enc_layers=8, enc_dim=48, enc_heads=4, image_size=16),
    "diht": dict(enc_layers=8, enc_dim=64, enc_heads=4, image_size=24),
}
LM_PRESETS = {
    "llama": dict(lm_layers=4, lm_dim=64, lm_heads=4, max_seq=32),
    "llama2": dict(lm_layers=4, lm_dim=64, lm_heads=4, max_seq=64),
}


@dataclass(frozen=True)
class PlacementPolicy:
    lm_sites: tuple[str, ...] = LM_SITES
    vit_sites: tuple[str, ...] = VIT_SITES

    def __post_init__(self):
        object.__setattr__(self, "lm_sites", tuple(self.lm_sites))
        object.__setattr__(self, "vit_sites", tuple(self.vit_sites))
        for s in self.lm_sites:
            if s not in LM_SITES:
                raise ConfigError("model.placement.lm_sites", f"unknown site {s!r}")
        for s in self.vit_sites:
            if s not in VIT_SITES:
                raise ConfigError("model.placement.vit_sites", f"unknown site {s!r}")


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 8
    enc_dim: int = 64
    enc_heads: int = 4
    enc_ffn_dim: int = 256
    patch_size: int = 4
    image_size: int = 16
    image_channels: int = 3
    lm_layers: int = 4
    lm_dim: int = 64
    lm_heads: int = 4
    lm_ffn_dim: int = 172
    vocab: int = 64
    max_seq: int = 32
    cls_stride: int = 4
    neck_dim: int = 16
    neck_gain_v: float = 5.0
    neck_gain_t: float = 4.0
    rope_base: float = 10000.0
    head_std: float = 2.0
    depth_scaled_init: bool = False
    adapter: AdapterSpec | None = field(default_factory=AdapterSpec)
    vit_adapter_scale: float | None = 0.01
    placement: PlacementPolicy = field(default_factory=PlacementPolicy)
    quantize_backbone: bool = True
    seed: int = 0
    vision_preset: str | None = None
    lm_preset: str | None = None

    def __post_init__(self):
        self.validate()

    @property
    def n_visual(self) -> int:
        return self.enc_layers // self.cls_stride

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and (not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1):
                if not (f.name == "seed" and isinstance(v, int) and v >= 0):
                    raise ConfigError(f"model.{f.name}", f"must be a positive int, got {v!r}")
        if self.neck_dim >= self.enc_dim or self.neck_dim >= self.lm_dim:
            raise ConfigError("model.neck_dim", "must be smaller than both enc_dim and lm_dim")
        if self.enc_layers % self.cls_stride:
            raise ConfigError("model.cls_stride", f"must divide enc_layers={self.enc_layers}")
        if self.enc_dim % self.enc_heads:
            raise ConfigError("model.enc_heads", "must divide enc_dim")
        if self.lm_dim % self.lm_heads:
            raise ConfigError("model.lm_heads", "must divide lm_dim")
        if (self.lm_dim // self.lm_heads) % 2:
            raise ConfigError("model.lm_heads", "LM head width must be even for rotary positions")
        if self.image_size % self.patch_size:
            raise ConfigError("model.patch_size", "must divide image_size")
        if self.vision_preset is not None and self.vision_preset not in VISION_PRESETS:
            raise ConfigError("model.vision_preset", f"unknown preset {self.vision_preset!r}")
        if self.lm_preset is not None and self.lm_preset not in LM_PRESETS:
            raise ConfigError("model.lm_preset", f"unknown preset {self.lm_preset!r}")
        for name in ("neck_gain_v", "neck_gain_t", "head_std"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"model.{name}", f"must be positive, got {getattr(self, name)}")
        if self.vit_adapter_scale is not None and not self.vit_adapter_scale > 0:
            raise ConfigError("model.vit_adapter_scale", f"must be positive, got {self.vit_adapter_scale}")
        if self.adapter is not None:
            if not (self.placement.lm_sites or self.placement.vit_sites):
                raise ConfigError("model.placement", "adapters enabled but no placement site")
            for dim, where in ((self.enc_dim, "enc_dim"), (self.lm_dim, "lm_dim")):
                try:
                    self.adapter.with_channels(dim)
                except SpecError as e:
                    field_name, _, msg = str(e).partition(": ")
                    raise ConfigError(f"model.adapter.{field_name}", f"{msg} (at {where}={dim})") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["placement"] = {k: list(v) for k, v in d["placement"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        merged: dict = {}
        if d.get("vision_preset"):
            merged.update(VISION_PRESETS.get(d["vision_preset"], {}))
        if d.get("lm_preset"):
            merged.update(LM_PRESETS.get(d["lm_preset"], {}))
        adapter = d.pop("adapter", "default")
        placement = d.pop("placement", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"model.{sorted(unknown)[0]}", "unknown field")
        merged.update(d)
        if adapter is None or adapter == "none":
            merged["adapter"] = None
        elif isinstance(adapter, AdapterSpec):
            merged["adapter"] = adapter
        elif adapter != "default":
            try:
                merged["adapter"] = AdapterSpec.from_dict(adapter)
            except SpecError as e:
                field_name, _, msg = str(e).partition(": ")
                raise ConfigError(f"model.adapter.{field_name}", msg) from None
            except TypeError as e:
                raise ConfigError("model.adapter", str(e)) from None
        if placement is not None:
            merged["placement"] = placement if isinstance(placement, PlacementPolicy) else PlacementPolicy(**placement)
        return cls(**merged)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def preset(vision: str | None = None, lm: str | None = None, **overrides) -> ModelConfig:
    d = {"vision_preset": vision, "lm_preset": lm, **overrides}
    return ModelConfig.from_dict(d)


# ------------------------------------------------------------------- helpers


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    inv = 1.0 / (10000 ** (np.arange(0, dim, 2) / dim))
    out = np.zeros((n, dim))
    out[:, 0::2] = np.sin(pos * inv)
    out[:, 1::2] = np.cos(pos * inv)[:, : dim // 2]
    return out


def rotary_tables(n: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / (base ** (np.arange(0, head_dim, 2) / head_dim))
    ang = np.arange(n)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang), np.sin(ang)


def resize_nearest(img: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of an ``[h, w, ch]`` image to ``size x size``."""
    h, w = img.shape[:2]
    if (h, w) == (size, size):
        return img
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return img[rows][:, cols]


class Attention(Module):
    def __init__(self, rng, dim: int, heads: int, bias: bool, out_gain: float = 1.0):
        std = dim ** -0.5
        self.heads = heads
        self.q = Linear.init(rng, dim, dim, bias, std=std)
        self.k = Linear.init(rng, dim, dim, bias, std=std)
        self.v = Linear.init(rng, dim, dim, bias, std=std)
        self.o = Linear.init(rng, dim, dim, bias, std=out_gain * std)

    def _split(self, x: Tensor) -> Tensor:
        s, c = x.shape
        return T.transpose(T.reshape(x, (s, self.heads, c // self.heads)), (1, 0, 2))

    def __call__(self, x: Tensor, mask: np.ndarray | None = None, rope=None) -> Tensor:
        s, c = x.shape
        dh = c // self.heads
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        if rope is not None:
            cos, sin = (Tensor(a[:s].astype(x.dtype)) for a in rope)
            q = T.add(T.mul(q, cos), T.mul(T.rotate_half(q), sin))
            k = T.add(T.mul(k, cos), T.mul(T.rotate_half(k), sin))
        scores = T.scale(T.matmul(q, T.transpose(k)), dh ** -0.5)
        if mask is not None:
            scores = T.add(scores, Tensor(mask[:s, :s].astype(x.dtype)))
        out = T.matmul(T.softmax(scores, axis=-1), v)
        return self.o(T.reshape(T.transpose(out, (1, 0, 2)), (s, c)))


def _residual_gain(cfg: ModelConfig, layers: int) -> float:
    # GPT-2 style: shrink each residual write by 1/sqrt(2L) so int8 error is
    # not amplified by the sum of 2L random block outputs. LM only: in the
    # encoder it costs image accuracy and barely moves the logit error.
    return (2 * layers) ** -0.5 if cfg.depth_scaled_init else 1.0


def _gain(dim: int) -> Tensor:
    return Tensor(np.ones(dim, dtype=np.float32))


class EncoderBlock(Module):
    """Pre-norm ViT block; adapters act on the normed branch inputs."""

    def __init__(self, rng, cfg: ModelConfig, adapters: dict[str, Adapter]):
        d = cfg.enc_dim
        self.norm1 = _gain(d)
        self.attn = Attention(rng, d, cfg.enc_heads, bias=True)
        self.norm2 = _gain(d)
        self.fc1 = Linear.init(rng, d, cfg.enc_ffn_dim, std=d ** -0.5)
        self.fc2 = Linear.init(rng, cfg.enc_ffn_dim, d, std=cfg.enc_ffn_dim ** -0.5)
        self.adapters = adapters

    def __call__(self, x: Tensor) -> Tensor:
        h = T.rmsnorm(x, self.norm1)
        if "before_mha" in self.adapters:
            h = self.adapters["before_mha"](h)
        x = T.add(x, self.attn(h))
        h = T.rmsnorm(x, self.norm2)
        if "before_ffn" in self.adapters:
            h = self.adapters["before_ffn"](h)
        return T.add(x, self.fc2(T.silu(self.fc1(h))))


class LMBlock(Module):
    """LLaMA-style block: rmsnorm -> adapter -> causal MHA; rmsnorm -> SwiGLU."""

    def __init__(self, rng, cfg: ModelConfig, adapter: Adapter | None):
        c, f = cfg.lm_dim, cfg.lm_ffn_dim
        out_gain = _residual_gain(cfg, cfg.lm_layers)
        self.attn_norm = _gain(c)
        self.attn = Attention(rng, c, cfg.lm_heads, bias=False, out_gain=out_gain)
        self.ffn_norm = _gain(c)
        self.w1 = Linear.init(rng, c, f, bias=False, std=c ** -0.5)
        self.w3 = Linear.init(rng, c, f, bias=False, std=c ** -0.5)
        self.w2 = Linear.init(rng, f, c, bias=False, std=out_gain * f ** -0.5)
        self.adapter = adapter

    def __call__(self, x: Tensor, mask: np.ndarray, rope) -> Tensor:
        h = T.rmsnorm(x, self.attn_norm)
        if self.adapter is not None:
            h = self.adapter(h)
        x = T.add(x, self.attn(h, mask, rope))
        h = T.rmsnorm(x, self.ffn_norm)
        return T.add(x, self.w2(T.mul(T.silu(self.w1(h)), self.w3(h))))


class VisionEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig, make_adapter):
        self.cfg = cfg
        patch_in = cfg.patch_size ** 2 * cfg.image_channels
        # Unit-variance weights: glyph pixels are sparse, so content must not be
        # swamped by the positional table.
        self.patch = Linear.init(rng, patch_in, cfg.enc_dim, std=1.0)
        self.cls = Tensor(rng.standard_normal((1, cfg.enc_dim)).astype(np.float32))
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self._pos = sinusoidal_positions(n_patches + 1, cfg.enc_dim)
        sites = () if cfg.adapter is None else cfg.placement.vit_sites
        self.blocks = [
            EncoderBlock(rng, cfg, {s: make_adapter(cfg.enc_dim) for s in sites}) for _ in range(cfg.enc_layers)
        ]
        self.post_norm = _gain(cfg.enc_dim)

    def patchify(self, img: np.ndarray) -> np.ndarray:
        p, s, ch = self.cfg.patch_size, self.cfg.image_size, self.cfg.image_channels
        g = s // p
        return img.reshape(g, p, g, p, ch).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * ch)

    def __call__(self, img) -> Tensor:
        cfg = self.cfg
        arr = img.data if isinstance(img, Tensor) else np.asarray(img)
        if arr.shape != (cfg.image_size, cfg.image_size, cfg.image_channels):
            raise InputError(
                f"image shape {arr.shape} != {(cfg.image_size, cfg.image_size, cfg.image_channels)}"
            )
        dtype = self.cls.dtype
        x = self.patch(Tensor(self.patchify(arr).astype(dtype)))
        x = T.concat([self.cls, x], axis=0)
        x = T.add(x, Tensor(self._pos.astype(dtype)))
        states = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if (i + 1) % cfg.cls_stride == 0:
                states.append(x[0:1])
        return T.rmsnorm(T.concat(states, axis=0), self.post_norm)


class VisualNeck(Module):
    """``silu((V - r) W_v + b_v) W_t + b_t``; weights stored ``[in, out]``.

    ``r`` is a frozen reference, the encoder's response to an empty image.
    Subtracting it only re-expresses ``b_v`` (``b_v - r W_v``), but it strips
    the large image-independent component shared by all [cls] states, which
    otherwise swamps the glyph signal during optimization. ``None`` disables
    it.

    ``gain_v`` and ``gain_t`` multiply the Kaiming draws. The centered
    features are small (rms around 0.2), so at unit gain the neck output
    barely varies across images and the adapted LM ignores it.
    """

    def __init__(self, rng, d: int, d_v: int, c: int, gain_v: float = 1.0, gain_t: float = 1.0):
        self.w_v = Tensor(gain_v * kaiming_uniform(rng, d, (d, d_v)), requires_grad=True)
        self.b_v = Tensor(np.zeros(d_v, np.float32), requires_grad=True)
        self.w_t = Tensor(gain_t * kaiming_uniform(rng, d_v, (d_v, c)), requires_grad=True)
        self.b_t = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.reference: np.ndarray | None = None

    def __call__(self, V: Tensor) -> Tensor:
        if self.reference is not None:
            V = T.sub(V, Tensor(self.reference.astype(V.dtype)))
        return visual_neck(V, self.w_v, self.b_v, self.w_t, self.b_t)


def visual_neck(V: Tensor, w_v: Tensor, b_v: Tensor, w_t: Tensor, b_t: Tensor) -> Tensor:
    if V.shape[1] != w_v.shape[0] or w_v.shape[1] != w_t.shape[0]:
        raise DimensionError(f"visual_neck: V {V.shape}, W_v {w_v.shape}, W_t {w_t.shape}")
    return T.add(T.matmul(T.silu(T.add(T.matmul(V, w_v), b_v)), w_t), b_t)


def fuse(prefix: Tensor, visual: Tensor | None, text: Tensor) -> Tensor:
    """Row-concatenate ``[prefix, visual, text]`` (visual optional)."""
    parts = [prefix] + ([visual] if visual is not None else []) + [text]
    widths = {p.shape[1] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"fuse: column widths differ {[p.shape for p in parts]}")
    return T.concat(parts, axis=0)


class LanguageModel(Module):
    def __init__(self, rng, cfg: ModelConfig, make_adapter):
        self.cfg = cfg
        c = cfg.lm_dim
        self.embed = Tensor(rng.standard_normal((cfg.vocab, c)).astype(np.float32))
        self.blocks = [
            LMBlock(rng, cfg, make_adapter(c, causal=True) if "before_block" in cfg.placement.lm_sites else None)
            for _ in range(cfg.lm_layers)
        ]
        self.norm = _gain(c)
        self.head = Linear.init(rng, c, cfg.vocab, bias=False, std=cfg.head_std * c ** -0.5)
        self._rope = rotary_tables(cfg.max_seq, c // cfg.lm_heads, cfg.rope_base)
        self._mask = np.triu(np.full((cfg.max_seq, cfg.max_seq), T.MASK_VALUE), k=1)

    def embed_tokens(self, ids) -> Tensor:
        return T.embedding(self.embed, np.asarray(ids, dtype=np.int64))

    def __call__(self, Z: Tensor) -> Tensor:
        if Z.shape[0] > self.cfg.max_seq:
            raise InputError(f"sequence length {Z.shape[0]} exceeds max_seq={self.cfg.max_seq}")
        x = Z
        for block in self.blocks:
            x = block(x, self._mask, self._rope)
        return self.head(T.rmsnorm(x, self.norm))


@dataclass
class TrainablePartition:
    frozen: dict[str, Tensor]
    trainable: dict[str, Tensor]

    @property
    def trainable_count(self) -> int:
        return int(sum(t.size for t in self.trainable.values()))

    @property
    def total_count(self) -> int:
        return self.trainable_count + int(sum(t.size for t in self.frozen.values()))


class MultimodalModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        # Adapters draw from their own stream so that enabling them leaves the
        # backbone weights identical to the adapter-free build.
        adapter_rng = np.random.default_rng([cfg.seed, 1])
        spec = cfg.adapter

        def make_adapter(dim: int, causal: bool = False):
            return None if spec is None else Adapter(spec.with_channels(dim), adapter_rng, causal=causal)

        def make_vit_adapter(dim: int):
            if spec is None or cfg.vit_adapter_scale is None:
                return make_adapter(dim)
            return Adapter(replace(spec.with_channels(dim), scale=cfg.vit_adapter_scale), adapter_rng)

        self.encoder = VisionEncoder(rng, cfg, make_vit_adapter)
        self.lm = LanguageModel(rng, cfg, make_adapter)
        head_rng = np.random.default_rng([cfg.seed, 2])
        self.neck = VisualNeck(head_rng, cfg.enc_dim, cfg.neck_dim, cfg.lm_dim, cfg.neck_gain_v, cfg.neck_gain_t)
        self.prefix = {
            m: Tensor((head_rng.standard_normal((1, cfg.lm_dim))).astype(np.float32), requires_grad=True)
            for m in ("text_image", "text_only")
        }
        self.memory: MemoryReport | None = None
        if cfg.quantize_backbone:
            self.memory = quantize_module(self)
        blank = np.zeros((cfg.image_size, cfg.image_size, cfg.image_channels), np.float32)
        with T.no_grad():
            self.neck.reference = self.encode_image(blank).data.copy()

    def partition(self) -> TrainablePartition:
        return TrainablePartition(self.frozen(), self.trainable())

    def prepare_image(self, img: np.ndarray) -> np.ndarray:
        return resize_nearest(np.asarray(img), self.cfg.image_size)

    def encode_image(self, img) -> Tensor:
        return self.encoder(img)

    def visual_tokens(self, img) -> Tensor:
        return self.neck(self.encode_image(self.prepare_image(img)))

    def fused_input(self, image, tokens, visual: Tensor | None = None) -> Tensor:
        if visual is None and image is not None:
            visual = self.visual_tokens(image)
        modality = "text_image" if visual is not None else "text_only"
        return fuse(self.prefix[modality], visual, self.lm.embed_tokens(tokens))

    def forward(self, image, tokens, visual: Tensor | None = None) -> Tensor:
        """Logits ``[u + n + l, vocab]`` for the fused sequence."""
        return self.lm(self.fused_input(image, tokens, visual))

    __call__ = forward

    def text_offset(self, has_image: bool) -> int:
        return 1 + (self.cfg.n_visual if has_image else 0)

    def forward_loss(self, sample) -> Tensor:
        """Mean next-token NLL over the answer (plus end token) positions."""
        from .tasks import EOS

        answer = list(sample.answer_tokens)
        if not answer:
            raise ContractError("forward_loss: sample has an empty answer region")
        instr = list(sample.instruction_tokens)
        tokens = instr + answer
        logits = self.forward(sample.image, tokens)
        start = self.text_offset(sample.image is not None) + len(instr) - 1
        targets = np.full(logits.shape[0], -1, dtype=np.int64)
        targets[start:start + len(answer) + 1] = answer + [EOS]
        return T.cross_entropy(logits, targets)

    def with_adapter(self, spec: AdapterSpec | None) -> "MultimodalModel":
        return MultimodalModel(replace(self.cfg, adapter=spec))
