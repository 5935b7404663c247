"""AdamW training at a constant learning rate, and top-p decoding."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericError
from .tasks import EOS, Sample, exact_match
from .tensor import Tensor


class DivergenceError(NumericError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.009
    weight_decay: float = 0.02
    epochs: int = 30
    batch_size: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be positive")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay", "must be non-negative")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("train.epochs", "must be >= 1")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("train.betas", "need two values in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("train.grad_clip", "must be positive when set")


@dataclass(frozen=True)
class SampleConfig:
    temperature: float = 0.1
    top_p: float = 0.75
    max_new_tokens: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("sample.temperature", "must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("sample.top_p", "must lie in (0, 1]")
        if self.max_new_tokens < 0:
            raise ConfigError("sample.max_new_tokens", "must be >= 0")


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def _moments(name, g, state, beta1, beta2):
    m = state.m.get(name)
    v = state.v.get(name)
    m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
    v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
    state.m[name], state.v[name] = m, v
    return m / (1 - beta1 ** state.t), v / (1 - beta2 ** state.t)


def _checked_grad(name: str, p: Tensor) -> np.ndarray | None:
    if p.grad is not None and not np.all(np.isfinite(p.grad)):
        raise NumericError(f"non-finite gradient in {name}")
    return p.grad


def adamw_step(params: dict[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0,
               betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One AdamW update with decoupled decay ``- lr * wd * theta``."""
    state.t += 1
    b1, b2 = betas
    for name, p in params.items():
        g = _checked_grad(name, p)
        if g is None or not p.requires_grad:
            continue
        m_hat, v_hat = _moments(name, g, state, b1, b2)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.data


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Classic Adam; weight decay, if any, is folded into the gradient."""
    state.t += 1
    b1, b2 = betas
    for name, p in params.items():
        g = _checked_grad(name, p)
        if g is None or not p.requires_grad:
            continue
        if weight_decay:
            g = g + weight_decay * p.data
        m_hat, v_hat = _moments(name, g, state, b1, b2)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / (norm + 1e-12))
    return norm


# ------------------------------------------------------------------- decoding


def top_p_filter(probs: np.ndarray, top_p: float) -> tuple[np.ndarray, np.ndarray]:
    """Smallest highest-probability prefix with mass >= ``top_p``.

    Ties in probability are broken by ascending token id. Returns the kept
    ids and their renormalized probabilities. Renormalization runs in exact
    rational arithmetic, so each probability is the correctly rounded ratio
    (``kept / kept.sum()`` rounds twice and can miss by an ulp).
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = np.cumsum(probs[order])
    keep = min(int(np.searchsorted(cum, top_p, side="left")) + 1, probs.size)
    ids = order[:keep]
    kept = [Fraction(p) for p in probs[ids].tolist()]
    total = sum(kept)
    return ids, np.array([float(p / total) for p in kept])


def top_p_sample(logits, cfg: SampleConfig, rng: np.random.Generator) -> int:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise NumericError("top_p_sample: non-finite logits")
    if cfg.temperature == 0:
        return int(np.argmax(z))
    z = z / cfg.temperature
    p = np.exp(z - z.max())
    ids, kept = top_p_filter(p / p.sum(), cfg.top_p)
    if ids.size == 1:
        return int(ids[0])
    u = rng.random()
    j = min(int(np.searchsorted(np.cumsum(kept), u, side="right")), ids.size - 1)
    return int(ids[j])


def generate(model, sample: Sample, cfg: SampleConfig, rng: np.random.Generator | None = None) -> list[int]:
    """Decode up to ``cfg.max_new_tokens`` tokens after the instruction,
    stopping at the end token (which is not returned)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out: list[int] = []
    if cfg.max_new_tokens == 0:
        return out
    prompt = list(sample.instruction_tokens)
    needed = model.text_offset(sample.image is not None) + len(prompt) + cfg.max_new_tokens - 1
    if needed > model.cfg.max_seq:
        raise InputError(f"prompt plus {cfg.max_new_tokens} new tokens exceeds max_seq={model.cfg.max_seq}")
    with T.no_grad():
        visual = model.visual_tokens(sample.image) if sample.image is not None else None
        for _ in range(cfg.max_new_tokens):
            logits = model.forward(None, prompt + out, visual=visual)
            tok = top_p_sample(logits.data[-1], cfg, rng)
            if tok == EOS:
                break
            out.append(tok)
    return out


def evaluate(model, samples: Sequence[Sample], cfg: SampleConfig | None = None) -> dict[str, float]:
    """Exact-match accuracy overall and per modality (greedy by default)."""
    cfg = cfg or SampleConfig(temperature=0.0)
    hits: dict[str, list[bool]] = {"text_image": [], "text_only": []}
    for s in samples:
        cfg_s = SampleConfig(cfg.temperature, cfg.top_p, max(cfg.max_new_tokens, len(s.answer_tokens) + 1), cfg.seed)
        hits[s.modality].append(exact_match(generate(model, s, cfg_s), s.answer_tokens))
    every = hits["text_image"] + hits["text_only"]
    res = {"overall": float(np.mean(every)) if every else float("nan")}
    for k, v in hits.items():
        res[k] = float(np.mean(v)) if v else float("nan")
    return res


# ------------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    eval_acc: float | None
    seconds: float
    eval_by_modality: dict | None = None


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    final_eval: dict | None = None
    wall_time: float = 0.0
    trainable_params: int = 0
    total_params: int = 0

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params if self.total_params else 0.0

    def jsonl(self) -> str:
        lines = []
        for r in self.epochs:
            lines.append(json.dumps({"epoch": r.epoch, "mean_loss": r.mean_loss,
                                     "eval_acc": r.eval_acc, "seconds": r.seconds}))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "final_eval": self.final_eval,
            "wall_time": self.wall_time,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
            "trainable_fraction": self.trainable_fraction,
            "epochs": [asdict(e) for e in self.epochs],
        }


def train(model, dataset: Sequence[Sample], cfg: TrainConfig, eval_set: Sequence[Sample] | None = None,
          eval_every: int = 1, log=None, optimizer: str = "adamw") -> TrainReport:
    """Epochs of shuffled mini-batches at a fixed learning rate.

    Only tensors with ``requires_grad`` are updated. Raises
    :class:`DivergenceError` if a loss turns non-finite.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    params = model.trainable()
    state = AdamState()
    step_fn = adamw_step if optimizer == "adamw" else adam_step
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport(trainable_params=model.num_params(True), total_params=model.num_params())
    t_start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for i in batch:
                with T.Graph() as g:
                    loss = model.forward_loss(dataset[i])
                    value = loss.item()
                    if len(batch) > 1:
                        loss = T.scale(loss, 1.0 / len(batch))
                if not np.isfinite(value):
                    raise DivergenceError(f"loss became {value} at epoch {epoch}, sample {i}")
                T.backward(loss, g)
                epoch_losses.append(value)
            if params:
                if cfg.grad_clip is not None:
                    clip_grad_norm(params, cfg.grad_clip)
                step_fn(params, state, cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps)
            for p in params.values():
                p.grad = None
        report.losses.extend(epoch_losses)
        acc = None
        by_mod = None
        if eval_set and (epoch % eval_every == 0 or epoch == cfg.epochs):
            by_mod = evaluate(model, eval_set)
            acc = by_mod["overall"]
        rec = EpochRecord(epoch, float(np.mean(epoch_losses)), acc, time.perf_counter() - t0, by_mod)
        report.epochs.append(rec)
        if log is not None:
            log(rec)
    report.wall_time = time.perf_counter() - t_start
    if report.epochs and report.epochs[-1].eval_by_modality is not None:
        report.final_eval = report.epochs[-1].eval_by_modality
    return report
