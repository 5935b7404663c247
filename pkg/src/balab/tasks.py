"""Synthetic instruction tasks with provable answers.

Image tasks draw up to three glyphs on a 4x4 grid of 4x4-pixel cells; text
tasks carry no image and go through the text-only branch of the fusion.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import SpecError

SPECIALS = ["<pad>", "<eos>", "?"]
WORDS = ["what", "shape", "at", "count", "is", "copy", "parity"]
COLORS = ["red", "green", "blue"]
SHAPES = ["square", "cross", "diamond"]
REPLIES = ["none", "yes", "no"]
DIGITS = [str(i) for i in range(10)]
LETTERS = list("abcdefghijklmnop")
VOCAB = SPECIALS + WORDS + COLORS + SHAPES + REPLIES + DIGITS + LETTERS
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}
PAD, EOS = TOKEN_ID["<pad>"], TOKEN_ID["<eos>"]

IMAGE_SIZE = 16
CELL = 4
GRID = IMAGE_SIZE // CELL
MAX_SHAPES = 3

GLYPHS = {
    "square": ["XXXX", "X..X", "X..X", "XXXX"],
    "cross": ["X..X", ".XX.", ".XX.", "X..X"],
    "diamond": [".XX.", "XXXX", "XXXX", ".XX."],
}
GLYPH_MASKS = {k: np.array([[ch == "X" for ch in row] for row in v]) for k, v in GLYPHS.items()}

IMAGE_KINDS = ("shape_at", "count_color", "shape_exists")
TEXT_KINDS = ("copy_text", "parity_text")
KINDS = IMAGE_KINDS + TEXT_KINDS
DEFAULT_KINDS = ("count_color", "shape_exists", "copy_text")


def tokenize(text: str) -> list[int]:
    try:
        return [TOKEN_ID[w] for w in text.split()]
    except KeyError as e:
        raise SpecError(f"vocab: unknown word {e.args[0]!r}") from None


def detokenize(ids: Iterable[int]) -> str:
    """Words for ``ids``; ids past the vocabulary (unused model slots) render as ``<id>``."""
    return " ".join(VOCAB[i] if 0 <= i < len(VOCAB) else f"<{i}>" for i in ids)


@dataclass(frozen=True)
class Glyph:
    shape: str
    color: str
    cell: tuple[int, int] | None = None


@dataclass
class Sample:
    image: np.ndarray | None
    instruction_tokens: tuple[int, ...]
    answer_tokens: tuple[int, ...]
    modality: str
    meta: dict = field(default_factory=dict)

    def key(self) -> tuple[bytes, tuple[int, ...]]:
        img = b"" if self.image is None else self.image.tobytes()
        return img, tuple(self.instruction_tokens)


@dataclass(frozen=True)
class TaskSpec:
    kinds: tuple[str, ...] = DEFAULT_KINDS
    train_size: int = 1000
    eval_size: int = 200
    seed: int = 0
    text_fraction: float = 0.5
    copy_length: int = 3
    parity_bits: int = 4

    def __post_init__(self):
        kinds = (self.kinds,) if isinstance(self.kinds, str) else tuple(self.kinds)
        object.__setattr__(self, "kinds", kinds)
        if not kinds:
            raise SpecError("kinds: at least one task kind required")
        for k in kinds:
            if k not in KINDS:
                raise SpecError(f"kinds: unknown task kind {k!r}")
        if self.train_size < 1 or self.eval_size < 1:
            raise SpecError("train_size: split sizes must be >= 1")
        if not 0 <= self.text_fraction <= 1:
            raise SpecError("text_fraction: must lie in [0, 1]")
        if not 1 <= self.copy_length <= 3:
            raise SpecError("copy_length: answers are 1-3 tokens")
        if not 1 <= self.parity_bits <= 8:
            raise SpecError("parity_bits: must lie in [1, 8]")


# ------------------------------------------------------------------ rendering


def place_glyphs(glyphs: Sequence[Glyph], rng: np.random.Generator) -> list[Glyph]:
    """Assign free cells to glyphs without one, redrawing on collision."""
    if len(glyphs) > MAX_SHAPES:
        raise SpecError(f"scene: at most {MAX_SHAPES} shapes, got {len(glyphs)}")
    fixed = [g.cell for g in glyphs if g.cell is not None]
    if len(set(fixed)) != len(fixed):
        raise SpecError("scene: two shapes share a cell")
    while True:
        taken = set(fixed)
        out = []
        for g in glyphs:
            cell = g.cell
            if cell is None:
                cell = (int(rng.integers(GRID)), int(rng.integers(GRID)))
            out.append(Glyph(g.shape, g.color, cell))
        cells = [g.cell for g in out]
        if len(set(cells)) == len(cells) and set(fixed) <= taken:
            return out


def render_image(scene: Sequence[Glyph], rng: np.random.Generator | None = None) -> np.ndarray:
    """Rasterize a scene to a ``[16, 16, 3]`` float32 image in {0, 1}."""
    if any(g.cell is None for g in scene):
        scene = place_glyphs(scene, rng if rng is not None else np.random.default_rng(0))
    if len(scene) > MAX_SHAPES:
        raise SpecError(f"scene: at most {MAX_SHAPES} shapes, got {len(scene)}")
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    seen = set()
    for g in scene:
        if g.shape not in GLYPHS or g.color not in COLORS:
            raise SpecError(f"scene: unknown glyph {g.shape}/{g.color}")
        r, c = g.cell
        if not (0 <= r < GRID and 0 <= c < GRID) or (r, c) in seen:
            raise SpecError(f"scene: bad or repeated cell {g.cell}")
        seen.add((r, c))
        block = img[r * CELL:(r + 1) * CELL, c * CELL:(c + 1) * CELL, COLORS.index(g.color)]
        block[GLYPH_MASKS[g.shape]] = 1.0
    return img


# ------------------------------------------------------------------ samplers


def _random_glyph(rng, shapes=SHAPES, colors=COLORS) -> Glyph:
    return Glyph(str(rng.choice(shapes)), str(rng.choice(colors)))


def _shape_at(rng):
    answer = str(rng.choice(SHAPES + ["none"]))
    r, c = int(rng.integers(GRID)), int(rng.integers(GRID))
    n_other = int(rng.integers(0 if answer != "none" else 1, MAX_SHAPES))
    glyphs = [Glyph(answer, str(rng.choice(COLORS)), (r, c))] if answer != "none" else []
    while len(glyphs) < n_other + (answer != "none"):
        cell = (int(rng.integers(GRID)), int(rng.integers(GRID)))
        if cell != (r, c) and all(g.cell != cell for g in glyphs):
            glyphs.append(Glyph(str(rng.choice(SHAPES)), str(rng.choice(COLORS)), cell))
    return glyphs, f"what shape at {r} {c} ?", answer


def _count_color(rng):
    color = str(rng.choice(COLORS))
    count = int(rng.integers(0, MAX_SHAPES + 1))
    others = [c for c in COLORS if c != color]
    n_other = int(rng.integers(0, MAX_SHAPES - count + 1))
    glyphs = [_random_glyph(rng, colors=[color]) for _ in range(count)]
    glyphs += [_random_glyph(rng, colors=others) for _ in range(n_other)]
    return place_glyphs(glyphs, rng), f"count {color} ?", str(count)


def _shape_exists(rng):
    shape = str(rng.choice(SHAPES))
    present = bool(rng.integers(2))
    n = int(rng.integers(1, MAX_SHAPES + 1))
    others = [s for s in SHAPES if s != shape]
    glyphs = [_random_glyph(rng, shapes=others) for _ in range(n)]
    if present:
        glyphs[int(rng.integers(n))] = _random_glyph(rng, shapes=[shape])
    return place_glyphs(glyphs, rng), f"is {shape} ?", "yes" if present else "no"


def _copy_text(rng, length: int):
    letters = [str(x) for x in rng.choice(LETTERS, size=length)]
    return f"copy {' '.join(letters)}", " ".join(letters)


def _parity_text(rng, bits: int):
    b = [int(x) for x in rng.integers(0, 2, size=bits)]
    return f"parity {' '.join(map(str, b))}", str(sum(b) % 2)


def make_sample(kind: str, rng: np.random.Generator, spec: TaskSpec | None = None) -> Sample:
    spec = spec or TaskSpec()
    if kind in IMAGE_KINDS:
        glyphs, question, answer = {"shape_at": _shape_at, "count_color": _count_color,
                                    "shape_exists": _shape_exists}[kind](rng)
        return Sample(render_image(glyphs), tuple(tokenize(question)), tuple(tokenize(answer)),
                      "text_image", {"kind": kind})
    if kind == "copy_text":
        question, answer = _copy_text(rng, spec.copy_length)
    elif kind == "parity_text":
        question, answer = _parity_text(rng, spec.parity_bits)
    else:
        raise SpecError(f"kinds: unknown task kind {kind!r}")
    return Sample(None, tuple(tokenize(question)), tuple(tokenize(answer)), "text_only", {"kind": kind})


def _pick_kind(spec: TaskSpec, rng) -> str:
    img = [k for k in spec.kinds if k in IMAGE_KINDS]
    txt = [k for k in spec.kinds if k in TEXT_KINDS]
    if img and txt:
        pool = txt if rng.random() < spec.text_fraction else img
    else:
        pool = img or txt
    return str(pool[int(rng.integers(len(pool)))])


def _split(spec: TaskSpec, split: int, size: int, exclude: set, max_attempts: int = 1000) -> list[Sample]:
    out = []
    for i in range(size):
        for attempt in range(max_attempts):
            seed = [spec.seed, split, i, attempt]
            rng = np.random.default_rng(seed)
            s = make_sample(_pick_kind(spec, rng), rng, spec)
            if s.key() not in exclude:
                s.meta["seed"] = seed
                out.append(s)
                break
        else:
            raise SpecError("train_size: task space too small to keep splits disjoint")
    return out


def make_dataset(spec: TaskSpec, vocab_size: int = 64) -> tuple[list[Sample], list[Sample]]:
    """Deterministic (train, eval) splits; no eval (image, instruction) pair
    appears in train."""
    if len(VOCAB) > vocab_size:
        raise SpecError(f"vocab: {len(VOCAB)} words exceed vocab size {vocab_size}")
    eval_set = _split(spec, 1, spec.eval_size, set())
    train = _split(spec, 0, spec.train_size, {s.key() for s in eval_set})
    return train, eval_set


def exact_match(pred: Sequence[int], gold: Sequence[int]) -> bool:
    return list(pred) == list(gold)


# -------------------------------------------------------------------- export


def sample_to_record(s: Sample) -> dict:
    img = None if s.image is None else base64.b64encode(s.image.astype("<f4").tobytes()).decode()
    return {
        "image": img,
        "instruction": list(s.instruction_tokens),
        "answer": list(s.answer_tokens),
        "modality": s.modality,
        "meta": s.meta,
    }


def sample_from_record(rec: dict) -> Sample:
    img = None
    if rec["image"] is not None:
        raw = np.frombuffer(base64.b64decode(rec["image"]), dtype="<f4")
        img = raw.reshape(IMAGE_SIZE, IMAGE_SIZE, 3).astype(np.float32)
    return Sample(img, tuple(rec["instruction"]), tuple(rec["answer"]), rec["modality"], rec.get("meta", {}))


def export_jsonl(samples: Iterable[Sample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(sample_to_record(s)) + "\n")


def load_jsonl(path) -> list[Sample]:
    return [sample_from_record(json.loads(line)) for line in Path(path).read_text().splitlines() if line]
