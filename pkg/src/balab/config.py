"""Flat ``section.key = value`` config files and ablation grids.

Example::

    run_name = demo
    model.adapter.bottleneck_dim = 16
    model.placement.vit_sites = [before_mha, before_ffn]
    train.epochs = 4
    task.kinds = [count_color, copy_text]

Grid files add ``grid.<block>.<key> = [v1, v2, ...]`` lines. Each block is a
cartesian product over its axes; the grid is the union of its blocks.
"""

from __future__ import annotations

import ast
import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError, SpecError
from .model import ModelConfig
from .tasks import TaskSpec
from .train import SampleConfig, TrainConfig

_WORDS = {"true": True, "false": False, "none": None, "null": None}


def parse_value(text: str):
    text = text.strip()
    if text.lower() in _WORDS:
        return _WORDS[text.lower()]
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        pass
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        return [parse_value(t) for t in inner.split(",")] if inner else []
    return text


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    return str(v)


def parse_flat(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        out[key] = parse_value(value)
    return out


def nest(flat: dict[str, object]) -> dict:
    root: dict = {}
    for key, value in flat.items():
        node = root
        parts = key.split(".")
        for p in parts[:-1]:
            child = node.setdefault(p, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"{p!r} is both a value and a section")
            node = child
        node[parts[-1]] = value
    return root


def flatten(d: dict, prefix: str = "") -> dict[str, object]:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def _build(cls, section: str, d: dict):
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            raise ConfigError(f"{section}.{k}", "unknown field")
    try:
        return cls(**d)
    except SpecError as e:
        name, _, msg = str(e).partition(": ")
        raise ConfigError(f"{section}.{name}", msg) from None
    except TypeError as e:
        raise ConfigError(section, str(e)) from None


@dataclass(frozen=True)
class LabConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    output_dir: str = "runs"
    run_name: str = "run"

    @classmethod
    def from_dict(cls, d: dict) -> "LabConfig":
        d = dict(d)
        known = {"model", "train", "sample", "task", "output_dir", "run_name"}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown section")
        model_d = d.get("model", {})
        if not isinstance(model_d, dict):
            raise ConfigError("model", "must be a section")
        try:
            model = ModelConfig.from_dict(model_d)
        except TypeError as e:
            raise ConfigError("model", str(e)) from None
        return cls(
            model=model,
            train=_build(TrainConfig, "train", d.get("train", {})),
            sample=_build(SampleConfig, "sample", d.get("sample", {})),
            task=_build(TaskSpec, "task", d.get("task", {})),
            output_dir=str(d.get("output_dir", "runs")),
            run_name=str(d.get("run_name", "run")),
        )

    def to_dict(self) -> dict:
        def plain(obj):
            out = {}
            for f in fields(obj):
                v = getattr(obj, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
            return out

        return {
            "model": self.model.to_dict(),
            "train": plain(self.train),
            "sample": plain(self.sample),
            "task": plain(self.task),
            "output_dir": self.output_dir,
            "run_name": self.run_name,
        }

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(self.to_dict()).items())


def loads_config(text: str) -> LabConfig:
    return LabConfig.from_dict(nest(parse_flat(text)))


def load_config(path) -> LabConfig:
    return loads_config(Path(path).read_text())


@dataclass
class GridPoint:
    axes: dict[str, object]
    config: LabConfig


@dataclass
class AblationGrid:
    base: dict[str, object]
    blocks: list[dict[str, list]]

    @classmethod
    def parse(cls, text: str) -> "AblationGrid":
        flat = parse_flat(text)
        base, blocks = {}, {}
        for key, value in flat.items():
            if key.startswith("grid."):
                parts = key.split(".", 2)
                if len(parts) < 3:
                    raise ConfigError(key, "expected grid.<block>.<key>")
                values = value if isinstance(value, list) else [value]
                if not values:
                    raise ConfigError(key, "axis has no values")
                blocks.setdefault(parts[1], {})[parts[2]] = values
            else:
                base[key] = value
        if not blocks:
            raise ConfigError("grid", "no grid axes defined")
        return cls(base, list(blocks.values()))

    @classmethod
    def load(cls, path) -> "AblationGrid":
        return cls.parse(Path(path).read_text())

    @property
    def axis_names(self) -> list[str]:
        names: list[str] = []
        for b in self.blocks:
            names += [k for k in b if k not in names]
        return names

    def points(self) -> list[GridPoint]:
        out = []
        run = str(self.base.get("run_name", "ablate"))
        for block in self.blocks:
            keys = list(block)
            for combo in itertools.product(*(block[k] for k in keys)):
                axes = dict(zip(keys, combo))
                flat = {**self.base, **axes, "run_name": f"{run}-{len(out):03d}"}
                out.append(GridPoint(axes, LabConfig.from_dict(nest(flat))))
        return out

    def __len__(self) -> int:
        n = 0
        for b in self.blocks:
            size = 1
            for v in b.values():
                size *= len(v)
            n += size
        return n
