"""``balab`` command line: train, eval, ablate, gradcheck, params, generate.

Exit codes::

    0  success
    1  ablation finished but at least one grid point failed
    2  invalid config, missing checkpoint, or run_name collision
    3  training diverged
    4  gradient check above threshold
    5  checkpoint fingerprint does not match the config
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapters import FAMILIES, Adapter, AdapterSpec, count_params
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import AblationGrid, LabConfig, load_config
from .errors import ConfigError, FingerprintMismatch, SpecError
from .model import EncoderBlock, LMBlock, ModelConfig, MultimodalModel, VisualNeck, rotary_tables
from .tasks import Sample, TaskSpec, detokenize, make_dataset, tokenize
from .train import DivergenceError, SampleConfig, evaluate, generate, train

EXIT_OK, EXIT_POINT_FAILED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_GRADCHECK, EXIT_FINGERPRINT = 0, 1, 2, 3, 4, 5
GRADCHECK_TOL = 1e-4
CHECKPOINT_NAME = "checkpoint.balb"


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------- plumbing


def _load_lab(args) -> LabConfig:
    cfg = load_config(args.config) if args.config else LabConfig()
    return _override(cfg, args)


def _override(cfg: LabConfig, args) -> LabConfig:
    if getattr(args, "seed", None) is not None:
        s = args.seed
        cfg = replace(cfg, model=replace(cfg.model, seed=s), train=replace(cfg.train, seed=s),
                      task=replace(cfg.task, seed=s), sample=replace(cfg.sample, seed=s))
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=str(args.out))
    return cfg


def _run_dir(cfg: LabConfig, create: bool = True) -> Path:
    path = Path(cfg.output_dir) / cfg.run_name
    if create:
        if path.exists():
            raise CliError(EXIT_CONFIG, f"run_name: {cfg.run_name!r} already exists in {cfg.output_dir}")
        path.mkdir(parents=True)
    return path


def trainable_arrays(model: MultimodalModel) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in model.trainable().items()}


def save_model(path, model: MultimodalModel, cfg: LabConfig) -> None:
    save_checkpoint(path, trainable_arrays(model), cfg.model.fingerprint(), cfg.to_dict())


def restore_model(path, cfg: LabConfig | None = None) -> tuple[MultimodalModel, LabConfig]:
    """Rebuild the backbone from the stored config and load trained tensors.

    With ``cfg`` given, its model fingerprint must match the checkpoint.
    """
    if not Path(path).is_file():
        raise CliError(EXIT_CONFIG, f"checkpoint not found: {path}")
    try:
        ck = load_checkpoint(path)
    except CheckpointError as e:
        raise CliError(EXIT_CONFIG, str(e)) from None
    stored = LabConfig.from_dict(ck.config)
    if cfg is not None and cfg.model.fingerprint() != ck.fingerprint:
        raise FingerprintMismatch(
            f"checkpoint fingerprint {ck.fingerprint} != config fingerprint {cfg.model.fingerprint()}"
        )
    cfg = cfg or stored
    if stored.model.fingerprint() != ck.fingerprint:
        raise FingerprintMismatch("checkpoint header is inconsistent with its stored config")
    model = MultimodalModel(cfg.model)
    params = model.trainable()
    if set(params) != set(ck.tensors):
        raise FingerprintMismatch("checkpoint tensors do not match the model's trainable set")
    for name, t in params.items():
        t.data = ck.tensors[name].astype(t.dtype)
    return model, cfg


def trainable_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Trainable counts from shape formulas alone, without building a model."""
    out = {"adapters": 0}
    if cfg.adapter is not None:
        lm = count_params(cfg.adapter.with_channels(cfg.lm_dim))
        enc = count_params(cfg.adapter.with_channels(cfg.enc_dim))
        out["adapters"] = (lm * cfg.lm_layers * len(cfg.placement.lm_sites)
                           + enc * cfg.enc_layers * len(cfg.placement.vit_sites))
    out["neck"] = cfg.enc_dim * cfg.neck_dim + cfg.neck_dim + cfg.neck_dim * cfg.lm_dim + cfg.lm_dim
    out["prefix"] = 2 * cfg.lm_dim
    out["total"] = sum(out.values())
    return out


def _write_report(run: Path, report, cfg: LabConfig, extra: dict) -> dict:
    (run / "report.jsonl").write_text(report.jsonl())
    summary = {"run_name": cfg.run_name, **report.summary(), **extra}
    (run / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    lines = [
        f"run            {cfg.run_name}",
        f"epochs         {len(report.epochs)}",
        f"final loss     {report.epochs[-1].mean_loss:.4f}",
        f"trainable      {report.trainable_params} / {report.total_params} "
        f"({100 * report.trainable_fraction:.2f}%)",
        f"wall time      {report.wall_time:.1f}s",
    ]
    if report.final_eval:
        for k, v in report.final_eval.items():
            lines.append(f"acc {k:<10} {v:.4f}")
    text = "\n".join(lines) + "\n"
    (run / "summary.txt").write_text(text)
    print(text, end="")
    return summary


def run_training(cfg: LabConfig, run: Path | None = None, log=None):
    """Build, train and (optionally) persist one configuration."""
    train_set, eval_set = make_dataset(cfg.task, cfg.model.vocab)
    model = MultimodalModel(cfg.model)
    report = train(model, train_set, cfg.train, eval_set=eval_set, eval_every=cfg.train.epochs, log=log)
    if run is not None:
        save_model(run / CHECKPOINT_NAME, model, cfg)
        (run / "config.txt").write_text(cfg.dumps())
    return model, report


# ----------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _load_lab(args)
    run = _run_dir(cfg)

    def log(rec):
        print(json.dumps({"epoch": rec.epoch, "mean_loss": round(rec.mean_loss, 6),
                          "seconds": round(rec.seconds, 2)}), flush=True)

    try:
        _, report = run_training(cfg, run, log)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_report(run, report, cfg, {"checkpoint": str(run / CHECKPOINT_NAME)})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_lab(args) if args.config else None
    model, cfg = restore_model(args.checkpoint, cfg)
    cfg = _override(cfg, args)
    _, eval_set = make_dataset(cfg.task, cfg.model.vocab)
    res = evaluate(model, eval_set)
    print(json.dumps({"checkpoint": str(args.checkpoint), "n": len(eval_set), **res}))
    return EXIT_OK


def cmd_generate(args) -> int:
    cfg = _load_lab(args) if args.config else None
    model, cfg = restore_model(args.checkpoint, cfg)
    sample_cfg = cfg.sample if args.seed is None else replace(cfg.sample, seed=args.seed)
    if args.eval_index is not None:
        _, eval_set = make_dataset(cfg.task, cfg.model.vocab)
        s = eval_set[args.eval_index]
    else:
        if not args.prompt:
            raise CliError(EXIT_CONFIG, "generate: give --prompt or --eval-index")
        image = np.load(args.image).astype(np.float32) if args.image else None
        try:
            ids = tokenize(args.prompt)
        except KeyError as e:
            raise CliError(EXIT_CONFIG, f"prompt: unknown word {e}") from None
        s = Sample(image, tuple(ids), (), "text_image" if image is not None else "text_only", {})
    out = generate(model, s, sample_cfg)
    print(json.dumps({"prompt": detokenize(s.instruction_tokens), "answer": detokenize(out),
                      "gold": detokenize(s.answer_tokens) if s.answer_tokens else None}))
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = _load_lab(args)
    model = MultimodalModel(cfg.model)
    total, trainable = model.num_params(), model.num_params(True)
    info = {
        "total_params": total,
        "trainable_params": trainable,
        "trainable_fraction": trainable / total,
        "breakdown": trainable_breakdown(cfg.model),
    }
    if model.memory is not None:
        info.update(float_bytes=model.memory.float_bytes, quant_bytes=model.memory.quant_bytes,
                    reduction=model.memory.reduction)
    print(json.dumps(info, indent=2))
    return EXIT_OK


# ------------------------------------------------------------------ ablation


def _ablate_point(index: int, axes: dict, cfg_dict: dict, result_dir: str) -> str:
    """Child-process body: train one grid point and write its table row to a
    JSON file in ``result_dir``; returns the file path."""
    cfg = LabConfig.from_dict(cfg_dict)
    row = {"point": index, **{k: v for k, v in axes.items()}, "run_name": cfg.run_name,
           "trainable_params": trainable_breakdown(cfg.model)["total"]}
    t0 = time.perf_counter()
    try:
        model, report = run_training(cfg)
        acc = report.final_eval or {}
        row.update(status="ok", trainable_params=model.num_params(True), total_params=model.num_params(),
                   overall_acc=acc.get("overall"), text_image_acc=acc.get("text_image"),
                   text_only_acc=acc.get("text_only"), final_loss=report.epochs[-1].mean_loss)
    except Exception as e:  # a failed point is recorded, not fatal
        row.update(status="failed", error=f"{type(e).__name__}: {e}")
        traceback.print_exc()
    row["seconds"] = round(time.perf_counter() - t0, 3)
    path = Path(result_dir) / f"point-{index:03d}.json"
    path.write_text(json.dumps(row, default=float))
    return str(path)


def _jobs(requested: int | None) -> int:
    cap = os.environ.get("BA_LAB_THREADS")
    jobs = requested or 1
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise CliError(EXIT_CONFIG, f"BA_LAB_THREADS: not an integer: {cap!r}") from None
    return max(1, jobs)


ROW_FIELDS = ("point", "run_name", "status", "trainable_params", "total_params", "overall_acc",
              "text_image_acc", "text_only_acc", "final_loss", "seconds", "error")


def cmd_ablate(args) -> int:
    if not args.grid:
        raise CliError(EXIT_CONFIG, "ablate: --grid is required")
    grid = AblationGrid.load(args.grid)
    points = grid.points()
    base = points[0].config
    base = _override(replace(base, run_name=str(grid.base.get("run_name", "ablate"))), args)
    out = _run_dir(base)
    cfgs = [_override(p.config, args).to_dict() for p in points]
    jobs = _jobs(args.jobs)
    results = out / "points"
    results.mkdir()
    work = [(i, p.axes, c, str(results)) for i, (p, c) in enumerate(zip(points, cfgs))]
    if jobs == 1:
        for w in work:
            _ablate_point(*w)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for f in [pool.submit(_ablate_point, *w) for w in work]:
                f.result()
    rows = [json.loads((results / f"point-{i:03d}.json").read_text()) for i in range(len(points))]
    axis_cols = grid.axis_names
    header = ["point"] + axis_cols + [f for f in ROW_FIELDS if f != "point"]
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in header})
    (out / "ablation.json").write_text(json.dumps(rows, indent=2, default=float))
    for r in rows:
        acc = r.get("overall_acc")
        acc_s = "-" if acc is None else f"{acc:.3f}"
        axes_s = " ".join(f"{k}={r.get(k)}" for k in axis_cols if k in r)
        print(f"[{r['point']:03d}] {r['status']:<6} params={r['trainable_params']:<7} acc={acc_s:<6} {axes_s}")
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} points, {failed} failed -> {out / 'ablation.csv'}")
    return EXIT_POINT_FAILED if failed else EXIT_OK


# ----------------------------------------------------------------- gradcheck


def _randomize(module, rng, scale: float = 0.3) -> None:
    """Give zero-initialized trainable tensors random values so every path
    carries gradient."""
    for t in module.trainable().values():
        t.data = t.data + rng.standard_normal(t.shape) * scale


def _probe_loss(out: T.Tensor, w: np.ndarray) -> T.Tensor:
    return T.sum(T.mul(out, T.Tensor(w)))


def _check(fn, tensors, rng, max_coords=24) -> float:
    return T.grad_check_tensors(fn, tensors, h=1e-6, max_coords=max_coords, rng=rng)


def gradcheck_components(cfg: ModelConfig, seed: int = 0) -> dict[str, float]:
    """Worst relative error per component, all in float64."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    base = cfg.adapter or AdapterSpec()
    c = 16
    for fam in FAMILIES:
        spec = replace(base, family=fam, channel_dim=c, bottleneck_dim=8, groups=2, rank=4)
        ad = Adapter(spec, rng, np.float64)
        _randomize(ad, rng)
        Z = T.Tensor(rng.standard_normal((5, c)), requires_grad=True)
        w = rng.standard_normal((5, c))
        results[f"adapter:{fam}"] = _check(lambda: _probe_loss(ad(Z), w), [Z, *ad.params.values()], rng)

    small = replace(cfg, enc_layers=2, cls_stride=1, enc_dim=16, enc_heads=2, enc_ffn_dim=32, lm_layers=1,
                    lm_dim=16, lm_heads=2, lm_ffn_dim=24, neck_dim=8, max_seq=16, quantize_backbone=False,
                    adapter=replace(base, channel_dim=16, bottleneck_dim=8, groups=2, rank=4))
    neck = VisualNeck(rng, small.enc_dim, small.neck_dim, small.lm_dim).to(np.float64)
    V = T.Tensor(rng.standard_normal((3, small.enc_dim)), requires_grad=True)
    w = rng.standard_normal((3, small.lm_dim))
    results["visual_neck"] = _check(lambda: _probe_loss(neck(V), w), [V, *neck.trainable().values()], rng)

    enc = EncoderBlock(rng, small, {s: Adapter(small.adapter, rng) for s in small.placement.vit_sites}).to(np.float64)
    _randomize(enc, rng)
    X = T.Tensor(rng.standard_normal((6, small.enc_dim)), requires_grad=True)
    w = rng.standard_normal((6, small.enc_dim))
    results["encoder_block"] = _check(lambda: _probe_loss(enc(X), w), [X, *enc.trainable().values()], rng)

    lmb = LMBlock(rng, small, Adapter(small.adapter, rng)).to(np.float64)
    _randomize(lmb, rng)
    rope = rotary_tables(small.max_seq, small.lm_dim // small.lm_heads, small.rope_base)
    mask = np.triu(np.full((small.max_seq, small.max_seq), T.MASK_VALUE), k=1)
    X = T.Tensor(rng.standard_normal((6, small.lm_dim)), requires_grad=True)
    w = rng.standard_normal((6, small.lm_dim))
    results["lm_block"] = _check(lambda: _probe_loss(lmb(X, mask, rope), w), [X, *lmb.trainable().values()], rng)

    # End to end on the configured geometry, float64 throughout.
    model = MultimodalModel(cfg).to(np.float64)
    _randomize(model, rng, 0.05)
    train_set, _ = make_dataset(TaskSpec(kinds=("count_color",), train_size=2, eval_size=1), cfg.vocab)
    sample = next(s for s in train_set if s.image is not None)
    sample = replace(sample, image=sample.image.astype(np.float64))
    params = list(model.trainable().values())
    results["end_to_end_loss"] = _check(lambda: model.forward_loss(sample), params, rng, max_coords=4)
    return results


def cmd_gradcheck(args) -> int:
    cfg = _load_lab(args)
    t0 = time.perf_counter()
    results = gradcheck_components(cfg.model, cfg.model.seed)
    bad = [k for k, v in results.items() if not v < GRADCHECK_TOL]
    for k, v in results.items():
        print(f"{k:<36} {v:.3e}  {'ok' if v < GRADCHECK_TOL else 'FAIL'}")
    print(f"{len(results)} components, {time.perf_counter() - t0:.1f}s")
    if bad:
        print(f"gradcheck failed: {', '.join(bad)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="balab", description="Bottleneck-adapter multimodal lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, help="override every seed in the config")
        sp.add_argument("--out", help="override output_dir")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True)

    common(sub.add_parser("train", help="train one configuration"))
    common(sub.add_parser("eval", help="evaluate a checkpoint on the eval split"), checkpoint=True)
    sp = sub.add_parser("ablate", help="train every point of a grid")
    common(sp)
    sp.add_argument("--grid", required=True)
    sp.add_argument("--jobs", type=int, default=1, help="worker processes (capped by BA_LAB_THREADS)")
    common(sub.add_parser("gradcheck", help="finite-difference check of every component"))
    common(sub.add_parser("params", help="parameter and memory budget"))
    sp = sub.add_parser("generate", help="decode an answer from a checkpoint")
    common(sp, checkpoint=True)
    sp.add_argument("--prompt", help='instruction, e.g. "count red ?"')
    sp.add_argument("--image", help=".npy image of shape [h, w, 3]")
    sp.add_argument("--eval-index", type=int, help="use this eval-split sample as the prompt")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
            "params": cmd_params, "generate": cmd_generate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, SpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FingerprintMismatch as e:
        print(f"fingerprint mismatch: {e}", file=sys.stderr)
        return EXIT_FINGERPRINT


if __name__ == "__main__":
    sys.exit(main())
