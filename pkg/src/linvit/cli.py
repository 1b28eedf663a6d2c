"""Command-line entry point.

Subcommands cover the whole lab: synthetic data generation, softmax teacher
training, the three conversion stages (attention alignment, feature
alignment, supervised fine-tuning), evaluation, the cost/wall-time sweep,
PCA feature imaging, and the built-in verification suites.

Configuration is a flat UTF-8 ``key = value`` file with ``#`` comments; keys
are namespaced (model., data., teacher., stage1., stage2., stage3., bench.)
and validated against the schema below before any work starts.  Every
run directory receives the fully-resolved configuration as
``config.resolved.txt``.  Exit codes: 0 success, 1 validation failure,
2 I/O error, 3 numeric error.  Progress goes to stderr; the final
machine-readable ``key=value`` summary goes to stdout.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import VARIANTS, AttentionSpec
from .bench import chart_svg, loglog_slope, records_to_csv, sweep
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, DatasetSpec, gen_synthetic, load_raw, save_raw
from .model import ViTConfig, forward, init_model, linearize
from .pipeline import (
    StageConfig,
    evaluate,
    stage1_attention_align,
    stage1_loss_eval,
    stage2_feature_align,
    stage2_loss_eval,
    stage3_sft,
)
from .tensor import ContractError, NumericError, ShapeError
from .verify import run_all

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A configuration key, value, or precondition failed validation."""


# ---------------------------------------------------------------------------
# config schema


def _int(s: str) -> int:
    return int(s, 10)


def _float(s: str) -> float:
    return float(s)


def _bool(s: str) -> bool:
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s: str) -> int | None:
    return None if s.lower() == "none" else int(s, 10)


def _choice(options):
    def parse(s: str):
        if s not in options:
            raise ValueError(f"must be one of {sorted(options)}, got {s!r}")
        return s
    return parse


def _str_list(s: str) -> list[str]:
    return [part.strip() for part in s.split(",") if part.strip()]


def _int_list(s: str) -> list[int]:
    return [int(part) for part in _str_list(s)]


def _stage_keys(ns: str, *, epochs, batch, lr, schedule):
    return {
        f"{ns}.epochs": (_int, epochs),
        f"{ns}.batch_size": (_int, batch),
        f"{ns}.lr": (_float, lr),
        f"{ns}.weight_decay": (_float, 0.05),
        f"{ns}.schedule": (_choice(("fixed", "polynomial", "linear")), schedule),
        f"{ns}.poly_power": (_float, 0.9),
        f"{ns}.seed": (_int, 42),
    }


SCHEMA: dict[str, tuple] = {
    "model.variant": (_choice(tuple(v for v in VARIANTS if v != "softmax")), "vanilla_linear"),
    "model.feature_map": (_choice(tuple(T.ACTIVATIONS)), "elu_plus_one"),
    "model.landmarks": (_opt_int, None),
    "model.proj_rank": (_int, 32),
    "model.rand_features": (_int, 64),
    "model.pinv_iters": (_int, 6),
    "model.depth": (_int, 4),
    "model.d_model": (_int, 64),
    "model.heads": (_int, 4),
    "model.image_size": (_int, 32),
    "model.patch_size": (_int, 4),
    "model.num_classes": (_int, 4),
    "model.mlp_ratio": (_float, 4.0),
    "model.seed": (_int, 42),
    "data.n_train": (_int, 2048),
    "data.n_test": (_int, 512),
    "data.classes": (_int, 4),
    "data.image_size": (_int, 32),
    "data.noise_std": (_float, 0.05),
    "data.frequency": (_float, 4.0),
    "data.seed": (_int, 42),
    **_stage_keys("teacher", epochs=15, batch=32, lr=1e-3, schedule="polynomial"),
    "teacher.crop_pad": (_int, 2),
    "teacher.jitter": (_float, 0.1),
    **_stage_keys("stage1", epochs=4, batch=32, lr=1e-2, schedule="fixed"),
    "stage1.maps_only": (_bool, False),
    "stage1.tune_output_proj": (_bool, False),
    "stage1.layer_mean": (_bool, False),
    **_stage_keys("stage2", epochs=30, batch=16, lr=1e-3, schedule="polynomial"),
    "stage2.lambda": (_float, 5.0),
    "stage2.patience": (_int, 3),
    "stage2.val_fraction": (_float, 0.1),
    **_stage_keys("stage3", epochs=10, batch=8, lr=1e-4, schedule="polynomial"),
    "stage3.backbone_lr_ratio": (_float, 0.1),
    "stage3.crop_pad": (_int, 2),
    "stage3.jitter": (_float, 0.1),
    "bench.variants": (_str_list, ["softmax", "vanilla_linear"]),
    "bench.ns": (_int_list, [512, 1024, 2048, 4096]),
    "bench.reps": (_int, 5),
    "bench.d_model": (_int, 64),
    "bench.seed": (_int, 0),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` lines; '#' starts a comment; keys unique."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {stripped!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict[str, object]:
    """Validate raw strings against the schema and fill defaults."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    resolved: dict[str, object] = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                resolved[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
        else:
            resolved[key] = default
    return resolved


def load_config(path: str | None) -> dict[str, object]:
    if path is None:
        return resolve_config({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return resolve_config(parse_config_text(text))


def _format_value(v) -> str:
    if isinstance(v, list):
        return ",".join(str(item) for item in v)
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def write_resolved(cfg: dict[str, object], out_dir: Path) -> None:
    lines = [f"{k} = {_format_value(cfg[k])}" for k in sorted(cfg)]
    (out_dir / "config.resolved.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# builders


def _attention_spec(cfg: dict, variant: str, tokens: int) -> AttentionSpec:
    kw = {}
    if variant == "linformer":
        kw["seq_len_fixed"] = tokens
    try:
        return AttentionSpec(
            variant=variant, d_model=cfg["model.d_model"], heads=cfg["model.heads"],
            feature_map=cfg["model.feature_map"], landmarks=cfg["model.landmarks"],
            proj_rank=cfg["model.proj_rank"], rand_features=cfg["model.rand_features"],
            pinv_iters=cfg["model.pinv_iters"], seed=cfg["model.seed"], **kw)
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"invalid attention settings: {exc}") from exc


def _vit_config(cfg: dict, variant: str) -> ViTConfig:
    size, patch = cfg["model.image_size"], cfg["model.patch_size"]
    if patch <= 0 or size % patch:
        raise ConfigError(f"model.patch_size {patch} must divide model.image_size {size}")
    tokens = (size // patch) ** 2 + 1
    try:
        return ViTConfig(
            image_size=size, patch_size=patch, depth=cfg["model.depth"],
            d_model=cfg["model.d_model"], heads=cfg["model.heads"],
            num_classes=cfg["model.num_classes"], mlp_ratio=cfg["model.mlp_ratio"],
            attention=_attention_spec(cfg, variant, tokens))
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"invalid model settings: {exc}") from exc


def _dataset_spec(cfg: dict, split: str) -> DatasetSpec:
    n = cfg["data.n_train"] if split == "train" else cfg["data.n_test"]
    seed = cfg["data.seed"] + (0 if split == "train" else 1)
    try:
        return DatasetSpec(seed=seed, num_samples=n, num_classes=cfg["data.classes"],
                           image_size=cfg["data.image_size"], noise_std=cfg["data.noise_std"],
                           frequency=cfg["data.frequency"])
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"invalid data settings: {exc}") from exc


def _stage_config(cfg: dict, ns: str, stage: int) -> StageConfig:
    kw = dict(
        stage=stage, epochs=cfg[f"{ns}.epochs"], batch_size=cfg[f"{ns}.batch_size"],
        lr=cfg[f"{ns}.lr"], weight_decay=cfg[f"{ns}.weight_decay"],
        schedule=cfg[f"{ns}.schedule"], poly_power=cfg[f"{ns}.poly_power"],
        seed=cfg[f"{ns}.seed"])
    if ns == "teacher":
        kw["backbone_lr_ratio"] = 1.0
    if ns == "stage1":
        kw.update(maps_only=cfg["stage1.maps_only"],
                  tune_output_proj=cfg["stage1.tune_output_proj"],
                  layer_mean=cfg["stage1.layer_mean"])
    if ns == "stage2":
        kw.update(lam=cfg["stage2.lambda"], early_stop_patience=cfg["stage2.patience"],
                  val_fraction=cfg["stage2.val_fraction"])
    if ns == "stage3":
        kw["backbone_lr_ratio"] = cfg["stage3.backbone_lr_ratio"]
    try:
        return StageConfig(**kw)
    except (ContractError, ValueError) as exc:
        raise ConfigError(f"invalid {ns} settings: {exc}") from exc


# ---------------------------------------------------------------------------
# run-dir and prerequisite plumbing


def prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"run dir {out} already exists and is not empty (use --force to reuse)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"missing {what}: expected file at {p}")
    return p


def _load_split(data_dir: str, split: str):
    path = _require_file(os.path.join(data_dir, f"{split}.bin"), f"{split} dataset")
    samples, _ = load_raw(path)
    return samples


# ---------------------------------------------------------------------------
# commands (each returns the stdout summary as an ordered dict)


def cmd_gen_data(args) -> dict:
    cfg = load_config(args.config)
    out = prepare_out(args.out, args.force)
    write_resolved(cfg, out)
    summary = {}
    for split in ("train", "test"):
        spec = _dataset_spec(cfg, split)
        log.info("generating %s split: %d samples", split, spec.num_samples)
        samples = gen_synthetic(spec)
        path = out / f"{split}.bin"
        save_raw(samples, spec.num_classes, path)
        summary[f"{split}_path"] = path
        summary[f"n_{split}"] = spec.num_samples
    summary["classes"] = cfg["data.classes"]
    return summary


def cmd_train_teacher(args) -> dict:
    cfg = load_config(args.config)
    out = prepare_out(args.out, args.force)
    write_resolved(cfg, out)
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    teacher = init_model(_vit_config(cfg, "softmax"), seed=cfg["model.seed"])
    stage_cfg = _stage_config(cfg, "teacher", stage=3)
    log.info("training softmax teacher: %d epochs, batch %d", stage_cfg.epochs, stage_cfg.batch_size)
    teacher, train_log = stage3_sft(teacher, train, stage_cfg,
                                    augment_cfg=(cfg["teacher.crop_pad"], cfg["teacher.jitter"]))
    ckpt = out / "teacher.ckpt"
    save_checkpoint(teacher, ckpt)
    train_log.to_csv(out / "teacher_steps.csv")
    train_log.epochs_to_csv(out / "teacher_epochs.csv")
    acc = evaluate(teacher, test)
    log.info("teacher test accuracy: %.4f", acc)
    return {"checkpoint": ckpt, "test_accuracy": f"{acc:.6f}", "steps": len(train_log.steps)}


def cmd_stage1(args) -> dict:
    cfg = load_config(args.config)
    out = prepare_out(args.out, args.force)
    write_resolved(cfg, out)
    teacher = load_checkpoint(_require_file(args.teacher, "teacher checkpoint"))
    train = _load_split(args.data, "train")
    spec = _attention_spec(cfg, cfg["model.variant"], teacher.config.tokens)
    try:
        student = linearize(teacher, spec)
    except (ContractError, ShapeError) as exc:
        raise ConfigError(f"cannot linearize teacher: {exc}") from exc
    stage_cfg = _stage_config(cfg, "stage1", stage=1)
    loss_initial = stage1_loss_eval(teacher, student, train, stage_cfg)
    log.info("stage 1 (%s): initial attention-alignment loss %.6g", spec.variant, loss_initial)
    student, train_log = stage1_attention_align(teacher, student, train, stage_cfg)
    loss_final = stage1_loss_eval(teacher, student, train, stage_cfg)
    log.info("stage 1 final attention-alignment loss %.6g", loss_final)
    ckpt = out / "stage1.ckpt"
    save_checkpoint(student, ckpt)
    train_log.to_csv(out / "stage1_steps.csv")
    return {"checkpoint": ckpt, "variant": spec.variant,
            "loss_initial": f"{loss_initial:.8g}", "loss_final": f"{loss_final:.8g}",
            "loss_ratio": f"{loss_final / max(loss_initial, 1e-300):.6f}"}


def cmd_stage2(args) -> dict:
    cfg = load_config(args.config)
    if args.from_scratch and args.student:
        raise ConfigError("--student and --from-scratch are mutually exclusive")
    if not args.from_scratch and not args.student:
        raise ConfigError("stage2 needs --student <stage1 checkpoint> (or --from-scratch)")
    out = prepare_out(args.out, args.force)
    write_resolved(cfg, out)
    teacher = load_checkpoint(_require_file(args.teacher, "teacher checkpoint"))
    train = _load_split(args.data, "train")
    if args.from_scratch:
        spec = _attention_spec(cfg, cfg["model.variant"], teacher.config.tokens)
        try:
            student = linearize(teacher, spec)
        except (ContractError, ShapeError) as exc:
            raise ConfigError(f"cannot linearize teacher: {exc}") from exc
        log.info("stage 2 from scratch: student linearized directly from the teacher")
    else:
        student = load_checkpoint(_require_file(args.student, "stage-1 student checkpoint"))
    stage_cfg = _stage_config(cfg, "stage2", stage=2)
    loss_initial = stage2_loss_eval(teacher, student, train, stage_cfg)
    log.info("stage 2: initial feature-alignment loss %.6g", loss_initial)
    student, train_log = stage2_feature_align(teacher, student, train, stage_cfg)
    loss_final = stage2_loss_eval(teacher, student, train, stage_cfg)
    log.info("stage 2 final feature-alignment loss %.6g", loss_final)
    ckpt = out / "stage2.ckpt"
    save_checkpoint(student, ckpt)
    train_log.to_csv(out / "stage2_steps.csv")
    train_log.epochs_to_csv(out / "stage2_epochs.csv")
    return {"checkpoint": ckpt, "loss_initial": f"{loss_initial:.8g}",
            "loss_final": f"{loss_final:.8g}",
            "loss_ratio": f"{loss_final / max(loss_initial, 1e-300):.6f}",
            "epochs_ran": len(train_log.epochs)}


def cmd_stage3(args) -> dict:
    cfg = load_config(args.config)
    out = prepare_out(args.out, args.force)
    write_resolved(cfg, out)
    student = load_checkpoint(_require_file(args.student, "stage-2 student checkpoint"))
    train = _load_split(args.data, "train")
    test = _load_split(args.data, "test")
    stage_cfg = _stage_config(cfg, "stage3", stage=3)
    log.info("stage 3: supervised fine-tuning, %d epochs", stage_cfg.epochs)
    student, train_log = stage3_sft(student, train, stage_cfg,
                                    augment_cfg=(cfg["stage3.crop_pad"], cfg["stage3.jitter"]))
    ckpt = out / "student.ckpt"
    save_checkpoint(student, ckpt)
    train_log.to_csv(out / "stage3_steps.csv")
    acc = evaluate(student, test)
    log.info("student test accuracy: %.4f", acc)
    return {"checkpoint": ckpt, "test_accuracy": f"{acc:.6f}"}


def cmd_eval(args) -> dict:
    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    samples = _load_split(args.data, args.split)
    acc = evaluate(model, samples)
    return {"split": args.split, "n": len(samples), "accuracy": f"{acc:.6f}",
            "variant": model.config.attention.variant}


def cmd_bench(args) -> dict:
    cfg = load_config(args.config)
    out = prepare_out(args.out, args.force)
    write_resolved(cfg, out)
    bad = [v for v in cfg["bench.variants"] if v not in VARIANTS]
    if bad:
        raise ConfigError(f"bench.variants contains unknown variants {bad}; choose from {sorted(VARIANTS)}")
    log.info("sweeping %s over N=%s", cfg["bench.variants"], cfg["bench.ns"])
    records = sweep(cfg["bench.variants"], cfg["bench.ns"], reps=cfg["bench.reps"],
                    d_model=cfg["bench.d_model"], seed=cfg["bench.seed"])
    csv_path = out / "sweep.csv"
    records_to_csv(records, csv_path)
    summary = {"csv": csv_path}
    for metric in ("flops", "peak_bytes", "wall_seconds", "throughput"):
        svg = out / f"sweep_{metric}.svg"
        chart_svg(records, metric, svg)
        summary[f"svg_{metric}"] = svg
    for variant in cfg["bench.variants"]:
        rows = [r for r in records if r.variant == variant]
        if len(rows) >= 2:
            slope = loglog_slope([r.n for r in rows], [r.wall_seconds for r in rows])
            summary[f"wall_exponent_{variant}"] = f"{slope:.4f}"
    return summary


def cmd_pca_viz(args) -> dict:
    from .bench import pca_rgb  # local import keeps CLI start-up lean

    model = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    samples = _load_split(args.data, args.split)
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"--index {args.index} outside dataset of {len(samples)} samples")
    out = prepare_out(args.out, args.force)
    sample = samples[args.index]
    batch = sample.image[None, ...]
    with T.no_grad():
        feats = forward(model, batch, mode="features")
    grid = model.config.image_size // model.config.patch_size
    patch_feats = feats.data[0, 1:, :]  # drop the CLS token; rows are the patch grid
    image = pca_rgb(patch_feats, grid, grid)
    ppm = out / f"pca_{args.split}_{args.index}.ppm"
    image.to_ppm(ppm)
    return {"ppm": ppm, "width": image.width, "height": image.height,
            "label": sample.label, "variant": model.config.attention.variant}


def cmd_verify(args) -> dict:
    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [name for name, ok, _ in results if not ok]
    if failed:
        raise NumericError(f"verification failed: {', '.join(failed)}")
    return {"suites": len(results), "result": "ok"}


# ---------------------------------------------------------------------------
# argument parsing and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="linvit",
        description="Convert a softmax vision transformer to linear attention and measure it.")
    parser.add_argument("--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, *, config=True, out=True, data=False, teacher=False,
            student=None, checkpoint=False):
        p = sub.add_parser(name, help=help_)
        if config:
            p.add_argument("--config", help="flat key=value config file")
        if data:
            p.add_argument("--data", required=True, help="directory holding train.bin/test.bin")
        if teacher:
            p.add_argument("--teacher", required=True, help="teacher checkpoint path")
        if student is not None:
            p.add_argument("--student", required=(student == "required"),
                           help="student checkpoint path")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint path")
        if out:
            p.add_argument("--out", required=True, help="run directory for artifacts")
            p.add_argument("--force", action="store_true", help="reuse a non-empty run dir")
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "generate the synthetic grating dataset")
    add("train-teacher", cmd_train_teacher, "train the softmax teacher", data=True)
    add("stage1", cmd_stage1, "per-block attention alignment", data=True, teacher=True)
    p2 = add("stage2", cmd_stage2, "whole-model feature alignment", data=True, teacher=True,
             student="optional")
    p2.add_argument("--from-scratch", action="store_true",
                    help="skip the stage-1 checkpoint and align a freshly linearized student")
    add("stage3", cmd_stage3, "supervised fine-tuning", data=True, student="required")
    pe = add("eval", cmd_eval, "evaluate a checkpoint", config=False, out=False,
             data=True, checkpoint=True)
    pe.add_argument("--split", choices=("train", "test"), default="test")
    add("bench", cmd_bench, "run the cost/wall-time sweep")
    pv = add("pca-viz", cmd_pca_viz, "render patch features as a PCA RGB image",
             config=False, data=True, checkpoint=True)
    pv.add_argument("--split", choices=("train", "test"), default="test")
    pv.add_argument("--index", type=int, default=0, help="sample index to visualize")
    add("verify", cmd_verify, "run the built-in verification suites", config=False, out=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DataFormatError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    for key, value in summary.items():
        print(f"{key}={value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
