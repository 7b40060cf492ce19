"""``modal-distill`` command line: gen-data, train-teacher, distill, eval.

Exit codes: 0 success, 2 usage / config / schema error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import ContractError, DimensionError
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, resolve_seed
from .data import (
    CLASS_NAMES,
    PROFILES,
    DatasetManifest,
    RecordParseError,
    SchemaError,
    generate_synthetic,
    load_dataset,
    read_manifest,
    write_split_dir,
)
from .distillation import TEACHER_KINDS, NumericError, pretrain_teacher, train_student
from .metrics import evaluate
from .models import ModelDims

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
USER_ERRORS = (SchemaError, RecordParseError, ConfigError, ContractError, DimensionError, CheckpointError, OSError, IndexError)

def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


# -- shared helpers ---------------------------------------------------------------


def _load_split(data_dir: Path, split: str):
    manifest = read_manifest(data_dir / "manifest.json")
    paths = [data_dir / f"{name}.jsonl" for name in split.split(",") if name]
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"record file not found: {p}")
    return load_dataset(paths, manifest), manifest


def _resolve(args) -> RunConfig:
    cfg = load_run_config(args.config)
    cfg.seed = resolve_seed(cfg, args.seed)
    t = cfg.training
    if args.batch_size is not None:
        t.batch_size = args.batch_size
    if args.lr is not None:
        t.lr = args.lr
    if args.d_hidden is not None:
        cfg.d_hidden = args.d_hidden
    return cfg


def check_dims(dims: ModelDims, manifest: DatasetManifest, what: str) -> None:
    pairs = {
        "d_img": (dims.d_img, manifest.d_img),
        "r": (dims.n_regions, manifest.r),
        "question_vocab": (dims.question_vocab, manifest.question_vocab),
        "answer_vocab": (dims.answer_vocab, manifest.answer_vocab),
    }
    bad = [f"{k}: {what} {a} vs data {b}" for k, (a, b) in pairs.items() if a != b]
    if bad:
        raise SchemaError("dimension mismatch; " + "; ".join(bad))


def _write_outputs(out: Path, ckpt: Checkpoint, history: list[dict], report, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.bin", ckpt)
    with open(out / "train_log.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "config.json").write_text(cfg.to_json())


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.profile not in PROFILES:
        return _fail(f"unknown profile {args.profile!r}; choose from {sorted(PROFILES)}")
    if args.train < 1:
        return _fail("train count must be ≥ 1")
    if args.val < 1:
        return _fail("val count must be ≥ 1")
    profile = PROFILES[args.profile]
    train, manifest = generate_synthetic(profile, args.train, args.seed, stream=0)
    val, _ = generate_synthetic(profile, args.val, args.seed, stream=1)
    try:
        write_split_dir(args.out, {"train": train, "val": val}, manifest)
    except OSError as exc:
        return _fail(f"cannot write to {args.out}: {exc}")
    freq = np.mean([ex.labels for ex in train], axis=0)
    print(f"wrote {args.train} train / {args.val} val examples to {args.out} (profile {args.profile}, seed {args.seed})")
    print("priors   " + " ".join(f"{c}={p:.2f}" for c, p in zip(CLASS_NAMES, profile.class_priors)))
    print("observed " + " ".join(f"{c}={p:.2f}" for c, p in zip(CLASS_NAMES, freq)))
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    cfg = _resolve(args)
    if args.epochs is not None:
        cfg.training.teacher_epochs = args.epochs
    data = Path(args.data)
    train, manifest = _load_split(data, args.train_split)
    val, _ = _load_split(data, args.val_split)
    dims = cfg.dims_for(manifest)
    dcfg = cfg.distill_config()
    model, history = pretrain_teacher(args.modality, train, dims, dcfg)
    report = evaluate(model, val, label=f"{args.modality} teacher")
    _write_outputs(Path(args.out), Checkpoint.from_model(model, dcfg.seed, dcfg.teacher_epochs), history, report, cfg)
    print(report.to_text(), end="")
    return EXIT_OK


def _parse_teacher_ckpts(items: list[str]) -> dict[str, Path]:
    out = {}
    for item in items:
        kind, sep, path = item.partition("=")
        if not sep or kind not in TEACHER_KINDS:
            raise ConfigError(f"--teacher-ckpt expects KIND=PATH with KIND in {TEACHER_KINDS}, got {item!r}")
        out[kind] = Path(path)
    return out


def cmd_distill(args) -> int:
    cfg = _resolve(args)
    if args.teachers is not None:
        cfg.distill.teachers = [t.strip() for t in args.teachers.split(",") if t.strip()]
    if args.with_intermediate:
        cfg.distill.with_intermediate = True
    if args.epochs is not None:
        cfg.training.student_epochs = args.epochs
    dcfg = cfg.distill_config()

    data = Path(args.data)
    manifest = read_manifest(data / "manifest.json")
    dims = cfg.dims_for(manifest)
    ckpt_paths = _parse_teacher_ckpts(args.teacher_ckpt or [])
    missing = sorted(dcfg.teacher_set - set(ckpt_paths))
    if missing:
        raise ConfigError(f"no checkpoint given for teacher(s) {missing}")
    teachers = {}
    for kind in sorted(dcfg.teacher_set):
        path = ckpt_paths[kind]
        if not path.is_file():
            raise ConfigError(f"teacher checkpoint not found: {path}")
        ck = load_checkpoint(path)
        if ck.kind != kind:
            raise ConfigError(f"{path} holds a {ck.kind} model, expected {kind}")
        check_dims(ck.dims, manifest, f"{kind} teacher")
        if ck.dims.d_hidden != dims.d_hidden:
            raise ConfigError(f"{kind} teacher d_hidden {ck.dims.d_hidden} vs student d_hidden {dims.d_hidden}")
        teachers[kind] = ck.to_model()

    train, _ = _load_split(data, args.train_split)
    val, _ = _load_split(data, args.val_split)
    student, history = train_student(train, teachers, dcfg, dims)
    report = evaluate(student, val, label=dcfg.label)
    _write_outputs(Path(args.out), Checkpoint.from_model(student, dcfg.seed, dcfg.epochs), history, report, cfg)
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ck = load_checkpoint(ckpt_path)
    data = Path(args.data)
    manifest = read_manifest(data / "manifest.json")
    check_dims(ck.dims, manifest, "checkpoint")
    dataset, _ = _load_split(data, args.split)
    report = evaluate(ck.to_model(), dataset, batch_size=args.batch_size or 256, label=args.label or f"{ck.kind} ({args.split})")
    if args.report:
        rpath = Path(args.report)
        rpath.parent.mkdir(parents=True, exist_ok=True)
        rpath.write_text(report.to_json())
        rpath.with_suffix(".txt").write_text(report.to_text())
    print(report.to_text(), end="")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--seed", type=int, help="overrides MODAL_DISTILL_SEED and the config seed")
    p.add_argument("--data", required=True, help="directory holding manifest.json and <split>.jsonl")
    p.add_argument("--train-split", default="train", help="comma-separated record files to concatenate")
    p.add_argument("--val-split", default="val")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--d-hidden", type=int)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modal-distill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic train/val split")
    g.add_argument("--profile", default="answer-dominant")
    g.add_argument("--train", type=int, default=2000)
    g.add_argument("--val", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="pretrain one teacher on BCE")
    t.add_argument("--modality", required=True, choices=TEACHER_KINDS)
    _common(t)
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="train the image+question student")
    d.add_argument("--teachers", help='comma-separated subset of big,visual,question,answer; "" for the baseline')
    d.add_argument("--with-intermediate", action="store_true", help="also match intermediary features")
    d.add_argument("--teacher-ckpt", action="append", metavar="KIND=PATH")
    _common(d)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--report", help="JSON report path; a .txt table is written alongside")
    e.add_argument("--batch-size", type=int)
    e.add_argument("--label")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        # non-finite values are caught by the loss check and reported as exit 3
        with np.errstate(over="ignore", invalid="ignore"):
            return args.func(args)
    except NumericError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except USER_ERRORS as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
