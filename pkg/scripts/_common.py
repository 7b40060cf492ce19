"""Helpers shared by the experiment scripts."""

import json
import time
from pathlib import Path

from modal_distill.config import RunConfig
from modal_distill.data import PROFILES, generate_synthetic
from modal_distill.distillation import pretrain_teacher


def make_split(profile: str, n_train: int, n_val: int, seed: int):
    prof = PROFILES[profile]
    train, manifest = generate_synthetic(prof, n_train, seed, stream=0)
    val, _ = generate_synthetic(prof, n_val, seed, stream=1)
    return train, val, manifest


def setup(seed: int, args):
    """Data, dims and distill config for one seed, honouring common flags."""
    train, val, manifest = make_split(args.profile, args.train, args.val, seed)
    rc = RunConfig(seed=seed, d_hidden=args.d_hidden)
    rc.training.teacher_epochs = args.teacher_epochs
    if getattr(args, "epochs", None) is not None:
        rc.training.student_epochs = args.epochs
    return train, val, rc.dims_for(manifest), rc.distill_config()


def pretrain(kinds, train, dims, cfg):
    return {k: pretrain_teacher(k, train, dims, cfg)[0] for k in kinds}


def add_common(parser):
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--profile", default="answer-dominant", choices=sorted(PROFILES))
    parser.add_argument("--train", type=int, default=2000)
    parser.add_argument("--val", type=int, default=500)
    parser.add_argument("--d-hidden", type=int, default=64)
    parser.add_argument("--teacher-epochs", type=int, default=5)
    parser.add_argument("--out", type=Path, help="write results as JSON here")


def dump(out, payload):
    if out is None:
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start
