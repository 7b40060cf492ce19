"""Baseline student versus a distilled student, averaged over seeds.

    python scripts/distillation_gain.py --teachers big,visual,question --with-intermediate
"""

import argparse
from dataclasses import replace

import numpy as np

from _common import Timer, add_common, dump, pretrain, setup
from modal_distill.distillation import train_student
from modal_distill.metrics import evaluate


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    add_common(parser)
    parser.add_argument("--epochs", type=int, default=20, help="student epochs")
    parser.add_argument("--teachers", default="big,visual,question")
    parser.add_argument("--with-intermediate", action="store_true")
    args = parser.parse_args()
    kinds = [t for t in args.teachers.split(",") if t]

    base_ap, dist_ap = [], []
    with Timer() as timer:
        for seed in range(args.seeds):
            train, val, dims, cfg = setup(seed, args)
            teachers = pretrain(kinds, train, dims, cfg)
            base, _ = train_student(train, {}, cfg, dims)
            dcfg = replace(cfg, teacher_set=frozenset(kinds), with_intermediate=args.with_intermediate)
            student, _ = train_student(train, teachers, dcfg, dims)
            base_ap.append(evaluate(base, val).overall)
            dist_ap.append(evaluate(student, val).overall)
            print(f"seed {seed}: baseline {base_ap[-1]:.2f}  {dcfg.label} {dist_ap[-1]:.2f}")

    gain = np.array(dist_ap) - np.array(base_ap)
    print(f"\nbaseline {np.mean(base_ap):.2f}  distilled {np.mean(dist_ap):.2f}  gain {gain.mean():+.2f} +- {gain.std():.2f}  ({timer.seconds:.0f}s)")
    dump(args.out, {"baseline": base_ap, "distilled": dist_ap, "label": dcfg.label, "seconds": timer.seconds})


if __name__ == "__main__":
    main()
