"""Train the four teachers (and a Q+I baseline for reference) per seed and
compare their validation AP on the synthetic split.

    python scripts/teacher_ordering.py --seeds 5 --out results/teachers.json
"""

import argparse
from dataclasses import replace

import numpy as np

from _common import Timer, add_common, dump, pretrain, setup
from modal_distill.distillation import TEACHER_KINDS, train_student
from modal_distill.metrics import evaluate


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    add_common(parser)
    args = parser.parse_args()

    rows = {k: [] for k in (*TEACHER_KINDS, "baseline")}
    with Timer() as timer:
        for seed in range(args.seeds):
            train, val, dims, cfg = setup(seed, args)
            for kind, model in pretrain(TEACHER_KINDS, train, dims, cfg).items():
                rows[kind].append(evaluate(model, val).overall)
            base, _ = train_student(train, {}, replace(cfg, epochs=cfg.teacher_epochs), dims)
            rows["baseline"].append(evaluate(base, val).overall)
            print(f"seed {seed}: " + "  ".join(f"{k} {v[-1]:.2f}" for k, v in rows.items()))

    print(f"\nmean overall AP over {args.seeds} seeds ({timer.seconds:.0f}s)")
    for kind, vals in rows.items():
        print(f"  {kind:<9} {np.mean(vals):6.2f} +- {np.std(vals):.2f}")
    dump(args.out, {"args": {k: str(v) for k, v in vars(args).items()}, "overall": rows, "seconds": timer.seconds})


if __name__ == "__main__":
    main()
