"""Student AP for every teacher combination, with and without intermediary
features. Teachers are pretrained once per seed and shared by all rows.

    python scripts/ablation_grid.py --seeds 2 --out results/ablation.json
"""

import argparse
import itertools
from dataclasses import replace

import numpy as np

from _common import Timer, add_common, dump, pretrain, setup
from modal_distill.distillation import TEACHER_KINDS, DistillConfig, train_student
from modal_distill.metrics import evaluate


def configs(include_answer):
    kinds = TEACHER_KINDS if include_answer else tuple(k for k in TEACHER_KINDS if k != "answer")
    yield frozenset(), False
    for r in range(1, len(kinds) + 1):
        for subset in itertools.combinations(kinds, r):
            yield frozenset(subset), False
            # answer-only runs have no intermediary term, so skip the duplicate
            if set(subset) != {"answer"}:
                yield frozenset(subset), True


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    add_common(parser)
    parser.add_argument("--epochs", type=int, default=20, help="student epochs")
    parser.add_argument("--include-answer", action="store_true", help="also distil from the answer teacher")
    args = parser.parse_args()

    grid = list(configs(args.include_answer))
    results = {DistillConfig(ts, wi).label: [] for ts, wi in grid}
    with Timer() as timer:
        for seed in range(args.seeds):
            train, val, dims, cfg = setup(seed, args)
            teachers = pretrain({k for ts, _ in grid for k in ts}, train, dims, cfg)
            for ts, wi in grid:
                dcfg = replace(cfg, teacher_set=ts, with_intermediate=wi)
                student, _ = train_student(train, teachers, dcfg, dims)
                results[dcfg.label].append(evaluate(student, val).overall)
                print(f"seed {seed}  {dcfg.label:<22} {results[dcfg.label][-1]:.2f}")

    base = np.mean(results["Baseline"])
    print(f"\n{'config':<22} {'overall':>8} {'vs base':>8}   ({timer.seconds:.0f}s)")
    for label, vals in results.items():
        print(f"{label:<22} {np.mean(vals):8.2f} {np.mean(vals) - base:+8.2f}")
    dump(args.out, {"overall": results, "seconds": timer.seconds})


if __name__ == "__main__":
    main()
