"""Run the two-task shift benchmark for several seeds and print forgetting per method.

    python3 scripts/run_benchmark.py --seeds 0,1,2,3,4
"""

import argparse
import time

import numpy as np

from kfcl import benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--methods", default=",".join(benchmark.METHODS))
    args = p.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    methods = [m.strip() for m in args.methods.split(",")]

    start = time.perf_counter()

    def progress(run):
        print(f"{run.method:<8} seed {run.seed}: task-A change {run.forgetting:+.2f} ({time.perf_counter() - start:.0f}s)",
              flush=True)

    study = benchmark.run_study(seeds, methods, progress=progress)
    print()
    for line in benchmark.summary_lines(study):
        print(line)
    for method in ("EwcDiag", "EwcKfc"):
        curves = study.sweep_curves(method)
        if not curves:
            continue
        grid = next(iter(curves.values()))[0]
        forget = np.mean([c[1] for c in curves.values()], axis=0)
        b_acc = np.mean([c[2] for c in curves.values()], axis=0)
        print(f"\n{method} sweep (seed mean)")
        print(f"{'lambda':>8} {'forget':>8} {'B acc':>8}")
        for lam, f, b in zip(grid, forget, b_acc):
            print(f"{lam:>8g} {f:>8.2f} {b:>8.2f}")
    violations = sum(len(r.access.violations) for r in study.runs.values())
    print(f"\nsealed train reads: {violations}; elapsed {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
