"""Estimate diagonal, KFC and full Fisher on a small benchmark task and export heatmap CSVs.

The task draws from a 60-token vocabulary slice and the model has hidden width 4, so the full matrix
stays under the oracle's parameter cap and the three heatmaps can be compared side by side.

    python3 scripts/export_fisher_figure.py out/fisher
"""

import argparse
from pathlib import Path

from kfcl import cli, data


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = data.generate_benchmark(1, seed=args.seed, vocab_size=60, n_concepts=8, k=4, window=6,
                                  feature_dim=4, tokens_per_concept=2, hard_negative_pool=5)[0]
    path = out / "A.task"
    data.write_task(task, path)
    raise SystemExit(cli.run_cli(["fisher", "--task-file", str(path), "--hidden", "4", "--vocab", str(task.vocab_size),
                                  "--seed", str(args.seed), "--repr", "diag,kfc,full", "--max-instances", "500",
                                  "--out", str(out)]))


if __name__ == "__main__":
    main()
