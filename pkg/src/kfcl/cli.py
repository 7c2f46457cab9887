"""``kfcl`` command line: generate, train, sweep, report, fisher, demo-2param.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import curvature as cv
from . import data, harness, nn, report, storage
from .config import RunConfig, load_config
from .errors import ConfigurationError, KfclError, OracleScaleError, UsageError

FULL_LIMIT = 10**12  # elements; larger full FIMs are reported and never built



class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.replace(";", ",").split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _grid(text: str) -> tuple:
    return tuple(harness.DEFAULT_GRID) if text == "default" else _floats(text)


def _add_plan_options(p, multi_seed: bool) -> None:
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--tasks", type=int, dest="generate", help="number of generated benchmark tasks")
    p.add_argument("--task-files", nargs="+", help="task files, in task-id order A, B, ...")
    p.add_argument("--data-seed", type=int, help="benchmark generation seed (default: the run seed)")
    p.add_argument("--permutation", help="comma-separated task ids, or 'all'")
    p.add_argument("--method", choices=("None", "L2", "EwcDiag", "EwcKfc", "Replay", "LrControl"))
    p.add_argument("--lambdas", type=_floats, help="fixed lambda(s), one per prior task or one shared")
    p.add_argument("--grid", type=_grid, help="lambda grid, comma-separated or 'default'")
    p.add_argument("--epochs", type=int)
    if multi_seed:
        p.add_argument("--seeds", type=_ints, help="comma-separated seeds")
    else:
        p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float, help="per-layer decay for LrControl")
    p.add_argument("--replay-m", type=int)
    p.add_argument("--replay-n", type=int)
    p.add_argument("--arch", choices=("cnn", "transformer"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--delta", type=float, help="current-task tolerance (accuracy points) for lambda selection")
    p.add_argument("--out", dest="out_dir", help="output directory (KFCL_OUT overrides)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kfcl", description="EWC with Kronecker-factored Fisher for continual ranking tasks")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write benchmark task files")
    g.add_argument("--tasks", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--rotation-angle", type=float, help="feature rotation between consecutive tasks (radians)")
    g.add_argument("--vocabulary-overlap", type=float)
    g.add_argument("--out", required=True)

    _add_plan_options(sub.add_parser("train", help="run one plan (one seed, one permutation)"), multi_seed=False)
    _add_plan_options(sub.add_parser("sweep", help="run permutations x seeds, searching lambda where needed"), multi_seed=True)

    r = sub.add_parser("report", help="validate result files and assemble tables")
    r.add_argument("paths", nargs="+", help="result CSV files or directories holding results-*.csv")
    r.add_argument("--out", help="directory for summary.csv and table.txt")
    r.add_argument("--formats", default="csv,text")

    f = sub.add_parser("fisher", help="memory report, Fisher estimation and heatmap export")
    f.add_argument("--checkpoint", help="model directory written by train")
    f.add_argument("--arch", choices=("cnn", "transformer"), default="cnn")
    f.add_argument("--hidden", type=int, default=32)
    f.add_argument("--vocab", type=int, help="vocabulary size for a fresh model (default: the benchmark's)")
    f.add_argument("--task-file", help="task whose training split is used for estimation")
    f.add_argument("--tasks", type=int, default=2, help="generated benchmark size when no task file is given")
    f.add_argument("--task-id", default="A")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--repr", default="diag,kfc", help="comma-separated subset of diag, kfc, full")
    f.add_argument("--memory-only", action="store_true", help="print the memory report and stop")
    f.add_argument("--max-instances", type=int, help="estimate on the first N training instances")
    f.add_argument("--out", help="directory for heatmap CSVs and Fisher tensors")

    d = sub.add_parser("demo-2param", help="two-parameter quadratic toy comparison")
    d.add_argument("--correlation", type=float, default=0.9)
    d.add_argument("--lam", type=float, default=1.0)
    d.add_argument("--out", help="directory for toy.csv and the task-A Fisher heatmaps")
    return parser


# --- helpers ------------------------------------------------------------------------

def _run_config(args, multi_seed: bool) -> RunConfig:
    over = {k: getattr(args, k) for k in ("generate", "data_seed", "method", "lambdas", "grid", "epochs", "lr", "gamma",
                                          "replay_m", "replay_n", "arch", "hidden", "delta", "out_dir")}
    over["task_files"] = tuple(args.task_files) if args.task_files else None
    if args.permutation:
        over["permutation"] = ("all",) if args.permutation == "all" else tuple(x.strip() for x in args.permutation.split(","))
    over["seeds"] = args.seeds if multi_seed else ((args.seed,) if args.seed is not None else None)
    return load_config(args.config, **over)


def load_tasks(cfg: RunConfig, seed: int) -> list[data.RankingTask]:
    if cfg.task_files:
        return [data.load_task(p, task_id=tid) for p, tid in zip(cfg.task_files, cfg.task_ids)]
    return data.generate_benchmark(cfg.n_tasks, seed=seed if cfg.data_seed is None else cfg.data_seed)


def _stem(method: str, perm: Sequence[str], seed: int) -> str:
    return f"{method}-{''.join(perm)}-s{seed}"


def _sweep_csv(tiers) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tier", "lambda", "prior_acc", "current_acc", "prior_eval", "current_eval", "distance", "weighted_distance",
                "chosen"])
    for tr in tiers:
        for row in tr.sweep:
            w.writerow([tr.tier, repr(row.lam), repr(row.prior_acc), repr(row.current_acc), repr(row.prior_eval),
                        repr(row.current_eval), repr(row.distance), repr(row.weighted_distance),
                        int(row.lam == tr.lambdas[-1])])
    return buf.getvalue()


def _write_run(out: Path, cfg: RunConfig, perm, seed: int, tiers, model: nn.Model | None = None) -> list[report.ResultRow]:
    stem = _stem(cfg.method, perm, seed)
    rows = report.rows_from_tiers(perm, cfg.method, seed, tiers)
    report.write_results_csv(rows, out / f"results-{stem}.csv")
    summary = {"config": cfg.digest(), "method": cfg.method, "permutation": list(perm), "seed": seed,
               "lambdas": [list(tr.lambdas) for tr in tiers],
               "accuracy": [{k: tr.accuracy[k] for k in sorted(tr.accuracy)} for tr in tiers]}
    (out / f"results-{stem}.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8", newline="\n")
    if any(tr.sweep for tr in tiers):
        (out / f"sweep-{stem}.csv").write_text(_sweep_csv(tiers), encoding="utf-8", newline="\n")
    if model is not None:
        storage.save_model(model, out / f"model-{stem}")
    return rows


def _done(out: Path, cfg: RunConfig, perm, seed: int) -> bool:
    path = out / f"results-{_stem(cfg.method, perm, seed)}.json"
    try:
        return json.loads(path.read_text(encoding="utf-8")).get("config") == cfg.digest()
    except (OSError, ValueError):
        return False


def _emit_tables(rows, out: Path | None, formats: Sequence[str]) -> None:
    print(report.format_table(rows))
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    if "csv" in formats:
        (out / "summary.csv").write_text(report.summary_csv(rows), encoding="utf-8", newline="\n")
    if "text" in formats:
        (out / "table.txt").write_text(report.format_table(rows) + "\n", encoding="utf-8", newline="\n")


# --- subcommands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    kw = {}
    if args.rotation_angle is not None:
        kw["rotation_angle"] = args.rotation_angle
    if args.vocabulary_overlap is not None:
        kw["vocabulary_overlap"] = args.vocabulary_overlap
    if not 1 <= args.tasks <= 10:
        raise UsageError("--tasks must be between 1 and 10")
    tasks = data.generate_benchmark(args.tasks, seed=args.seed, **kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in tasks:
        data.write_task(t, out / f"{t.task_id}.task")
        print(f"wrote {out / (t.task_id + '.task')}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args, multi_seed=False)
    if len(cfg.seeds) != 1:
        raise UsageError("train runs one seed; use sweep for several")
    seed = cfg.seeds[0]
    tasks = load_tasks(cfg, seed)
    perms = cfg.permutations([t.task_id for t in tasks])
    if len(perms) != 1:
        raise UsageError("train runs one permutation; use sweep for 'all'")
    plan = cfg.plan(perms[0], seed)
    out = cfg.output_dir()
    tiers = harness.run_sequence(plan, tasks)
    out.mkdir(parents=True, exist_ok=True)
    rows = _write_run(out, cfg, perms[0], seed, tiers, tiers[-1].model)
    stem = _stem(cfg.method, perms[0], seed)
    for snap in tiers[-1].snapshots:
        storage.save_snapshot(snap, out / f"snapshot-{stem}-{snap.task_id}", tiers[-1].model)
    _emit_tables(rows, None, cfg.formats)
    print(f"results in {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args, multi_seed=True)
    out = cfg.output_dir()
    all_rows = []
    plans = []
    for seed in cfg.seeds:
        tasks = load_tasks(cfg, seed)
        perms = cfg.permutations([t.task_id for t in tasks])
        plans.append((seed, tasks, perms))
    out.mkdir(parents=True, exist_ok=True)
    for seed, tasks, perms in plans:
        todo = [p for p in perms if not _done(out, cfg, p, seed)]
        if todo:
            results, _ = harness.run_protocol(cfg.plan(perms[0], seed), tasks, perms)
            for perm in todo:
                _write_run(out, cfg, perm, seed, results[perm])
        for perm in perms:
            all_rows += report.read_results_csv(out / f"results-{_stem(cfg.method, perm, seed)}.csv")
        print(f"seed {seed}: {len(perms)} permutation(s) done", file=sys.stderr)
    _emit_tables(all_rows, out, cfg.formats)
    return 0


def _result_files(paths: Sequence[str]) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(p.glob("results-*.csv"))
        elif p.is_file():
            files.append(p)
        else:
            raise UsageError(f"{p}: no such file or directory")
    if not files:
        raise UsageError("no result files found")
    return files


def cmd_report(args) -> int:
    formats = tuple(x.strip() for x in args.formats.split(",") if x.strip())
    if any(f not in ("csv", "text") for f in formats):
        raise UsageError(f"unknown formats {formats}")
    rows = []
    for path in _result_files(args.paths):
        rows += report.read_results_csv(path)
    _emit_tables(rows, Path(args.out) if args.out else None, formats)
    return 0


def memory_table(model: nn.Model) -> list[tuple[str, int]]:
    return [(s, cv.memory_footprint(model, s)) for s in cv.SCHEMES]


def cmd_fisher(args) -> int:
    reprs = [r.strip().lower() for r in args.repr.split(",") if r.strip()]
    if not reprs or any(r not in ("diag", "kfc", "full") for r in reprs):
        raise UsageError("--repr takes a comma-separated subset of diag, kfc, full")
    task = None
    if args.checkpoint:
        model = storage.load_model(args.checkpoint)
    else:
        vocab = args.vocab
        if vocab is None or not args.memory_only:
            tasks = [data.load_task(args.task_file)] if args.task_file else data.generate_benchmark(args.tasks, seed=args.seed)
            vocab = vocab or max(t.vocab_size for t in tasks)
            task = tasks[0] if args.task_file else next((t for t in tasks if t.task_id == args.task_id), None)
            if task is None:
                raise UsageError(f"no task {args.task_id!r} in the generated benchmark")
        first = task or data.GeneratorSpec()
        model = nn.build_ranker(args.arch, vocab, first.k, first.window, first.feature_dim, args.hidden, seed=args.seed)

    print(f"model: {model.arch}, {model.n_params} parameters")
    print(f"{'scheme':<10} {'elements':>24}")
    for scheme, count in memory_table(model):
        print(f"{scheme:<10} {count:>24,}")
    full_count = cv.memory_footprint(model, "Full")
    if "full" in reprs and full_count > FULL_LIMIT:
        raise OracleScaleError(f"full FIM needs {full_count:.3e} elements (> 1e12); refusing to materialize it")
    if args.memory_only:
        return 0

    if task is None:
        if args.task_file:
            task = data.load_task(args.task_file)
        else:
            task = next((t for t in data.generate_benchmark(args.tasks, seed=args.seed) if t.task_id == args.task_id), None)
            if task is None:
                raise UsageError(f"no task {args.task_id!r} in the generated benchmark")
    train = task.train
    if args.max_instances:
        train = train.take(slice(0, args.max_instances))
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    src = f"task {task.task_id}, {len(train)} training instances"
    if "diag" in reprs:
        fd = cv.estimate_diag_fim(model, train)
        total = sum(float(v.sum()) for v in fd.diag.values())
        print(f"diag: trace {total:.6g}")
        if out:
            vec = np.concatenate([fd.diag[n].ravel() for n in cv.penalized_names(model)])
            report.export_heatmap(vec[None, :], out / "fisher-diag.csv", f"diagonal FIM, {src}")
            for name, v in fd.diag.items():
                storage.write_tensor(out / f"diag.{name}.kft", v)
    if "kfc" in reprs:
        fk = cv.estimate_kfac(model, train)
        for key, pair in fk.factors.items():
            print(f"kfc {key}: A {pair.A.shape[0]}x{pair.A.shape[1]}, G {pair.G.shape[0]}x{pair.G.shape[1]}")
            if out:
                report.export_heatmap(pair.A, out / f"kfc-{key}-A.csv", f"KFC input factor of {key}, {src}")
                report.export_heatmap(pair.G, out / f"kfc-{key}-G.csv", f"KFC gradient factor of {key}, {src}")
                storage.write_tensor(out / f"A.{key}.kft", pair.A)
                storage.write_tensor(out / f"G.{key}.kft", pair.G)
        if out and model.n_params <= cv.ORACLE_CAP:
            report.export_heatmap(cv.materialize_kfc_fim(model, fk), out / "fisher-kfc.csv", f"materialized KFC FIM, {src}")
    if "full" in reprs:
        ff = cv.estimate_full_fim(model, train)
        print(f"full: {ff.matrix.shape[0]}x{ff.matrix.shape[1]}")
        if out:
            report.export_heatmap(ff.matrix, out / "fisher-full.csv", f"full FIM, {src}")
    return 0


def cmd_demo(args) -> int:
    rows = report.toy_2param_demo(args.correlation, args.lam)
    print(report.toy_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (h_a, _), _ = report.toy_tasks(args.correlation)
        report.export_heatmap(h_a, out / "toy-fisher-full.csv", f"task-A Fisher, correlation {args.correlation}")
        report.export_heatmap(np.diag(np.diag(h_a)), out / "toy-fisher-diag.csv", "task-A Fisher, diagonal part")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "theta0", "theta1", "dist_task_a", "dist_joint", "loss_a", "loss_b"])
        for r in rows:
            w.writerow([r.method, repr(r.theta[0]), repr(r.theta[1]), repr(r.dist_task_a), repr(r.dist_joint),
                        repr(r.loss_a), repr(r.loss_b)])
        (out / "toy.csv").write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report,
            "fisher": cmd_fisher, "demo-2param": cmd_demo}


def run_cli(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigurationError) as exc:
        print(f"kfcl: error: {exc}", file=sys.stderr)
        return 1
    except (KfclError, OSError) as exc:
        print(f"kfcl: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_cli())
