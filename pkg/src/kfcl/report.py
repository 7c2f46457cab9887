"""Metrics, result tables, heatmap export and the two-parameter toy demo."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import nn
from .data import as_split
from .errors import KfclError, ParseError, UndefinedBaselineError, UsageError


def accuracy(model: nn.Model, split) -> float:
    """Fraction of instances whose positive candidate has the strict maximum score (ties count as wrong)."""
    split = as_split(split)
    if len(split) == 0:
        raise UsageError("accuracy needs a non-empty split")
    scores = nn.run_forward(model, split)
    rows = np.arange(len(split))
    pos = scores[rows, split.positive]
    others = scores.copy()
    others[rows, split.positive] = -np.inf
    return float(np.mean(pos > others.max(axis=1)))


def percentage_change(before: float, after: float) -> float:
    if before == 0:
        raise UndefinedBaselineError("percentage change is undefined for a zero baseline")
    return (after - before) / before * 100.0


def fmt2(x: float) -> str:
    return f"{x:.2f}"


# --- heatmaps -------------------------------------------------------------------------

def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16 and not (v == 0 and math.copysign(1.0, v) < 0):
        return str(int(v))
    return repr(v)


def matrix_to_csv(matrix: np.ndarray) -> str:
    return "\n".join(",".join(_num(float(v)) for v in row) for row in matrix)


def export_heatmap(matrix: np.ndarray, path, source: str = "") -> Path:
    """Write ``matrix`` as CSV (one row per line) plus a ``.manifest`` sidecar with dims and source."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if not np.all(np.isfinite(matrix)):
        raise UsageError("heatmap matrix must be finite")
    path = Path(path)
    try:
        path.write_text(matrix_to_csv(matrix) + "\n", encoding="utf-8", newline="\n")
        path.with_suffix(path.suffix + ".manifest").write_text(
            f"rows={matrix.shape[0]}\ncols={matrix.shape[1]}\nsource={source}\n", encoding="utf-8", newline="\n"
        )
    except OSError as exc:
        raise KfclError(f"{path}: cannot write heatmap: {exc}") from exc
    return path


def read_heatmap(path) -> np.ndarray:
    path = Path(path)
    try:
        rows = [line for line in path.read_text(encoding="utf-8").split("\n") if line]
        return np.array([[float(v) for v in row.split(",")] for row in rows])
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: cannot read heatmap: {exc}") from exc


# --- toy demo -------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyRow:
    method: str
    theta: tuple
    dist_task_a: float
    dist_joint: float
    loss_a: float
    loss_b: float


def toy_tasks(correlation: float):
    """Two quadratic tasks in 2-D.  Task A's curvature has off-diagonal ``correlation``.

    Task B pulls along the stiff direction of A, where a diagonal penalty
    underestimates the cost of moving.
    """
    h_a = np.array([[1.0, correlation], [correlation, 1.0]])
    a = np.zeros(2)
    h_b = np.eye(2)
    b = np.array([2.0, 1.5])
    return (h_a, a), (h_b, b)


def _quad(h, opt, theta):
    d = theta - opt
    return 0.5 * float(d @ h @ d)


def sequential_quadratic(h_b, b, anchor, fisher, lam, lr=0.05, steps=4000, start=None):
    """Gradient descent on 0.5 (t-b)^T H_B (t-b) + lam (t-anchor)^T F (t-anchor)."""
    theta = np.array(anchor if start is None else start, dtype=np.float64)
    for _ in range(steps):
        g = h_b @ (theta - b) + 2.0 * lam * (fisher @ (theta - anchor))
        theta = theta - lr * g
    return theta


def closed_form_quadratic(h_b, b, anchor, fisher, lam):
    return np.linalg.solve(h_b + 2.0 * lam * fisher, h_b @ b + 2.0 * lam * fisher @ anchor)


def toy_2param_demo(correlation: float = 0.9, lam: float = 1.0, lr: float = 0.05, steps: int = 4000) -> list[ToyRow]:
    """Train task A then task B under None, diagonal EWC and full-covariance EWC."""
    (h_a, a), (h_b, b) = toy_tasks(correlation)
    theta_a = sequential_quadratic(h_a, a, np.array([1.0, -1.0]), np.zeros((2, 2)), 0.0, lr, steps)
    fisher_full = h_a  # exact for a Gaussian likelihood
    joint = np.linalg.solve(h_a + h_b, h_a @ a + h_b @ b)
    rows = []
    for method, fisher in (("None", np.zeros((2, 2))), ("EwcDiag", np.diag(np.diag(fisher_full))), ("EwcFull", fisher_full)):
        theta = sequential_quadratic(h_b, b, theta_a, fisher, lam if method != "None" else 0.0, lr, steps)
        rows.append(
            ToyRow(method, tuple(theta.tolist()), float(np.linalg.norm(theta - a)), float(np.linalg.norm(theta - joint)),
                   _quad(h_a, a, theta), _quad(h_b, b, theta))
        )
    return rows


def toy_table(rows: Sequence[ToyRow]) -> str:
    head = f"{'method':<8} {'theta0':>9} {'theta1':>9} {'dist_A':>9} {'dist_joint':>10} {'loss_A':>9} {'loss_B':>9}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.method:<8} {r.theta[0]:>9.4f} {r.theta[1]:>9.4f} {r.dist_task_a:>9.4f} {r.dist_joint:>10.4f} "
                     f"{r.loss_a:>9.4f} {r.loss_b:>9.4f}")
    return "\n".join(lines)


# --- result tables ----------------------------------------------------------------------

RESULT_COLUMNS = ("permutation", "method", "seed", "tier", "task", "trained_tier", "accuracy", "baseline", "perc_change", "lambdas")


@dataclass(frozen=True)
class ResultRow:
    permutation: str
    method: str
    seed: int
    tier: int
    task: str
    trained_tier: int
    accuracy: float
    baseline: float | None
    perc_change: float | None
    lambdas: str = ""


def rows_from_tiers(permutation: Sequence[str], method: str, seed: int, tiers) -> list[ResultRow]:
    rows = []
    for tr in tiers:
        for task, acc in tr.accuracy.items():
            change = tr.perc_change.get(task)
            rows.append(ResultRow(
                "->".join(permutation), method, seed, tr.tier, task, tr.trained_tier[task], acc,
                tr.baseline.get(task), change, ";".join(f"{x:g}" for x in tr.lambdas),
            ))
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_results_csv(rows: Iterable[ResultRow], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow([_cell(getattr(r, c)) for c in RESULT_COLUMNS])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="\n")


def read_results_csv(path) -> list[ResultRow]:
    """Parse and schema-check a results CSV, recomputing every percentage-change cell."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != RESULT_COLUMNS:
        raise ParseError(f"{path}: unexpected header {header}")
    rows = []
    for i, rec in enumerate(reader, start=2):
        if len(rec) != len(RESULT_COLUMNS):
            raise ParseError(f"{path}:{i}: expected {len(RESULT_COLUMNS)} columns")
        try:
            row = ResultRow(
                rec[0], rec[1], int(rec[2]), int(rec[3]), rec[4], int(rec[5]), float(rec[6]),
                float(rec[7]) if rec[7] else None, float(rec[8]) if rec[8] else None, rec[9],
            )
        except ValueError as exc:
            raise ParseError(f"{path}:{i}: {exc}") from None
        if not 0.0 <= row.accuracy <= 1.0:
            raise ParseError(f"{path}:{i}: accuracy outside [0, 1]")
        earlier = row.trained_tier < row.tier
        if earlier != (row.perc_change is not None) or earlier != (row.baseline is not None):
            raise ParseError(f"{path}:{i}: percentage change must be present iff the task was trained earlier")
        if earlier and not math.isclose(row.perc_change, percentage_change(row.baseline, row.accuracy), rel_tol=0, abs_tol=1e-9):
            raise ParseError(f"{path}:{i}: percentage change does not match the raw accuracies")
        rows.append(row)
    return rows


def table_grid(rows: Sequence[ResultRow]) -> tuple[list[str], list[list[str]]]:
    """Seed-averaged grid: one line per (permutation, method, tier), Acc./Perc. delta per task."""
    tasks = []
    for r in rows:
        if r.task not in tasks:
            tasks.append(r.task)
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.permutation, r.method, r.tier), {}).setdefault(r.task, []).append(r)
    head = ["Perm.", "Method", "Tier"]
    for t in tasks:
        head += [f"{t} Acc.", f"{t} Perc. D"]
    body = []
    for (perm, method, tier), per_task in groups.items():
        line = [perm, method, str(tier)]
        for t in tasks:
            rs = per_task.get(t)
            if not rs:
                line += ["", ""]
                continue
            acc = float(np.mean([r.accuracy for r in rs])) * 100
            changes = [r.perc_change for r in rs if r.perc_change is not None]
            line += [fmt2(acc), fmt2(float(np.mean(changes))) if changes else "-"]
        body.append(line)
    return head, body


def format_table(rows: Sequence[ResultRow]) -> str:
    head, body = table_grid(rows)
    widths = [max(len(x) for x in col) for col in zip(head, *body)]
    out = ["  ".join(c.ljust(w) for c, w in zip(head, widths)).rstrip()]
    out.append("  ".join("-" * w for w in widths))
    out += ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in body]
    return "\n".join(out)


def summary_csv(rows: Sequence[ResultRow]) -> str:
    head, body = table_grid(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    w.writerows(body)
    return buf.getvalue()
