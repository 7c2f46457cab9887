"""Sequential multi-task training: tiers, snapshots, lambda search."""

from __future__ import annotations

import itertools
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import curvature as cv
from . import nn
from . import strategies as st
from .data import RankingTask, Split, current_access_log, recording_access
from .errors import ConfigurationError, DivergenceError, UsageError
from .report import accuracy, percentage_change

DEFAULT_GRID = (1e1, 1e3, 1e5, 1e7, 1e9)


@dataclass(frozen=True)
class ExperimentPlan:
    task_ids: tuple
    method: str = "None"
    lambdas: tuple = ()  # fixed lambda(s); empty with a grid means "search"
    grid: tuple = ()
    epochs: int = 10
    seed: int = 0
    batch_size: int = 32
    lr: float = 0.3
    gamma: float | None = None
    replay_m: int | None = None
    replay_n: int | None = None
    buffer_batches: int = 32
    max_grad_norm: float | None = 5.0
    penalty_step: str = "implicit"  # or "explicit": add the penalty gradient to the SGD step
    # "dataset": the task loss is the NLL summed over the training split, so on mean-loss
    # minibatches every lambda is divided by the split size; "batch": lambda is used as is
    penalty_normalization: str = "dataset"
    arch: str = "cnn"
    hidden: int = 32
    delta: float = 2.0  # accuracy points tolerated on the current task during lambda selection
    eval_split: str = "test"
    select_split: str = "dev"

    def __post_init__(self):
        if len(set(self.task_ids)) != len(self.task_ids) or not self.task_ids:
            raise ConfigurationError("task ids must be distinct and non-empty")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1 or not self.lr > 0:
            raise ConfigurationError("batch size and learning rate must be positive")
        if self.penalty_step not in ("implicit", "explicit"):
            raise ConfigurationError("penalty_step must be 'implicit' or 'explicit'")
        if self.penalty_normalization not in ("dataset", "batch"):
            raise ConfigurationError("penalty_normalization must be 'dataset' or 'batch'")
        if any(not g > 0 for g in self.grid) or list(self.grid) != sorted(self.grid):
            raise ConfigurationError("lambda grid must be positive and sorted")
        self.strategy()  # method-specific field checks

    def strategy(self, lambdas: Sequence[float] = ()) -> st.StrategyConfig:
        return st.StrategyConfig(
            self.method,
            tuple(lambdas) if self.method in st.PENALTY_METHODS else (),
            self.gamma if self.method == "LrControl" else None,
            self.replay_m if self.method == "Replay" else None,
            self.replay_n if self.method == "Replay" else None,
        )

    @property
    def searches(self) -> bool:
        return self.method in st.PENALTY_METHODS and not self.lambdas


@dataclass
class TierResult:
    tier: int
    accuracy: dict  # task_id -> accuracy on the evaluation split
    baseline: dict  # task_id -> accuracy right after that task was trained (earlier tiers only)
    perc_change: dict  # task_id -> percentage change vs baseline (earlier tiers only)
    trained_tier: dict  # task_id -> tier in which it was trained
    lambdas: tuple = ()
    wall_clock: float = 0.0
    sweep: list = field(default_factory=list)
    model: nn.Model | None = field(default=None, repr=False)  # parameters after this tier
    snapshots: tuple = field(default=(), repr=False)  # snapshots of every task trained so far


def _seed_for(plan: ExperimentPlan, task_id: str) -> list[int]:
    return [plan.seed, zlib.crc32(task_id.encode())]


def _clip(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {n: g * scale for n, g in grads.items()}


def estimate_fisher(model: nn.Model, train: Split, method: str):
    if method == "EwcDiag":
        return cv.estimate_diag_fim(model, train)
    if method == "EwcKfc":
        return cv.estimate_kfac(model, train)
    return None


def train_task(
    model: nn.Model,
    task: RankingTask,
    snapshots: Sequence[st.TaskSnapshot],
    config: st.StrategyConfig,
    plan: ExperimentPlan,
    buffer: st.ReplayBuffer | None = None,
    tier: int = 1,
    fisher_method: str | None = None,
) -> tuple[nn.Model, st.TaskSnapshot]:
    """Minibatch SGD on the strategy's total loss, then capture the task snapshot.

    ``fisher_method`` overrides which Fisher the snapshot stores (defaults to
    ``config.method``); replay batches never receive the EWC penalty.
    """
    for snap in snapshots:
        snap.verify()
    train = task.split("train", "train")
    if len(train) == 0:
        raise UsageError(f"task {task.task_id} has an empty training split")
    schedule = st.LrSchedule(plan.lr, config.gamma) if config.method == "LrControl" and tier > 1 else plan.lr
    replaying = config.method == "Replay" and buffer is not None and not buffer.empty and config.replay_n > 0
    n = len(train)
    scale = 1.0 / n if plan.penalty_normalization == "dataset" else 1.0
    implicit = st.ProximalPenalty(snapshots, config, scale) if plan.penalty_step == "implicit" else None
    rng = np.random.default_rng(_seed_for(plan, task.task_id))
    for epoch in range(plan.epochs):
        order = rng.permutation(n)
        batches = (train.take(order[s : s + plan.batch_size]) for s in range(0, n, plan.batch_size))
        stream = st.replay_interleave(batches, buffer) if replaying else ((b, "task") for b in batches)
        for step, (batch, tag) in enumerate(stream):
            loss, grads = nn.loss_and_backward(model, batch)
            if tag == "task" and implicit is None:
                pen, pgrad = st.penalty_and_gradient(model, snapshots, config, scale)
                if pgrad is not None:
                    loss += pen
                    for name, g in pgrad.items():
                        grads[name] += g
            if not math.isfinite(loss):
                raise DivergenceError(f"task {task.task_id}: non-finite loss at epoch {epoch} batch {step}")
            try:
                model = nn.sgd_step(model, _clip(grads, plan.max_grad_norm), schedule)
                if implicit and tag == "task":
                    model = implicit.apply(model, schedule)
            except DivergenceError as exc:
                raise DivergenceError(f"task {task.task_id}: {exc} at epoch {epoch} batch {step}") from None

    method = fisher_method or config.method
    fisher = estimate_fisher(model, task.split("train", "fisher"), method)
    if buffer is not None:
        buffer.add_task(task.task_id, task.split("train", "replay-buffer"), plan.batch_size, plan.buffer_batches)
    snapshot = st.capture_snapshot(task.task_id, model, fisher, 0.0, method)
    return model, snapshot


def initial_model(plan: ExperimentPlan, tasks: Sequence[RankingTask]) -> nn.Model:
    first = tasks[0]
    vocab = max(t.vocab_size for t in tasks)
    return nn.build_ranker(plan.arch, vocab, first.k, first.window, first.feature_dim, plan.hidden, seed=plan.seed)


def evaluate(model: nn.Model, tasks: Sequence[RankingTask], split: str) -> dict:
    return {t.task_id: accuracy(model, t.split(split, "eval")) for t in tasks}


# --- lambda selection --------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    lam: float
    prior_acc: float  # selection split accuracy on the task whose penalty term is tuned
    current_acc: float  # selection split accuracy on the task being trained
    prior_eval: float = float("nan")
    current_eval: float = float("nan")
    distance: float = float("nan")  # ||theta - mu_prior||
    # sqrt of the unit-lambda penalty: the distance in the prior task's Fisher metric
    # (Euclidean over penalised parameters for L2)
    weighted_distance: float = float("nan")


@dataclass
class SweepResult:
    chosen: float
    rows: list
    reference: SweepRow  # the lambda = 0 (method None) run
    runs: dict = field(default_factory=dict)  # lam -> (model, snapshot)


def select_lambda(rows: Sequence[SweepRow], reference_current: float, delta: float = 2.0) -> float:
    """Best prior-task accuracy among lambdas within ``delta`` points of the unregularised current-task accuracy.

    Falls back to the best mean of prior and current accuracy when none qualifies.
    Ties go to the smaller lambda.
    """
    if not rows:
        raise UsageError("lambda selection needs at least one sweep row")
    ok = [r for r in rows if 100 * (reference_current - r.current_acc) <= delta + 1e-12]
    if ok:
        best = max(ok, key=lambda r: (r.prior_acc, -r.lam))
    else:
        best = max(rows, key=lambda r: ((r.prior_acc + r.current_acc) / 2, -r.lam))
    return best.lam


def _distance(model: nn.Model, snap: st.TaskSnapshot) -> float:
    return math.sqrt(sum(float(np.sum((model.params[n] - snap.mean[n]) ** 2)) for n in model.params))


def grid_search_lambda(
    plan: ExperimentPlan,
    grid: Sequence[float],
    model: nn.Model,
    task: RankingTask,
    snapshots: Sequence[st.TaskSnapshot],
    prior_tasks: Sequence[RankingTask],
    fixed: Sequence[float] = (),
    reference: tuple | None = None,
) -> SweepResult:
    """Train ``task`` once per grid value and pick a lambda on the selection split.

    ``fixed`` lambdas apply to the leading snapshots; the searched value applies
    to the last snapshot, whose task (``prior_tasks[-1]``) defines prior accuracy.
    ``reference`` may carry a precomputed (model, snapshot) of the lambda = 0 run.
    """
    grid = list(grid)
    if not grid or any(not g > 0 for g in grid) or grid != sorted(grid):
        raise ConfigurationError("lambda grid must be non-empty, positive and sorted")
    target = prior_tasks[-1]

    def run(lam):
        cfg = plan.strategy(tuple(fixed) + (lam,)) if lam > 0 else replace(plan, method="None", lambdas=()).strategy()
        return train_task(model, task, snapshots, cfg, plan, tier=len(snapshots) + 1, fisher_method=plan.method)

    def row(lam, trained):
        m, _ = trained
        return SweepRow(
            lam,
            accuracy(m, target.split(plan.select_split, "select")),
            accuracy(m, task.split(plan.select_split, "select")),
            accuracy(m, target.split(plan.eval_split, "eval")),
            accuracy(m, task.split(plan.eval_split, "eval")),
            _distance(m, snapshots[-1]),
            math.sqrt(max(cv.penalty(m, snapshots[-1], 1.0), 0.0)),
        )

    ref_run = reference or run(0.0)
    ref = row(0.0, ref_run)
    runs = {lam: run(lam) for lam in grid}
    rows = [row(lam, runs[lam]) for lam in grid]
    return SweepResult(select_lambda(rows, ref.current_acc, plan.delta), rows, ref, runs)


def tier3_lambda_estimate(history, second_task_id: str) -> tuple[float, tuple]:
    """Geometric mean of the tier-2 best lambdas of permutations starting with ``second_task_id``.

    ``history`` is an iterable of ``(permutation, best_lambda)`` pairs.
    Returns the estimate and the grid (estimate/100, estimate, estimate*100).
    """
    bests = [lam for perm, lam in history if perm and perm[0] == second_task_id]
    if not bests:
        raise ConfigurationError(f"no tier-2 lambda history for permutations starting with {second_task_id!r}")
    est = float(np.exp(np.mean(np.log(bests))))
    return est, (est / 100.0, est, est * 100.0)


# --- full protocol ----------------------------------------------------------------------

def run_sequence(plan: ExperimentPlan, tasks: Sequence[RankingTask], history=None, model: nn.Model | None = None) -> list[TierResult]:
    """Tier 1 trains the first task; tier t continues on task t with snapshots of all earlier tasks."""
    by_id = {t.task_id: t for t in tasks}
    missing = [tid for tid in plan.task_ids if tid not in by_id]
    if missing:
        raise ConfigurationError(f"unknown task ids {missing}")
    ordered = [by_id[tid] for tid in plan.task_ids]
    outer = current_access_log()
    # seals are per run: a task sealed in one permutation may be trained first in another
    with recording_access() as log:
        try:
            return _run_sequence(plan, ordered, history, model, log)
        finally:
            if outer is not None:
                outer.reads.extend(log.reads)
                outer.violations.extend(log.violations)


def _run_sequence(plan, ordered, history, model, log):
    model = model or initial_model(plan, ordered)
    buffer = st.ReplayBuffer(plan.replay_m, plan.replay_n) if plan.method == "Replay" else None
    snapshots: list[st.TaskSnapshot] = []
    lambdas: list[float] = []
    baseline: dict = {}
    trained_tier: dict = {}
    results = []
    for tier, task in enumerate(ordered, start=1):
        t0 = time.perf_counter()
        sweep = []
        if tier == 1 or not plan.searches:
            lams = list(plan.lambdas) if tier > 1 else []
            cfg = plan.strategy(lams)
            model, snap = train_task(model, task, snapshots, cfg, plan, buffer, tier=tier)
        else:
            grid = list(plan.grid or DEFAULT_GRID)
            if tier > 2 and history is not None:
                try:
                    _, grid = tier3_lambda_estimate(history, ordered[tier - 2].task_id)
                except ConfigurationError:
                    pass
            res = grid_search_lambda(plan, grid, model, task, snapshots, ordered[: tier - 1], fixed=lambdas)
            model, snap = res.runs[res.chosen]
            lambdas.append(res.chosen)
            sweep = res.rows
        lams_used = tuple(lambdas) if plan.searches else (tuple(plan.lambdas) if tier > 1 else ())
        snapshots.append(replace(snap, lam=lams_used[-1] if lams_used else 0.0))
        log.seal(task.task_id)
        trained_tier[task.task_id] = tier
        seen = ordered[:tier]
        acc = evaluate(model, seen, plan.eval_split)
        baseline.setdefault(task.task_id, acc[task.task_id])
        earlier = {t.task_id: baseline[t.task_id] for t in seen[:-1]}
        change = {tid: percentage_change(b, acc[tid]) for tid, b in earlier.items()}
        results.append(TierResult(tier, acc, earlier, change, dict(trained_tier), lams_used,
                                  time.perf_counter() - t0, sweep, model, tuple(snapshots)))
    for snap in snapshots:
        snap.verify()
    return results


def permutations_of(task_ids: Sequence[str]) -> list[tuple]:
    return [tuple(p) for p in itertools.permutations(task_ids)]


def run_protocol(plan: ExperimentPlan, tasks: Sequence[RankingTask], permutations: Sequence[Sequence[str]] | None = None):
    """Run every permutation; tier-3 lambda grids come from the tier-2 bests of all permutations.

    Returns ``(results, history)`` with ``results[perm]`` the list of TierResults.
    """
    perms = [tuple(p) for p in (permutations or permutations_of(plan.task_ids))]
    history = []
    if plan.searches and any(len(p) > 2 for p in perms):
        for perm in perms:
            tiers = run_sequence(replace(plan, task_ids=perm[:2]), tasks)
            history.append((perm, tiers[1].lambdas[-1]))
    results = {perm: run_sequence(replace(plan, task_ids=perm), tasks, history or None) for perm in perms}
    return results, history
