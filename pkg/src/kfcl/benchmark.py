"""The shipped two-task shift benchmark, run through the full training protocol."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data, harness
from .data import recording_access

METHODS = ("None", "EwcDiag", "EwcKfc", "Replay")
REPLAY_M, REPLAY_N = 2, 1


@dataclass
class StudyRun:
    method: str
    seed: int
    tiers: list
    access: data.AccessLog

    @property
    def tier1_accuracy(self) -> float:
        return self.tiers[0].accuracy["A"]

    @property
    def forgetting(self) -> float:
        """Task-A percentage change after training on task B."""
        return self.tiers[1].perc_change["A"]

    @property
    def chosen_lambda(self) -> float | None:
        return self.tiers[1].lambdas[-1] if self.tiers[1].lambdas else None


@dataclass
class Study:
    runs: dict = field(default_factory=dict)  # (method, seed) -> StudyRun

    def seeds(self) -> list[int]:
        return sorted({s for _, s in self.runs})

    def mean_abs_forgetting(self, method: str) -> float:
        return float(np.mean([abs(r.forgetting) for (m, _), r in self.runs.items() if m == method]))

    def sweep_curves(self, method: str):
        """Per seed: (grid, task-A forgetting magnitude in accuracy points, task-B accuracy in points)."""
        out = {}
        for (m, seed), run in self.runs.items():
            if m != method or not run.tiers[1].sweep:
                continue
            base = run.tier1_accuracy
            rows = run.tiers[1].sweep
            out[seed] = (
                [r.lam for r in rows],
                [100 * abs(base - r.prior_eval) for r in rows],
                [100 * r.current_eval for r in rows],
            )
        return out


def plan_for(method: str, seed: int, **overrides) -> harness.ExperimentPlan:
    kw = dict(seed=seed)
    if method in ("EwcDiag", "EwcKfc"):
        kw["grid"] = harness.DEFAULT_GRID
    if method == "Replay":
        kw.update(replay_m=REPLAY_M, replay_n=REPLAY_N)
    kw.update(overrides)
    return harness.ExperimentPlan(("A", "B"), method=method, **kw)


def run_study(seeds: Sequence[int], methods: Sequence[str] = METHODS, progress=None, **plan_overrides) -> Study:
    study = Study()
    for seed in seeds:
        tasks = data.generate_benchmark(2, seed=seed)
        for method in methods:
            with recording_access() as log:
                tiers = harness.run_sequence(plan_for(method, seed, **plan_overrides), tasks)
            study.runs[(method, seed)] = StudyRun(method, seed, tiers, log)
            if progress:
                progress(study.runs[(method, seed)])
    return study


def summary_lines(study: Study) -> list[str]:
    methods = sorted({m for m, _ in study.runs}, key=lambda m: METHODS.index(m) if m in METHODS else 99)
    lines = [f"{'method':<8} {'|dA| %':>8}  per-seed task-A change (chosen lambda)"]
    for m in methods:
        parts = []
        for s in study.seeds():
            run = study.runs.get((m, s))
            if run is None:
                continue
            lam = f" @{run.chosen_lambda:g}" if run.chosen_lambda is not None else ""
            parts.append(f"{run.forgetting:+.2f}{lam}")
        lines.append(f"{m:<8} {study.mean_abs_forgetting(m):>8.2f}  " + ", ".join(parts))
    return lines
