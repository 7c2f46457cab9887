"""Forgetting-mitigation strategies applied inside the sequential training loop."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import curvature as cv
from . import nn
from .errors import ConfigurationError, SnapshotIncompatibleError

METHODS = ("None", "L2", "EwcDiag", "EwcKfc", "Replay", "LrControl")
PENALTY_METHODS = ("L2", "EwcDiag", "EwcKfc")


@dataclass(frozen=True)
class LrSchedule:
    """Geometric per-layer rates: eta_l = base * gamma**l, l = 0 at the output layer."""

    base: float
    gamma: float = 1.0

    def __post_init__(self):
        if not self.base > 0 or not self.gamma > 0:
            raise ConfigurationError("learning rate and decay must be positive")

    def rate(self, depth: int) -> float:
        return lr_for_layer(self, depth)


def lr_for_layer(schedule: LrSchedule, layer_index: int) -> float:
    return schedule.base * schedule.gamma ** layer_index


@dataclass(frozen=True)
class StrategyConfig:
    method: str = "None"
    lambdas: tuple = ()  # one per prior task, or a single shared value
    gamma: float | None = None
    replay_m: int | None = None
    replay_n: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.lambdas and self.method not in PENALTY_METHODS:
            raise ConfigurationError(f"method {self.method} does not take lambdas")
        if any(lam < 0 for lam in self.lambdas):
            raise ConfigurationError("lambdas must be non-negative")
        if (self.gamma is not None) != (self.method == "LrControl"):
            raise ConfigurationError("gamma is required by LrControl and only by LrControl")
        replay = self.method == "Replay"
        if (self.replay_m is not None or self.replay_n is not None) != replay:
            raise ConfigurationError("replay m/n are required by Replay and only by Replay")
        if replay:
            if self.replay_m is None or self.replay_n is None or self.replay_m < 1 or self.replay_n < 0:
                raise ConfigurationError("replay needs m >= 1 and n >= 0")

    def lambda_for(self, index: int, n_prior: int) -> float:
        if not self.lambdas:
            raise ConfigurationError(f"method {self.method} needs a lambda for prior task {index}")
        if len(self.lambdas) == 1:
            return float(self.lambdas[0])
        if len(self.lambdas) != n_prior:
            raise ConfigurationError(f"got {len(self.lambdas)} lambdas for {n_prior} prior tasks")
        return float(self.lambdas[index])


def _checksum(mean: dict, fisher) -> str:
    h = hashlib.sha256()
    arrays = dict(mean)
    if isinstance(fisher, cv.DiagFisher):
        arrays.update({f"diag:{k}": v for k, v in fisher.diag.items()})
    elif isinstance(fisher, cv.KfcFisher):
        for key, pair in fisher.factors.items():
            arrays[f"A:{key}"] = pair.A
            arrays[f"G:{key}"] = pair.G
        arrays.update({f"diag:{k}": v for k, v in fisher.diag.items()})
    elif isinstance(fisher, cv.FullFisher):
        arrays["full"] = fisher.matrix
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class TaskSnapshot:
    task_id: str
    mean: dict
    fisher: object = None  # DiagFisher | KfcFisher | FullFisher | None (identity)
    lam: float = 0.0
    method: str = "None"
    checksum: str = ""

    def verify(self) -> None:
        if self.checksum and _checksum(self.mean, self.fisher) != self.checksum:
            raise SnapshotIncompatibleError(f"snapshot for task {self.task_id} changed after capture")


def capture_snapshot(task_id: str, model: nn.Model, fisher=None, lam: float = 0.0, method: str = "None") -> TaskSnapshot:
    mean = {n: v.copy() for n, v in model.params.items()}
    for v in mean.values():
        v.setflags(write=False)
    return TaskSnapshot(task_id, mean, fisher, lam, method, _checksum(mean, fisher))


def _active_terms(snapshots: Sequence[TaskSnapshot], config: StrategyConfig):
    if config.method not in PENALTY_METHODS or not snapshots:
        return []
    if config.method == "L2":
        # anchor to the immediately preceding task only
        last = snapshots[-1]
        return [(TaskSnapshot(last.task_id, last.mean, None), config.lambda_for(len(snapshots) - 1, len(snapshots)))]
    terms = []
    for i, snap in enumerate(snapshots):
        want = cv.DiagFisher if config.method == "EwcDiag" else cv.KfcFisher
        if not isinstance(snap.fisher, (want, cv.FullFisher)):
            raise SnapshotIncompatibleError(f"snapshot {snap.task_id} has no {want.__name__} for {config.method}")
        terms.append((snap, config.lambda_for(i, len(snapshots))))
    return terms


def total_loss(task_loss: float, current: nn.Model, snapshots: Sequence[TaskSnapshot], config: StrategyConfig) -> float:
    """Task loss plus the sum of per-prior-task quadratic penalties."""
    total = task_loss
    for snap, lam in _active_terms(snapshots, config):
        total += cv.penalty(current, snap, lam)
    return total


def penalty_and_gradient(current: nn.Model, snapshots: Sequence[TaskSnapshot], config: StrategyConfig, scale: float = 1.0):
    """Summed penalty value and gradient (each lambda multiplied by ``scale``); (0.0, None) without a penalty."""
    terms = [(s, lam * scale) for s, lam in _active_terms(snapshots, config) if lam != 0.0]
    if not terms:
        return 0.0, None
    value = 0.0
    grads = nn.zeros_like(current)
    for snap, lam in terms:
        value += cv.penalty(current, snap, lam)
        for name, g in cv.penalty_gradient(current, snap, lam).items():
            grads[name] += g
    return value, grads


@dataclass
class ReplayBuffer:
    """Stored batches of earlier tasks, replayed ``n`` at a time after every ``m`` task batches."""

    m: int
    n: int
    batches: dict = field(default_factory=dict)  # task_id -> list of Split
    _turn: int = 0
    _cursor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.m < 1 or self.n < 0:
            raise ConfigurationError("replay needs m >= 1 and n >= 0")

    def add_task(self, task_id: str, train, batch_size: int = 32, max_batches: int = 32) -> None:
        """Keep the first ``max_batches`` batches of a finished task's training split."""
        stored = []
        for start in range(0, min(len(train), batch_size * max_batches), batch_size):
            stored.append(train.take(slice(start, start + batch_size)))
        self.batches[task_id] = stored
        self._cursor[task_id] = 0

    @property
    def empty(self) -> bool:
        return not any(self.batches.values())

    def next_batch(self):
        tasks = [t for t, b in self.batches.items() if b]
        task_id = tasks[self._turn % len(tasks)]
        self._turn += 1
        i = self._cursor[task_id]
        self._cursor[task_id] = (i + 1) % len(self.batches[task_id])
        return self.batches[task_id][i], task_id


def replay_interleave(task_batches: Iterable, buffer: ReplayBuffer) -> Iterator[tuple[object, str]]:
    """Yield ``(batch, tag)``; tag is ``"task"`` or ``"replay:<task_id>"``."""
    if buffer.n > 0 and buffer.empty:
        raise ConfigurationError("replay requested but the buffer holds no earlier task")
    for i, batch in enumerate(task_batches, start=1):
        yield batch, "task"
        if i % buffer.m == 0:
            for _ in range(buffer.n):
                rb, tid = buffer.next_batch()
                yield rb, f"replay:{tid}"


class ProximalPenalty:
    """Implicit integration of the quadratic penalties after an SGD step on the task loss.

    For one term ``lam (t - mu)^T F (t - mu)`` and step ``eta`` the update is
    ``t <- mu + (I + 2 eta lam F)^{-1} (t - mu)``, which agrees with an explicit
    gradient step to first order in ``eta`` but stays stable for any ``lam``.
    Kronecker terms are inverted in the eigenbases of A and G; several prior
    tasks are applied one after another (operator splitting).  Each lambda is
    multiplied by ``scale``.
    """

    def __init__(self, snapshots: Sequence[TaskSnapshot], config: StrategyConfig, scale: float = 1.0):
        self.terms = [(s, lam * scale) for s, lam in _active_terms(snapshots, config) if lam != 0.0]
        self._eig: dict = {}

    def __bool__(self) -> bool:
        return bool(self.terms)

    def _eigh(self, snap, key, pair):
        cache_key = (snap.checksum, snap.task_id, key)
        if cache_key not in self._eig:
            sa, ua = np.linalg.eigh(pair.A)
            sg, ug = np.linalg.eigh(pair.G)
            self._eig[cache_key] = (np.maximum(sa, 0.0), ua, np.maximum(sg, 0.0), ug)
        return self._eig[cache_key]

    def apply(self, model: nn.Model, schedule) -> nn.Model:
        params = dict(model.params)

        def rate(key):
            return schedule if isinstance(schedule, (int, float)) else schedule.rate(model.depth_from_output(key))

        for snap, lam in self.terms:
            fisher = snap.fisher
            mu = snap.mean
            if fisher is None or isinstance(fisher, cv.DiagFisher):
                for name in cv.penalized_names(model):
                    c = 2.0 * rate(name.rsplit(".", 1)[0]) * lam
                    f = 1.0 if fisher is None else fisher.diag[name]
                    params[name] = mu[name] + (params[name] - mu[name]) / (1.0 + c * f)
            elif isinstance(fisher, cv.KfcFisher):
                for key, pair in fisher.factors.items():
                    c = 2.0 * rate(key) * lam
                    sa, ua, sg, ug = self._eigh(snap, key, pair)
                    d = params[f"{key}.W"] - mu[f"{key}.W"]
                    if pair.has_bias:
                        d = np.vstack([d, (params[f"{key}.b"] - mu[f"{key}.b"])[None, :]])
                    rot = ua.T @ d @ ug
                    d = ua @ (rot / (1.0 + c * np.outer(sa, sg))) @ ug.T
                    if pair.has_bias:
                        params[f"{key}.W"] = mu[f"{key}.W"] + d[:-1]
                        params[f"{key}.b"] = mu[f"{key}.b"] + d[-1]
                    else:
                        params[f"{key}.W"] = mu[f"{key}.W"] + d
                for name, f in fisher.diag.items():
                    c = 2.0 * rate(name.rsplit(".", 1)[0]) * lam
                    params[name] = mu[name] + (params[name] - mu[name]) / (1.0 + c * f)
            elif isinstance(fisher, cv.FullFisher):
                names = cv.penalized_names(model)
                sizes = [model.params[n].size for n in model.params]
                offsets = dict(zip(model.params, np.cumsum([0] + sizes[:-1])))
                idx = np.concatenate([offsets[n] + np.arange(model.params[n].size) for n in names])
                etas = np.concatenate([np.full(model.params[n].size, rate(n.rsplit(".", 1)[0])) for n in names])
                d = np.concatenate([(params[n] - mu[n]).ravel() for n in names])
                sub = fisher.matrix[np.ix_(idx, idx)]
                d = np.linalg.solve(np.eye(len(idx)) + 2.0 * lam * etas[:, None] * sub, d)
                i = 0
                for n in names:
                    size = model.params[n].size
                    params[n] = mu[n] + d[i : i + size].reshape(model.params[n].shape)
                    i += size
            else:
                raise SnapshotIncompatibleError(f"unknown Fisher representation {type(fisher).__name__}")
        return nn.with_params(model, params)
