"""Run configuration: a small INI file (``key = value`` in sections) mirroring RunConfig.

Example::

    [tasks]
    generate = 3
    seed = 0

    [plan]
    permutation = all
    method = EwcKfc
    grid = default
    seeds = 0, 1, 2

    [output]
    dir = runs/kfc
    formats = csv, text
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import itertools
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import strategies as st
from .errors import ConfigurationError
from .harness import DEFAULT_GRID, ExperimentPlan

OUT_ENV = "KFCL_OUT"
FORMATS = ("csv", "text")


@dataclass(frozen=True)
class RunConfig:
    # task sources: either generated benchmark tasks or task files
    generate: int | None = None  # number of benchmark tasks; 2 when no files are given
    task_files: tuple = ()
    data_seed: int | None = None  # benchmark generation seed; defaults to the run seed
    # plan
    permutation: tuple = ()  # empty: the natural order; ("all",): every permutation
    method: str = "None"
    lambdas: tuple = ()
    grid: tuple = ()
    epochs: int = 10
    seeds: tuple = (0,)
    lr: float = ExperimentPlan.lr
    batch_size: int = 32
    gamma: float | None = None
    replay_m: int | None = None
    replay_n: int | None = None
    arch: str = "cnn"
    hidden: int = 32
    delta: float = 2.0
    # output
    out_dir: str = "kfcl-out"
    formats: tuple = ("csv", "text")

    def __post_init__(self):
        if self.task_files and self.generate is not None:
            raise ConfigurationError("use either generate or task files, not both")
        if not self.task_files and not 2 <= self.n_tasks <= 10:
            raise ConfigurationError("generate must be between 2 and 10 tasks")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.lambdas and self.method not in st.PENALTY_METHODS:
            raise ConfigurationError(f"method {self.method} does not take lambdas")
        if self.method in st.PENALTY_METHODS and self.lambdas and self.grid:
            raise ConfigurationError("give either fixed lambdas or a grid, not both")
        bad = [f for f in self.formats if f not in FORMATS]
        if bad:
            raise ConfigurationError(f"unknown report formats {bad}; expected {FORMATS}")
        self.plan(self.task_ids[:2] if len(self.task_ids) >= 2 else ("A", "B"), self.seeds[0])

    @property
    def n_tasks(self) -> int:
        return len(self.task_files) or self.generate or 2

    @property
    def task_ids(self) -> tuple:
        return tuple(chr(ord("A") + i) for i in range(self.n_tasks))

    def permutations(self, task_ids: Sequence[str] | None = None) -> list[tuple]:
        ids = tuple(task_ids or self.task_ids)
        if self.permutation == ("all",):
            return [tuple(p) for p in itertools.permutations(ids)]
        if not self.permutation:
            return [ids]
        if sorted(self.permutation) != sorted(set(self.permutation)) or not set(self.permutation) <= set(ids):
            raise ConfigurationError(f"permutation {self.permutation} must list distinct ids from {ids}")
        return [tuple(self.permutation)]

    def plan(self, task_ids: Sequence[str], seed: int) -> ExperimentPlan:
        penalty = self.method in st.PENALTY_METHODS
        grid = self.grid if penalty and not self.lambdas else ()
        if penalty and not self.lambdas and not grid:
            grid = DEFAULT_GRID
        return ExperimentPlan(
            tuple(task_ids), self.method, tuple(self.lambdas) if penalty else (), tuple(grid), self.epochs, seed,
            self.batch_size, self.lr, self.gamma, self.replay_m, self.replay_n, arch=self.arch, hidden=self.hidden,
            delta=self.delta,
        )

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.out_dir)

    def digest(self) -> str:
        """Stable hash of the fields that determine results (not where or how they are written)."""
        fields = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("out_dir", "formats")}
        blob = json.dumps(fields, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _ints(v: str) -> tuple:
    return tuple(int(x) for x in _items(v))


def _floats(v: str) -> tuple:
    return tuple(float(x) for x in _items(v))


def _items(v: str) -> list[str]:
    return [x.strip() for x in v.replace(";", ",").split(",") if x.strip()]


def _grid(v: str) -> tuple:
    return tuple(DEFAULT_GRID) if v.strip() == "default" else _floats(v)


def _opt_float(v: str):
    return None if v.strip().lower() in ("", "none") else float(v)


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


# section -> key -> (field name, parser)
SCHEMA = {
    "tasks": {"generate": ("generate", int), "files": ("task_files", lambda v: tuple(_items(v))), "seed": ("data_seed", int)},
    "plan": {
        "permutation": ("permutation", lambda v: ("all",) if v.strip() == "all" else tuple(_items(v))),
        "method": ("method", str.strip),
        "lambdas": ("lambdas", _floats),
        "grid": ("grid", _grid),
        "epochs": ("epochs", int),
        "seeds": ("seeds", _ints),
        "lr": ("lr", float),
        "batch_size": ("batch_size", int),
        "gamma": ("gamma", _opt_float),
        "replay_m": ("replay_m", _opt_int),
        "replay_n": ("replay_n", _opt_int),
        "arch": ("arch", str.strip),
        "hidden": ("hidden", int),
        "delta": ("delta", float),
    },
    "output": {"dir": ("out_dir", str.strip), "formats": ("formats", lambda v: tuple(_items(v)))},
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse INI text into RunConfig field overrides; unknown sections and keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str  # keep keys case-sensitive so typos are not silently folded
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    out = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"{source}: unknown section [{section}]")
        for key, value in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"{source}: unknown key {key!r} in [{section}]")
            name, parse = SCHEMA[section][key]
            try:
                out[name] = parse(value)
            except ValueError as exc:
                raise ConfigurationError(f"{source}: [{section}] {key}: {exc}") from None
    return out


def load_config(path=None, **overrides) -> RunConfig:
    """Read ``path`` (optional) and apply ``overrides`` (CLI flags); None-valued overrides are ignored."""
    values = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        values.update(parse_config_text(text, str(path)))
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in overrides.items():
        if key not in fields:
            raise ConfigurationError(f"unknown setting {key!r}")
        if value is not None:
            values[key] = value
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
