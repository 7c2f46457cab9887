"""Candidate-ranking tasks: synthetic generation, text task files, combining.

A task holds three splits of ranking instances.  Every instance carries a fixed
window of context token ids, ``k`` continuous candidate feature vectors and the
index of the single positive candidate.  Splits are stored as stacked arrays so
training can slice minibatches without per-instance Python overhead.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError, UsageError

SPLITS = ("train", "dev", "test")
PAD_TOKEN = 0


@dataclass(frozen=True)
class RankingInstance:
    context: np.ndarray  # (window,) int64 token ids
    candidates: np.ndarray  # (k, feature_dim) float64
    positive: int

    def __post_init__(self):
        k = self.candidates.shape[0]
        if not 0 <= self.positive < k:
            raise ConfigurationError(f"positive index {self.positive} outside [0, {k})")


@dataclass(frozen=True)
class Split:
    """A stacked set of instances: ``tokens`` (N, T), ``candidates`` (N, k, f), ``positive`` (N,)."""

    tokens: np.ndarray
    candidates: np.ndarray
    positive: np.ndarray

    def __post_init__(self):
        n = self.tokens.shape[0]
        if self.candidates.shape[0] != n or self.positive.shape[0] != n:
            raise ConfigurationError("split arrays disagree on instance count")
        if n and (self.positive.min() < 0 or self.positive.max() >= self.candidates.shape[1]):
            raise ConfigurationError("positive index out of range")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def __getitem__(self, i: int) -> RankingInstance:
        return RankingInstance(self.tokens[i], self.candidates[i], int(self.positive[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def k(self) -> int:
        return self.candidates.shape[1]

    @property
    def window(self) -> int:
        return self.tokens.shape[1]

    def take(self, idx) -> "Split":
        return Split(self.tokens[idx], self.candidates[idx], self.positive[idx])

    @classmethod
    def from_instances(cls, instances: Sequence[RankingInstance]) -> "Split":
        if len(instances) == 0:
            raise UsageError("cannot stack an empty instance list")
        return cls(
            np.stack([np.asarray(x.context, dtype=np.int64) for x in instances]),
            np.stack([np.asarray(x.candidates, dtype=np.float64) for x in instances]),
            np.array([x.positive for x in instances], dtype=np.int64),
        )


def as_split(data) -> Split:
    """Coerce an instance, a list of instances or a Split into a Split."""
    if isinstance(data, Split):
        return data
    if isinstance(data, RankingInstance):
        return Split.from_instances([data])
    return Split.from_instances(list(data))


# --- data-access instrumentation -------------------------------------------

@dataclass
class AccessLog:
    """Records every split read; ``sealed`` task ids must not have train reads."""

    reads: list = field(default_factory=list)
    sealed: set = field(default_factory=set)
    violations: list = field(default_factory=list)

    def record(self, task_id: str, split: str, purpose: str) -> None:
        self.reads.append((task_id, split, purpose))
        if split == "train" and task_id in self.sealed:
            self.violations.append((task_id, split, purpose))

    def seal(self, task_id: str) -> None:
        self.sealed.add(task_id)

    def train_reads(self, task_id: str) -> int:
        return sum(1 for t, s, _ in self.reads if t == task_id and s == "train")


_access_log: contextvars.ContextVar[AccessLog | None] = contextvars.ContextVar("kfcl_access_log", default=None)


class recording_access:
    """Context manager installing a fresh AccessLog for the enclosed block."""

    def __init__(self, log: AccessLog | None = None):
        self.log = log or AccessLog()

    def __enter__(self) -> AccessLog:
        self._token = _access_log.set(self.log)
        return self.log

    def __exit__(self, *exc):
        _access_log.reset(self._token)
        return False


def current_access_log() -> AccessLog | None:
    return _access_log.get()


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of one synthetic task drawn from a shared latent world."""

    vocab_size: int = 800  # tokens used by this task
    n_concepts: int = 20
    k: int = 10
    window: int = 10
    feature_dim: int = 16
    mention_tokens: int = 3
    tokens_per_concept: int = 4
    candidate_noise: float = 0.6
    hard_negative_pool: int = 12
    n_train: int = 4000
    n_dev: int = 500
    n_test: int = 1000
    task_index: int = 0  # position in the shift chain
    rotation_angle: float = math.pi / 4
    vocabulary_overlap: float = 0.5
    label_noise: float = 0.0
    world_seed: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.k < 2:
            raise ConfigurationError("k must be at least 2")
        if self.vocab_size < 1 or self.n_concepts < 1:
            raise ConfigurationError("vocabulary and concept count must be positive")
        if not 0.0 <= self.vocabulary_overlap <= 1.0:
            raise ConfigurationError("vocabulary_overlap must lie in [0, 1]")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigurationError("label_noise must lie in [0, 0.5)")
        if self.window < self.mention_tokens or self.mention_tokens < 1:
            raise ConfigurationError("window must hold the mention tokens")
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise ConfigurationError("feature_dim must be an even number >= 2")
        if self.k - 1 > self.n_concepts - 1:
            raise ConfigurationError("need at least k concepts for distinct negatives")
        if self.tokens_per_concept < 1 or self.tokens_per_concept * self.n_concepts > self.vocab_size:
            raise ConfigurationError("vocab_size too small for tokens_per_concept * n_concepts")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ConfigurationError("every split needs at least one instance")

    @property
    def vocab_offset(self) -> int:
        # consecutive tasks share `vocabulary_overlap` of their token range
        stride = int(round(self.vocab_size * (1.0 - self.vocabulary_overlap)))
        return 1 + self.task_index * stride  # id 0 is the pad token

    @property
    def total_vocab(self) -> int:
        return self.vocab_offset + self.vocab_size


@dataclass(frozen=True)
class RankingTask:
    task_id: str
    train_split: Split
    dev_split: Split
    test_split: Split
    spec: GeneratorSpec | None = None

    def __post_init__(self):
        ks = {s.k for s in (self.train_split, self.dev_split, self.test_split)}
        ws = {s.window for s in (self.train_split, self.dev_split, self.test_split)}
        if len(ks) != 1 or len(ws) != 1:
            raise ConfigurationError(f"task {self.task_id}: k and window must agree across splits")

    @property
    def k(self) -> int:
        return self.train_split.k

    @property
    def window(self) -> int:
        return self.train_split.window

    @property
    def feature_dim(self) -> int:
        return self.train_split.candidates.shape[2]

    @property
    def vocab_size(self) -> int:
        """One past the largest token id used in any split."""
        return 1 + max(int(s.tokens.max()) for s in (self.train_split, self.dev_split, self.test_split))

    def split(self, name: str, purpose: str = "read") -> Split:
        if name not in SPLITS:
            raise UsageError(f"unknown split {name!r}")
        log = _access_log.get()
        if log is not None:
            log.record(self.task_id, name, purpose)
        return getattr(self, f"{name}_split")

    @property
    def train(self) -> Split:
        return self.split("train")

    @property
    def dev(self) -> Split:
        return self.split("dev")

    @property
    def test(self) -> Split:
        return self.split("test")


# --- synthetic generation ----------------------------------------------------

def _rotation(dim: int, angle: float) -> np.ndarray:
    """Block-diagonal rotation turning every coordinate plane (2i, 2i+1) by ``angle``."""
    c, s = math.cos(angle), math.sin(angle)
    r = np.zeros((dim, dim))
    for i in range(0, dim, 2):
        r[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return r


def _world(spec: GeneratorSpec):
    """Concept embeddings and the global token->concept map, shared by all tasks of one world."""
    rng = np.random.default_rng([spec.world_seed, 7919])
    concepts = rng.standard_normal((spec.n_concepts, spec.feature_dim))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    return concepts


def generate_task(spec: GeneratorSpec, task_id: str | None = None) -> RankingTask:
    """Deterministically generate one synthetic ranking task.

    Context windows hold ``mention_tokens`` tokens that indicate a latent concept,
    padded with filler tokens from the task's vocabulary slice.  The positive
    candidate is the (task-rotated) concept embedding plus noise; negatives come
    from the concepts closest to it, so they are hard to tell apart.
    """
    spec.validate()
    concepts = _world(spec)
    feats = concepts @ _rotation(spec.feature_dim, spec.rotation_angle * spec.task_index).T

    # each concept owns `tokens_per_concept` ids inside this task's vocabulary slice; the
    # assignment depends only on the slice, so tasks over the same ids share a vocabulary
    vocab = np.arange(spec.vocab_offset, spec.total_vocab)
    rng_vocab = np.random.default_rng([spec.world_seed, spec.vocab_offset, spec.vocab_size, 104729])
    perm = rng_vocab.permutation(vocab)
    n_mention = spec.tokens_per_concept * spec.n_concepts
    concept_tokens = perm[:n_mention].reshape(spec.n_concepts, spec.tokens_per_concept)
    filler = perm[n_mention:] if len(perm) > n_mention else perm

    sims = concepts @ concepts.T
    np.fill_diagonal(sims, -np.inf)
    pool = min(max(spec.hard_negative_pool, spec.k - 1), spec.n_concepts - 1)
    neighbours = np.argsort(-sims, axis=1)[:, :pool]

    rng = np.random.default_rng([spec.seed, spec.task_index, 15485863])
    n = spec.n_train + spec.n_dev + spec.n_test
    concept = rng.integers(0, spec.n_concepts, size=n)
    tokens = rng.choice(filler, size=(n, spec.window))
    mention = concept_tokens[concept[:, None], rng.integers(0, spec.tokens_per_concept, size=(n, spec.mention_tokens))]
    start = rng.integers(0, spec.window - spec.mention_tokens + 1, size=n)
    cols = start[:, None] + np.arange(spec.mention_tokens)
    tokens[np.arange(n)[:, None], cols] = mention

    negatives = np.empty((n, spec.k - 1), dtype=np.int64)
    for i in range(n):
        negatives[i] = rng.choice(neighbours[concept[i]], size=spec.k - 1, replace=False)
    ids = np.concatenate([concept[:, None], negatives], axis=1)
    positive = rng.integers(0, spec.k, size=n)
    # move the true concept into slot `positive`
    rows = np.arange(n)
    ids[rows, 0], ids[rows, positive] = ids[rows, positive], concept
    cands = feats[ids] + spec.candidate_noise * rng.standard_normal((n, spec.k, spec.feature_dim)) / math.sqrt(spec.feature_dim)

    if spec.label_noise > 0:
        flip = rng.random(n) < spec.label_noise
        shift = rng.integers(1, spec.k, size=n)
        positive = np.where(flip, (positive + shift) % spec.k, positive)

    a, b = spec.n_train, spec.n_train + spec.n_dev
    full = Split(tokens.astype(np.int64), cands, positive.astype(np.int64))
    return RankingTask(
        task_id or f"task{spec.task_index}",
        full.take(slice(0, a)),
        full.take(slice(a, b)),
        full.take(slice(b, n)),
        spec,
    )


def benchmark_specs(
    n_tasks: int = 3,
    seed: int = 0,
    rotation_angle: float = math.pi / 4,
    vocabulary_overlap: float = 0.5,
    **overrides,
) -> list[GeneratorSpec]:
    """The shipped shift benchmark: a chain of tasks sharing one latent world."""
    return [
        GeneratorSpec(
            task_index=i,
            rotation_angle=rotation_angle,
            vocabulary_overlap=vocabulary_overlap,
            world_seed=seed,
            seed=seed,
            **overrides,
        )
        for i in range(n_tasks)
    ]


def generate_benchmark(n_tasks: int = 3, seed: int = 0, **kwargs) -> list[RankingTask]:
    names = "ABCDEFGHIJ"
    return [generate_task(s, task_id=names[i]) for i, s in enumerate(benchmark_specs(n_tasks, seed, **kwargs))]


# --- combining -----------------------------------------------------------------

def _fit_window(split: Split, window: int) -> Split:
    t = split.window
    if t == window:
        return split
    if t > window:
        return Split(split.tokens[:, :window], split.candidates, split.positive)
    pad = np.full((len(split), window - t), PAD_TOKEN, dtype=np.int64)
    return Split(np.concatenate([split.tokens, pad], axis=1), split.candidates, split.positive)


def concat_splits(splits: Iterable[Split]) -> Split:
    splits = list(splits)
    return Split(
        np.concatenate([s.tokens for s in splits]),
        np.concatenate([s.candidates for s in splits]),
        np.concatenate([s.positive for s in splits]),
    )


@dataclass(frozen=True)
class CombinedTask(RankingTask):
    """Shuffled union of several tasks; dev/test stay addressable per source."""

    sources: dict = field(default_factory=dict)  # task_id -> (dev Split, test Split)


def shuffle_combined(tasks: Sequence[RankingTask], seed: int) -> CombinedTask:
    if not tasks:
        raise UsageError("shuffle_combined needs at least one task")
    ks = {t.k for t in tasks}
    if len(ks) != 1:
        raise ConfigurationError("combined tasks must share the candidate count k")
    window = max(t.window for t in tasks)
    train = concat_splits(_fit_window(t.split("train", "combine"), window) for t in tasks)
    order = np.random.default_rng(seed).permutation(len(train))
    sources = {
        t.task_id: (_fit_window(t.split("dev", "combine"), window), _fit_window(t.split("test", "combine"), window))
        for t in tasks
    }
    return CombinedTask(
        "+".join(t.task_id for t in tasks),
        train.take(order),
        concat_splits(d for d, _ in sources.values()),
        concat_splits(s for _, s in sources.values()),
        None,
        sources,
    )


# --- task files ------------------------------------------------------------------

def write_task(task: RankingTask, path) -> None:
    lines = [f"KFTASK 1 k={task.k} window={task.window}"]
    for name in SPLITS:
        s = getattr(task, f"{name}_split")
        for i in range(len(s)):
            fields = [name, str(int(s.positive[i])), "ctx:" + ",".join(str(int(t)) for t in s.tokens[i])]
            fields += [f"cand{j}:" + ",".join(repr(float(v)) for v in s.candidates[i, j]) for j in range(s.k)]
            lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def load_task(path, task_id: str | None = None) -> RankingTask:
    """Parse a task file, validating every record; errors name the line."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: cannot read task file: {exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty task file")
    head = lines[0].split(" ")
    try:
        if len(head) != 4 or head[0] != "KFTASK" or head[1] != "1":
            raise ValueError
        k = int(head[2].removeprefix("k=")) if head[2].startswith("k=") else None
        window = int(head[3].removeprefix("window=")) if head[3].startswith("window=") else None
        if k is None or window is None or k < 2 or window < 1:
            raise ValueError
    except ValueError:
        raise ParseError(f"{path}:1: malformed header {lines[0]!r}") from None

    rows = {name: ([], [], []) for name in SPLITS}
    feature_dim = None
    for lineno, line in enumerate(lines[1:], start=2):
        where = f"{path}:{lineno} (record {lineno - 1})"
        parts = line.split("\t")
        if len(parts) != 3 + k:
            raise ParseError(f"{where}: expected {3 + k} tab-separated fields, got {len(parts)}")
        split, pos, ctx = parts[:3]
        if split not in rows:
            raise ParseError(f"{where}: unknown split {split!r}")
        try:
            positive = int(pos)
        except ValueError:
            raise ParseError(f"{where}: positiveIndex {pos!r} is not an integer") from None
        if not 0 <= positive < k:
            raise ParseError(f"{where}: positiveIndex {positive} outside [0, {k})")
        if not ctx.startswith("ctx:"):
            raise ParseError(f"{where}: missing ctx field")
        try:
            toks = [int(t) for t in ctx[4:].split(",")]
        except ValueError:
            raise ParseError(f"{where}: bad token id in context") from None
        if len(toks) != window or min(toks) < 0:
            raise ParseError(f"{where}: context must hold {window} non-negative token ids")
        cands = []
        for j, fld in enumerate(parts[3:]):
            tag = f"cand{j}:"
            if not fld.startswith(tag):
                raise ParseError(f"{where}: expected field {tag!r}")
            try:
                vec = [float(v) for v in fld[len(tag):].split(",")]
            except ValueError:
                raise ParseError(f"{where}: bad real in {tag[:-1]}") from None
            if not all(math.isfinite(v) for v in vec):
                raise ParseError(f"{where}: non-finite value in {tag[:-1]}")
            if feature_dim is None:
                feature_dim = len(vec)
            if len(vec) != feature_dim:
                raise ParseError(f"{where}: {tag[:-1]} has {len(vec)} values, expected {feature_dim}")
            cands.append(vec)
        rows[split][0].append(toks)
        rows[split][1].append(cands)
        rows[split][2].append(positive)

    splits = {}
    for name, (toks, cands, pos) in rows.items():
        if not toks:
            raise ParseError(f"{path}: split {name!r} has no records")
        splits[name] = Split(np.array(toks, dtype=np.int64), np.array(cands, dtype=np.float64), np.array(pos, dtype=np.int64))
    return RankingTask(task_id or path.stem, splits["train"], splits["dev"], splits["test"])


def with_task_id(task: RankingTask, task_id: str) -> RankingTask:
    return replace(task, task_id=task_id)
