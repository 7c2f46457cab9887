import os
import time

import numpy as np
import pytest
from hypothesis import settings

from kfcl import benchmark, nn
from kfcl import data as data_mod
from kfcl.data import Split

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []
STUDY_SEEDS = (0, 1, 2, 3, 4)


def random_split(n=8, k=4, window=5, vocab=12, feature_dim=2, seed=0) -> Split:
    rng = np.random.default_rng(seed)
    return Split(
        rng.integers(0, vocab, size=(n, window)),
        rng.standard_normal((n, k, feature_dim)),
        rng.integers(0, k, size=n),
    )


def tiny_cnn(vocab=12, k=4, window=5, feature_dim=2, hidden=3, emb=3, seed=0):
    return nn.cnn_ranker(vocab, k, window, feature_dim, hidden=hidden, emb_dim=emb, seed=seed)


def tiny_transformer(vocab=12, k=4, window=5, feature_dim=2, hidden=4, seed=0):
    return nn.transformer_ranker(vocab, k, window, feature_dim, hidden=hidden, seed=seed)


def tiny_mixed(vocab=12, k=4, window=5, feature_dim=2, seed=0):
    """Every layer kind: conv without bias, LayerNorm, Tanh, and a weight group used twice."""
    L = nn.LayerSpec
    encoder = [
        L("embed", "Embedding", vocab, 3),
        L("conv", "Conv1d", 3, 3, kernel_width=2, has_bias=False),
        L("conv_act", "Activation", activation="Tanh"),
        L("norm", "LayerNorm", 3, 3),
        L("mix1", "Linear", 3, 3, shared_group="mix"),
        L("mix_act", "Activation", activation="ReLU"),
        L("mix2", "Linear", 3, 3, shared_group="mix"),
    ]
    head = [
        L("fc1", "Linear", 3 + feature_dim, 3),
        L("fc1_act", "Activation", activation="Tanh"),
        L("score", "Linear", 3, 1),
    ]
    return nn.build_model(encoder, head, k, feature_dim, window, seed)


def perturbed(model, scale=0.1, seed=1):
    rng = np.random.default_rng(seed)
    return nn.with_params(model, {n: v + scale * rng.standard_normal(v.shape) for n, v in model.params.items()})


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


@pytest.fixture(scope="session")
def study():
    """The two-task benchmark through the full protocol: None, EwcDiag, EwcKfc, Replay over five seeds."""
    start = time.perf_counter()
    result = benchmark.run_study(STUDY_SEEDS)
    result.elapsed = time.perf_counter() - start
    return result


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def fd_gradient(fn, model, h=1e-6):
    """Central finite differences of ``fn(model)`` with respect to every parameter."""
    out = {}
    for name, value in model.params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            for sign in (1, -1):
                p = dict(model.params)
                p[name] = value.copy()
                p[name][idx] += sign * h
                g[idx] += sign * fn(nn.with_params(model, p))
        out[name] = g / (2 * h)
    return out


def max_rel_error(analytic: dict, numeric: dict) -> float:
    """Largest absolute discrepancy, relative to the largest numeric gradient entry."""
    a = np.concatenate([analytic[n].ravel() for n in numeric])
    b = np.concatenate([numeric[n].ravel() for n in numeric])
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


TINY_TASK = dict(vocab_size=60, n_concepts=8, k=4, window=6, feature_dim=4, tokens_per_concept=2,
                 hard_negative_pool=5, n_train=160, n_dev=40, n_test=40)


def tiny_tasks(n=3, seed=0, **kw):
    return data_mod.generate_benchmark(n, seed=seed, **{**TINY_TASK, **kw})


def tiny_plan(task_ids=("A", "B"), **kw):
    from kfcl.harness import ExperimentPlan
    base = dict(epochs=3, hidden=6, batch_size=16)
    return ExperimentPlan(tuple(task_ids), **{**base, **kw})
