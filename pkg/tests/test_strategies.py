from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as hs

from conftest import perturbed, random_split, tiny_cnn, tiny_mixed, tiny_plan, tiny_tasks
from kfcl import curvature as cv
from kfcl import harness, nn, strategies as st
from kfcl.errors import ConfigurationError, SnapshotIncompatibleError


def two_snapshots(model, split):
    a = perturbed(model, 0.2, seed=3)
    b = perturbed(model, 0.2, seed=4)
    return [st.capture_snapshot("A", a, cv.estimate_kfac(a, split), method="EwcKfc"),
            st.capture_snapshot("B", b, cv.estimate_kfac(b, split), method="EwcKfc")]


def test_total_loss_is_sum_of_per_task_penalties():
    model = perturbed(tiny_cnn(), 0.3)
    snaps = two_snapshots(model, random_split(n=10))
    cfg = st.StrategyConfig("EwcKfc", (2.0, 5.0))
    want = 1.25 + cv.penalty(model, snaps[0], 2.0) + cv.penalty(model, snaps[1], 5.0)
    assert st.total_loss(1.25, model, snaps, cfg) == pytest.approx(want, rel=1e-12)
    value, grads = st.penalty_and_gradient(model, snaps, cfg)
    assert value == pytest.approx(want - 1.25, rel=1e-12)
    g0, g1 = cv.penalty_gradient(model, snaps[0], 2.0), cv.penalty_gradient(model, snaps[1], 5.0)
    for n in grads:
        np.testing.assert_allclose(grads[n], g0[n] + g1[n], rtol=1e-12)


def test_single_lambda_is_shared_and_count_mismatch_is_rejected():
    cfg = st.StrategyConfig("EwcDiag", (3.0,))
    assert cfg.lambda_for(0, 2) == cfg.lambda_for(1, 2) == 3.0
    with pytest.raises(ConfigurationError):
        st.StrategyConfig("EwcDiag", (1.0, 2.0)).lambda_for(0, 3)
    with pytest.raises(ConfigurationError):
        st.StrategyConfig("EwcDiag").lambda_for(0, 1)


def test_l2_anchors_to_last_task_only():
    model = perturbed(tiny_cnn(), 0.3)
    snaps = two_snapshots(model, random_split(n=6))
    cfg = st.StrategyConfig("L2", (1.0,))
    want = cv.l2_penalty(model, snaps[1], 1.0)
    assert st.total_loss(0.0, model, snaps, cfg) == pytest.approx(want)


def test_method_needs_matching_fisher():
    model = tiny_cnn()
    diag_snap = st.capture_snapshot("A", model, cv.estimate_diag_fim(model, random_split()))
    with pytest.raises(SnapshotIncompatibleError):
        st.total_loss(0.0, model, [diag_snap], st.StrategyConfig("EwcKfc", (1.0,)))


@pytest.mark.parametrize("kwargs", [
    dict(method="Bogus"),
    dict(method="None", lambdas=(1.0,)),
    dict(method="EwcDiag", lambdas=(-1.0,)),
    dict(method="LrControl"),
    dict(method="None", gamma=0.5),
    dict(method="Replay", replay_m=2),
    dict(method="Replay", replay_m=0, replay_n=1),
    dict(method="None", replay_m=2, replay_n=1),
])
def test_invalid_strategy_configs(kwargs):
    with pytest.raises(ConfigurationError):
        st.StrategyConfig(**kwargs)


def test_snapshot_is_frozen_and_tamper_evident():
    model = tiny_cnn()
    snap = st.capture_snapshot("A", model, cv.estimate_diag_fim(model, random_split()))
    snap.verify()
    with pytest.raises(ValueError):
        snap.mean["embed.E"][0, 0] = 1.0
    snap.fisher.diag["embed.E"][0, 0] += 1.0
    with pytest.raises(SnapshotIncompatibleError):
        snap.verify()


def test_snapshot_mean_is_a_copy():
    model = tiny_cnn()
    snap = st.capture_snapshot("A", model)
    model.params["embed.E"][0, 0] += 5.0
    assert snap.mean["embed.E"][0, 0] != model.params["embed.E"][0, 0]
    snap.verify()


def buffer_with(tasks=("A",), per_task=3):
    buf = st.ReplayBuffer(2, 1)
    for i, t in enumerate(tasks):
        buf.add_task(t, random_split(n=4 * per_task, seed=i), batch_size=4)
    return buf


def test_replay_pattern_two_task_one_replay():
    tags = [tag for _, tag in st.replay_interleave(range(6), buffer_with())]
    pattern = "".join("T" if t == "task" else "R" for t in tags)
    assert pattern == "TTRTTRTTR"


@given(hs.integers(1, 5), hs.integers(0, 3), hs.integers(0, 20))
def test_replay_count_is_floor_t_over_m_times_n(m, n, t):
    buf = st.ReplayBuffer(m, n)
    buf.add_task("A", random_split(n=8), batch_size=4)
    tags = [tag for _, tag in st.replay_interleave(range(t), buf)]
    assert tags.count("task") == t
    assert len(tags) - t == (t // m) * n


def test_replay_round_robins_over_tasks_and_cycles_batches():
    buf = buffer_with(("A", "B"), per_task=2)
    tags = [tag for _, tag in st.replay_interleave(range(10), buf) if tag != "task"]
    assert tags == ["replay:A", "replay:B"] * 2 + ["replay:A"]
    seen = [b for b, tag in st.replay_interleave(range(10), buffer_with(("A",), per_task=2)) if tag != "task"]
    np.testing.assert_array_equal(seen[0].tokens, seen[2].tokens)


def test_replay_with_empty_buffer_is_an_error():
    with pytest.raises(ConfigurationError):
        list(st.replay_interleave(range(3), st.ReplayBuffer(2, 1)))
    assert [t for _, t in st.replay_interleave(range(3), st.ReplayBuffer(2, 0))] == ["task"] * 3


def test_zero_lambda_training_matches_method_none_bitwise():
    tasks = tiny_tasks(2)
    plan = tiny_plan(method="EwcKfc", lambdas=(0.0,), epochs=2)
    ewc = harness.run_sequence(plan, tasks)
    none = harness.run_sequence(replace(plan, method="None", lambdas=()), tasks)
    for n, v in none[-1].model.params.items():
        np.testing.assert_array_equal(ewc[-1].model.params[n], v)


@pytest.mark.parametrize("fisher_kind", ["L2", "Diag", "KFC", "Full"])
def test_proximal_step_matches_explicit_step_for_small_rate(fisher_kind):
    model = perturbed(tiny_mixed(), 0.3)
    split = random_split(n=10)
    mean = perturbed(model, 0.3, seed=7)
    fisher = {"L2": None, "Diag": cv.estimate_diag_fim(mean, split), "KFC": cv.estimate_kfac(mean, split),
              "Full": cv.estimate_full_fim(mean, split)}[fisher_kind]
    snap = st.capture_snapshot("A", mean, fisher)
    method = {"L2": "L2", "Diag": "EwcDiag", "KFC": "EwcKfc", "Full": "EwcKfc"}[fisher_kind]
    cfg = st.StrategyConfig(method, (3.0,))
    eta = 1e-5
    implicit = st.ProximalPenalty([snap], cfg).apply(model, eta)
    _, grads = st.penalty_and_gradient(model, [snap], cfg)
    explicit = nn.sgd_step(model, grads, eta)
    step = nn.flatten(model) - nn.flatten(explicit)
    gap = nn.flatten(implicit) - nn.flatten(explicit)
    assert np.max(np.abs(step)) > 0
    assert np.max(np.abs(gap)) < 1e-3 * np.max(np.abs(step))


def test_proximal_kfc_step_equals_dense_solve():
    model = perturbed(tiny_cnn(), 0.3)
    mean = perturbed(model, 0.3, seed=2)
    kfc = cv.estimate_kfac(mean, random_split(n=12))
    snap = st.capture_snapshot("A", mean, kfc)
    lam, eta = 50.0, 0.2
    got = nn.flatten(st.ProximalPenalty([snap], st.StrategyConfig("EwcKfc", (lam,))).apply(model, eta))
    dense = cv.materialize_kfc_fim(model, kfc)
    names = cv.penalized_names(model)
    keep = np.concatenate([np.full(model.params[n].size, n in names) for n in model.params])
    d = nn.flatten(model) - nn.flatten(mean)
    sub = dense[np.ix_(keep, keep)]
    want = d.copy()
    want[keep] = np.linalg.solve(np.eye(keep.sum()) + 2 * eta * lam * sub, d[keep])
    np.testing.assert_allclose(got - nn.flatten(mean), want, rtol=1e-9, atol=1e-12)


def test_proximal_step_is_stable_for_huge_lambda():
    model = perturbed(tiny_cnn(), 0.3)
    mean = perturbed(model, 0.3, seed=2)
    snap = st.capture_snapshot("A", mean, cv.estimate_diag_fim(mean, random_split(n=12)))
    out = st.ProximalPenalty([snap], st.StrategyConfig("EwcDiag", (1e12,))).apply(model, 0.3)
    before = np.abs(nn.flatten(model) - nn.flatten(mean))
    after = np.abs(nn.flatten(out) - nn.flatten(mean))
    assert np.all(np.isfinite(after)) and np.all(after <= before + 1e-15)


def test_proximal_penalty_is_falsy_without_terms():
    model = tiny_cnn()
    snap = st.capture_snapshot("A", model, cv.estimate_diag_fim(model, random_split()))
    assert not st.ProximalPenalty([snap], st.StrategyConfig("EwcDiag", (0.0,)))
    assert not st.ProximalPenalty([snap], st.StrategyConfig("None"))
    assert st.ProximalPenalty([snap], st.StrategyConfig("EwcDiag", (1.0,)))
