import math

import numpy as np
import pytest
from hypothesis import given, strategies as hs

from conftest import fd_gradient, max_rel_error, perturbed, random_split, tiny_cnn, tiny_mixed, tiny_transformer
from kfcl import nn, strategies as st
from kfcl.data import Split
from kfcl.errors import ConfigurationError, DivergenceError, UsageError


@pytest.mark.parametrize("build", [tiny_cnn, tiny_transformer, tiny_mixed], ids=["cnn", "transformer", "mixed"])
def test_loss_gradient_matches_finite_differences(build):
    model = perturbed(build(), 0.3)
    split = random_split(n=6)
    _, grads = nn.loss_and_backward(model, split)
    numeric = fd_gradient(lambda m: nn.loss_only(m, split), model)
    assert max_rel_error(grads, numeric) < 1e-4


def test_mixed_model_covers_every_layer_kind():
    kinds = {layer.kind for layer in tiny_mixed().layers}
    assert kinds == set(nn.KINDS)
    acts = {layer.activation for layer in tiny_mixed().layers if layer.kind == "Activation"}
    assert {"ReLU", "Tanh"} <= acts


def test_shared_group_gradient_is_sum_over_uses():
    model = perturbed(tiny_mixed(), 0.3)
    assert model.usage_count("mix") == 2
    assert "mix.W" in model.params and "mix1.W" not in model.params
    split = random_split(n=5, seed=3)
    _, grads = nn.loss_and_backward(model, split)
    # untie the group into two independent layers with equal values and sum their gradients
    L = nn.LayerSpec
    enc = [l if l.shared_group is None else L(l.name, l.kind, l.p, l.q) for l in model.encoder]
    untied = nn.build_model(enc, model.head, model.k, model.feature_dim, model.window)
    params = {n: v for n, v in model.params.items() if not n.startswith("mix.")}
    for part in ("mix1", "mix2"):
        params[f"{part}.W"] = model.params["mix.W"]
        params[f"{part}.b"] = model.params["mix.b"]
    untied = nn.with_params(untied, params)
    _, ug = nn.loss_and_backward(untied, split)
    np.testing.assert_allclose(grads["mix.W"], ug["mix1.W"] + ug["mix2.W"], rtol=1e-12, atol=1e-14)
    assert nn.loss_only(untied, split) == pytest.approx(nn.loss_only(model, split), rel=1e-12)


def test_zero_model_loss_is_log_k():
    model = tiny_cnn()
    zero = nn.with_params(model, {n: np.zeros_like(v) for n, v in model.params.items()})
    assert nn.loss_only(zero, random_split()) == pytest.approx(math.log(model.k), abs=1e-12)


def test_duplicated_batch_has_same_mean_loss_and_gradient():
    model = perturbed(tiny_cnn(), 0.2)
    s = random_split(n=4, seed=5)
    doubled = Split(np.concatenate([s.tokens] * 2), np.concatenate([s.candidates] * 2), np.concatenate([s.positive] * 2))
    l1, g1 = nn.loss_and_backward(model, s)
    l2, g2 = nn.loss_and_backward(model, doubled)
    assert l1 == pytest.approx(l2, rel=1e-12)
    for n in g1:
        np.testing.assert_allclose(g1[n], g2[n], rtol=1e-10, atol=1e-14)


def test_single_instance_forward_matches_batch():
    model = perturbed(tiny_transformer(), 0.2)
    s = random_split(n=3)
    np.testing.assert_allclose(nn.forward(model, s[1]), nn.forward(model, s)[1], rtol=1e-12)


@given(hs.floats(0.001, 1.0), hs.floats(0.1, 1.0), hs.integers(0, 5))
def test_layer_rate_is_geometric(base, gamma, depth):
    sched = st.LrSchedule(base, gamma)
    assert sched.rate(depth) == pytest.approx(base * gamma ** depth, rel=1e-12)


def test_layer_rate_examples():
    assert st.lr_for_layer(st.LrSchedule(0.01, 0.1), 2) == pytest.approx(1e-4)
    assert st.lr_for_layer(st.LrSchedule(1e-3, 0.5), 1) == pytest.approx(5e-4)
    with pytest.raises(ConfigurationError):
        st.LrSchedule(0.0, 0.5)


def test_sgd_step_uses_per_layer_rates():
    model = tiny_cnn()
    ones = {n: np.ones_like(v) for n, v in model.params.items()}
    sched = st.LrSchedule(0.1, 0.5)
    new = nn.sgd_step(model, ones, sched)
    for name, v in model.params.items():
        depth = model.depth_from_output(name.rsplit(".", 1)[0])
        np.testing.assert_allclose(v - new.params[name], 0.1 * 0.5 ** depth)
    assert model.depth_from_output(list(model.groups())[-1]) == 0


def test_sgd_step_rejects_bad_gradients():
    model = tiny_cnn()
    g = nn.zeros_like(model)
    g.pop(next(iter(g)))
    with pytest.raises(UsageError):
        nn.sgd_step(model, g)
    bad = nn.zeros_like(model)
    bad[next(iter(bad))][...] = np.nan
    with pytest.raises(DivergenceError):
        nn.sgd_step(model, bad)


def test_flatten_round_trip():
    model = perturbed(tiny_mixed())
    vec = nn.flatten(model)
    assert vec.size == model.n_params
    back = nn.unflatten(model, vec)
    for n in model.params:
        np.testing.assert_array_equal(back[n], model.params[n])
    with pytest.raises(UsageError):
        nn.unflatten(model, vec[:-1])


def test_batch_validation():
    model = tiny_cnn()
    with pytest.raises(UsageError):
        nn.run_forward(model, random_split(k=3))
    with pytest.raises(ConfigurationError):
        nn.run_forward(model, random_split(feature_dim=3))
    with pytest.raises(ConfigurationError):
        nn.run_forward(model, random_split(window=4))
    with pytest.raises(ConfigurationError):
        nn.run_forward(model, random_split(vocab=13, n=40))
    with pytest.raises(UsageError):
        nn.loss_and_backward(model, random_split().take(slice(0, 0)))


def test_architecture_validation():
    L = nn.LayerSpec
    with pytest.raises(ConfigurationError):
        L("x", "Dense", 2, 2)
    with pytest.raises(ConfigurationError):
        L("x", "LayerNorm", 2, 3)
    with pytest.raises(ConfigurationError):
        L("x", "Activation", activation="GELU")
    with pytest.raises(ConfigurationError):
        nn.validate_architecture([L("l", "Linear", 2, 2)], [L("s", "Linear", 2, 1)], 2, 5)


def test_builders_are_deterministic():
    a, b = tiny_cnn(seed=4), tiny_cnn(seed=4)
    for n in a.params:
        np.testing.assert_array_equal(a.params[n], b.params[n])
    assert not np.array_equal(nn.flatten(a), nn.flatten(tiny_cnn(seed=5)))
    assert nn.build_ranker("transformer", 12, 4, 5, 2, hidden=4).arch == "transformer"
