import numpy as np
import pytest
from hypothesis import given, strategies as hs

from conftest import perturbed, random_split, tiny_cnn, tiny_plan, tiny_tasks
from kfcl import harness, nn, report
from kfcl.errors import ParseError, UndefinedBaselineError, UsageError


def test_accuracy_counts_strict_maximum():
    model = tiny_cnn()
    zero = nn.with_params(model, {n: np.zeros_like(v) for n, v in model.params.items()})
    assert report.accuracy(zero, random_split()) == 0.0  # all scores tie, so nothing is a strict maximum
    acc = report.accuracy(perturbed(model, 0.5), random_split(n=40))
    assert 0.0 <= acc <= 1.0
    with pytest.raises(UsageError):
        report.accuracy(model, random_split().take(slice(0, 0)))


def test_percentage_change_values_from_published_tables():
    assert report.fmt2(report.percentage_change(76.75, 41.35)) == "-46.12"
    assert report.fmt2(report.percentage_change(84.82, 63.77)) == "-24.82"


@given(hs.floats(0.01, 100), hs.floats(0, 100))
def test_percentage_change_is_scale_free(before, after):
    assert report.percentage_change(before, after) == pytest.approx(report.percentage_change(before / 100, after / 100))


def test_percentage_change_needs_a_baseline():
    with pytest.raises(UndefinedBaselineError):
        report.percentage_change(0.0, 0.5)


def test_heatmap_export(tmp_path):
    path = report.export_heatmap(np.eye(2), tmp_path / "h.csv", source="unit")
    assert path.read_text() == "1,0\n0,1\n"
    assert (tmp_path / "h.csv.manifest").read_text() == "rows=2\ncols=2\nsource=unit\n"
    m = np.array([[0.1, -2.5e-7], [3.0, 1e20]])
    report.export_heatmap(m, tmp_path / "m.csv")
    np.testing.assert_array_equal(report.read_heatmap(tmp_path / "m.csv"), m)
    with pytest.raises(UsageError):
        report.export_heatmap(np.array([[np.nan]]), tmp_path / "bad.csv")


def sample_rows():
    tiers = harness.run_sequence(tiny_plan(("A", "B", "C"), epochs=1), tiny_tasks(3))
    return report.rows_from_tiers(("A", "B", "C"), "None", 0, tiers)


def test_result_rows_shape():
    rows = sample_rows()
    assert len(rows) == 1 + 2 + 3
    assert [r.perc_change is None for r in rows] == [True, False, True, False, False, True]


def test_results_csv_round_trip(tmp_path):
    rows = sample_rows()
    report.write_results_csv(rows, tmp_path / "r.csv")
    assert report.read_results_csv(tmp_path / "r.csv") == rows


@pytest.mark.parametrize("edit", [
    lambda lines: [lines[0].replace("accuracy", "acc")] + lines[1:],
    lambda lines: lines[:1] + [lines[1] + ",extra"] + lines[2:],
    lambda lines: lines[:2] + [lines[2].replace(lines[2].split(",")[8], "-1.0")] + lines[3:],
    lambda lines: lines[:1] + [lines[1].replace(lines[1].split(",")[6], "1.5")] + lines[2:],
    lambda lines: lines[:1] + [lines[1].replace(",,", ",0.5,", 1)] + lines[2:],
])
def test_invalid_results_csv(tmp_path, edit):
    report.write_results_csv(sample_rows(), tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    (tmp_path / "r.csv").write_text("\n".join(edit(lines)) + "\n")
    with pytest.raises(ParseError):
        report.read_results_csv(tmp_path / "r.csv")


def test_table_averages_over_seeds():
    rows = [report.ResultRow("A->B", "None", s, 2, "A", 1, acc, 0.8, report.percentage_change(0.8, acc))
            for s, acc in ((0, 0.4), (1, 0.6))]
    head, body = report.table_grid(rows)
    assert head == ["Perm.", "Method", "Tier", "A Acc.", "A Perc. D"]
    assert body == [["A->B", "None", "2", "50.00", "-37.50"]]
    assert report.summary_csv(rows).splitlines()[1] == "A->B,None,2,50.00,-37.50"
    assert "50.00" in report.format_table(rows)


def toy_by_method(**kw):
    return {r.method: r for r in report.toy_2param_demo(**kw)}


def test_toy_full_covariance_stays_closer_to_task_a():
    rows = toy_by_method(correlation=0.9, lam=1.0)
    assert rows["EwcFull"].dist_task_a < rows["EwcDiag"].dist_task_a < rows["None"].dist_task_a


def test_toy_without_correlation_methods_coincide():
    rows = toy_by_method(correlation=0.0, lam=1.0)
    np.testing.assert_allclose(rows["EwcFull"].theta, rows["EwcDiag"].theta, atol=1e-9, rtol=0)


def test_toy_without_penalty_matches_method_none():
    rows = toy_by_method(correlation=0.9, lam=0.0)
    assert rows["EwcFull"].theta == rows["None"].theta == rows["EwcDiag"].theta


@given(hs.floats(-0.95, 0.95), hs.floats(0.01, 10))
def test_toy_gradient_descent_reaches_closed_form(corr, lam):
    (h_a, a), (h_b, b) = report.toy_tasks(corr)
    anchor = np.array([0.3, -0.2])
    got = report.sequential_quadratic(h_b, b, anchor, h_a, lam, lr=0.5 / (1 + 2 * lam * 2), steps=6000)
    np.testing.assert_allclose(got, report.closed_form_quadratic(h_b, b, anchor, h_a, lam), atol=1e-7)


def test_toy_table_lists_every_method():
    text = report.toy_table(report.toy_2param_demo())
    assert [line.split()[0] for line in text.splitlines()[1:]] == ["None", "EwcDiag", "EwcFull"]
