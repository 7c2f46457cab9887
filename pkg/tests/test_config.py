import pytest

from kfcl import config
from kfcl.config import RunConfig, load_config, parse_config_text
from kfcl.errors import ConfigurationError
from kfcl.harness import DEFAULT_GRID

EXAMPLE = """
[tasks]
generate = 3
seed = 7

[plan]
permutation = all
method = EwcKfc
grid = default
seeds = 0, 1, 2
epochs = 4  # inline comment

[output]
dir = runs/kfc
formats = csv
"""


def test_parse_example():
    values = parse_config_text(EXAMPLE)
    cfg = RunConfig(**values)
    assert cfg.n_tasks == 3 and cfg.data_seed == 7
    assert cfg.permutation == ("all",) and len(cfg.permutations()) == 6
    assert cfg.grid == DEFAULT_GRID and cfg.seeds == (0, 1, 2) and cfg.epochs == 4
    assert cfg.formats == ("csv",) and str(cfg.output_dir()) == "runs/kfc"


@pytest.mark.parametrize("text", [
    "[model]\nwidth = 3\n",
    "[plan]\nlamda = 1\n",
    "[plan]\nepochs = many\n",
    "[plan]\nMethod = None\n",
    "no section header\n",
])
def test_unknown_or_malformed_settings_are_errors(text):
    with pytest.raises(ConfigurationError):
        parse_config_text(text)


@pytest.mark.parametrize("kwargs", [
    dict(generate=1), dict(generate=11), dict(generate=2, task_files=("a", "b")), dict(seeds=()),
    dict(method="EwcKfc", lambdas=(1.0,), grid=(1.0,)), dict(formats=("pdf",)), dict(method="Replay"),
    dict(method="Bogus"), dict(epochs=0),
])
def test_invalid_run_configs(kwargs):
    with pytest.raises(ConfigurationError):
        RunConfig(**kwargs)


def test_plan_defaults_to_full_grid_for_penalty_methods():
    plan = RunConfig(method="EwcDiag").plan(("A", "B"), 0)
    assert plan.grid == DEFAULT_GRID and plan.searches
    fixed = RunConfig(method="EwcDiag", lambdas=(1e3,)).plan(("A", "B"), 0)
    assert not fixed.searches and fixed.lambdas == (1e3,)
    assert RunConfig().plan(("A", "B"), 0).grid == ()


def test_permutation_choices():
    cfg = RunConfig(generate=3, permutation=("C", "A", "B"))
    assert cfg.permutations() == [("C", "A", "B")]
    assert RunConfig(generate=3).permutations() == [("A", "B", "C")]
    with pytest.raises(ConfigurationError):
        RunConfig(generate=3, permutation=("A", "A", "B")).permutations()
    with pytest.raises(ConfigurationError):
        RunConfig(generate=3, permutation=("A", "Z")).permutations()


def test_digest_ignores_output_location():
    a = RunConfig(out_dir="x", formats=("csv",))
    b = RunConfig(out_dir="y")
    assert a.digest() == b.digest()
    assert a.digest() != RunConfig(epochs=3).digest()


def test_load_config_file_and_overrides(tmp_path, monkeypatch):
    path = tmp_path / "run.ini"
    path.write_text(EXAMPLE, encoding="utf-8")
    cfg = load_config(path, epochs=2, method=None)
    assert cfg.epochs == 2 and cfg.method == "EwcKfc"
    monkeypatch.setenv(config.OUT_ENV, str(tmp_path / "elsewhere"))
    assert cfg.output_dir() == tmp_path / "elsewhere"
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigurationError):
        load_config(None, colour="blue")
