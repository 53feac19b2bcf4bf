import pytest
from hypothesis import given
from hypothesis import strategies as st

from fhnloop.config import ConfigError, RunConfig, dependency_closure, parse_config, parse_config_text, serialize


def test_empty_config_gives_defaults():
    cfg = parse_config_text("")
    assert cfg == RunConfig()
    assert cfg.gamma_value() == pytest.approx(72 / 7)


def test_values_are_typed():
    cfg = parse_config_text("[periodic]\nt_targets = 100, 150, 250\n[evolve]\ncells = 8\n[model]\ngamma = 3.5\n")
    assert cfg.periodic.t_targets == (100.0, 150.0, 250.0)
    assert cfg.evolve.cells == 8 and isinstance(cfg.evolve.cells, int)
    assert cfg.gamma_value() == 3.5


def test_negative_tolerance_names_key():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[loop]\ntol = -1e-9\n")
    assert exc.value.errors == ["[loop] tol must be positive, got -1e-09"]


def test_all_errors_reported_together():
    text = "[loop]\ntol = -1\n[sweep]\nxi_count = 32\n[model]\na = 0.7\n[evolve]\nshape = square\n"
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    msgs = "\n".join(exc.value.errors)
    assert len(exc.value.errors) == 4
    for key in ("tol", "xi_count", "a must", "shape"):
        assert key in msgs


def test_unknown_key_and_section_with_lines():
    text = "[loop]\ntol = 1e-10\ntolerance = 3\n\n[extras]\nx = 1\n"
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text, "run.ini")
    assert "run.ini:3: unknown key 'tolerance' in [loop]" in exc.value.errors
    assert "run.ini:5: unknown section [extras]" in exc.value.errors


def test_syntax_error_line():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[loop]\ntol = 1e-10\nthis line has no separator\n", "bad.ini")
    assert exc.value.errors[0].startswith("bad.ini:3:")


def test_bad_number_reported():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("[evolve]\ncells = many\n")
    assert "cells" in exc.value.errors[0] and ":2:" in exc.value.errors[0]


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.ini")


def test_t_targets_span():
    with pytest.raises(ConfigError, match="factor of at least 2"):
        parse_config_text("[periodic]\nt_targets = 100, 110, 120\n")


@given(
    st.floats(0.01, 0.49),
    st.floats(1e-4, 0.1),
    st.lists(st.floats(50.0, 500.0), min_size=3, max_size=6).filter(lambda t: max(t) >= 2 * min(t)),
    st.integers(1, 200),
    st.sampled_from(["gaussian", "compact-bump"]),
    st.lists(st.sampled_from(["loop", "periodic", "melnikov", "reduce", "sweep", "evolve", "report"]),
             min_size=1, max_size=7, unique=True),
)
def test_serialize_round_trip(a, eps, targets, cells, shape, stages):
    cfg = RunConfig()
    cfg.model.a, cfg.model.epsilon = a, eps
    cfg.periodic.t_targets = tuple(targets)
    cfg.evolve.cells, cfg.evolve.shape = cells, shape
    cfg.pipeline.stages = tuple(stages)
    assert parse_config_text(serialize(cfg)) == cfg


def test_dependency_closure():
    assert dependency_closure(["reduce"]) == ["loop", "periodic", "melnikov", "reduce"]
    assert dependency_closure(["evolve", "loop"]) == ["loop", "evolve"]
    assert dependency_closure(["report"]) == ["report"]
