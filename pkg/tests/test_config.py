from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qflux.config import RunConfig, dump_config, load_config, parse_config, parse_value
from qflux.errors import ConfigError

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.cfg"))


def test_minimal_config_fills_defaults():
    cfg = parse_config("[state]\nsigma = 1.5\n")
    ref = RunConfig()
    assert cfg.state.sigma == 1.5
    assert cfg.evolution == ref.evolution and cfg.ensemble == ref.ensemble
    assert cfg.ensemble.bins == 64 and cfg.surface.bands == 8
    assert parse_config("") == ref


def test_values():
    assert parse_value("(1, 2.5, -3e2)") == (1, 2.5, -300.0)
    assert parse_value('"a # b"') == "a # b"
    assert parse_value("7") == 7 and isinstance(parse_value("7"), int)
    assert parse_value("()") == ()
    cfg = parse_config('[state]\nx0 = (1, 2, 3)  # trailing comment\nkind = "gaussian"\n[ensemble]\nseed = 5\n')
    assert cfg.state.x0 == (1.0, 2.0, 3.0) and cfg.ensemble.seed == 5


@pytest.mark.parametrize(
    "text,line,needle",
    [
        ("[state]\nsigma = -1\n", 2, "sigma > 0"),
        ("[state]\nsigma = 1\nbogus = 2\n", 3, "unknown key"),
        ("[nosuch]\n", 1, "unknown section"),
        ("[state]\nsigma 1\n", 2, "syntax error"),
        ("sigma = 1\n", 1, "outside of a section"),
        ("[state]\nsigma = 1\nsigma = 2\n", 3, "duplicate"),
        ("[ensemble]\nN = 1.5\n", 2, "integer"),
        ("[state]\nkind = gaussian\n", 2, "cannot parse"),
        ("[state]\nx0 = (1, 2\n", 2, "unterminated"),
        ('[evolution]\nmethod = "split-step"\n', None, "dt > 0"),
        ('[evolution]\nmethod = "spectral-free"\ndt = 0.1\nn = 48\n', 4, "power of two"),
        ('[evolution]\npotential = "square"\n', 2, "split-step"),
        ("[state]\nx0 = (0,)\np0 = (0,)\n", None, "3D state"),
        ('[state]\nx0 = (0,)\np0 = (0,)\n[region]\nkind = "interval"\na = 1\nb = 0\n', 7, "a < b"),
        ("[evolution]\nT = 5\n[ensemble]\nhorizon = 10\n", 4, "horizon <= evolution T"),
        ('[evolution]\nmethod = "spectral-free"\ndt = 0.1\ndt_frame = 0.25\n', 4, "integer multiple"),
        ("[solid_angle]\nhalf_angle_deg = 200\n", 2, "half_angle_deg"),
    ],
)
def test_errors_carry_line_and_constraint(text, line, needle):
    with pytest.raises(ConfigError) as ei:
        parse_config(text)
    assert needle in str(ei.value)
    assert ei.value.line == line


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.name)
def test_shipped_configs_round_trip(path):
    cfg = load_config(path)
    assert parse_config(dump_config(cfg)) == cfg


@given(
    sigma=st.floats(0.01, 100.0),
    x=st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)),
    N=st.integers(1, 10**6),
    seed=st.integers(0, 2**32),
)
@settings(max_examples=50, deadline=None)
def test_dump_round_trip(sigma, x, N, seed):
    text = f"[state]\nsigma = {sigma!r}\nx0 = ({x[0]!r}, {x[1]!r}, {x[2]!r})\n[ensemble]\nN = {N}\nseed = {seed}\n"
    cfg = parse_config(text)
    assert parse_config(dump_config(cfg)) == cfg
