import pytest

from conftest import CONFIGS
from factorhjb.config import ConfigError, load_config, parse_override

BASE = """
[pde]
n = 1
Sigma = "1"
A = "1"
b = "0"
h = "0"
theta = "1"
k = -1
T = 1.0
region = [[-5.0, 5.0]]
"""


def test_parse_override_literals():
    assert parse_override("mc.paths=100") == ("mc", "paths", 100)
    assert parse_override("pde.h = 0.5*x1") == ("pde", "h", "0.5*x1")
    assert parse_override('pde.h="0.1"') == ("pde", "h", "0.1")
    assert parse_override("lipschitz.radii=[1, 2]") == ("lipschitz", "radii", [1, 2])
    for bad in ("mc.paths", "paths=3", "a.b.c=1"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_defaults_and_overrides():
    cfg = load_config(text=BASE, overrides=["mc.paths=500", "grid.nodes=41"])
    assert cfg.section("mc")["paths"] == 500 and cfg.section("mc")["steps"] == 1000
    assert cfg.section("grid")["nodes"] == 41
    assert cfg.kind == "pde"
    p = cfg.pde()
    assert p.beta_at is not None
    assert cfg.region(p) == [(-5.0, 5.0)]


def test_hash_tracks_content():
    a = load_config(text=BASE)
    b = load_config(text=BASE)
    c = load_config(text=BASE, overrides=["mc.seed=1"])
    assert a.hash == b.hash != c.hash
    assert len(a.hash) == 16


@pytest.mark.parametrize(
    "override, match",
    [
        ("mc.paths=0", "paths"),
        ("mc.paths=1", "at least 2"),
        ("mc.steps=3", "even"),
        ("mc.seed=-1", "seed"),
        ("mc.field_error='maybe'", "field_error"),
        ("bogus.key=1", "unknown"),
    ],
)
def test_invalid_values(override, match):
    with pytest.raises(ConfigError, match=match):
        load_config(text=BASE, overrides=[override])


def test_expression_error_names_line_and_key():
    text = BASE.replace('h = "0"', 'h = "0.1 * foo(x1)"')
    cfg = load_config("model.toml", text=text)
    with pytest.raises(ConfigError) as exc:
        cfg.pde()
    msg = str(exc.value)
    assert "model.toml:7" in msg and "[pde] h" in msg


def test_structure_errors():
    with pytest.raises(ConfigError, match="exactly one"):
        load_config(text="[grid]\nnodes = 3\n")
    with pytest.raises(ConfigError, match="unknown keys"):
        load_config(text=BASE + "wat = 1\n").pde()
    with pytest.raises(ConfigError, match="missing"):
        load_config(text=BASE.replace("k = -1\n", "")).pde()
    with pytest.raises(ConfigError):
        load_config(text="[pde\n")
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/x.toml")


def test_bundled_configs_load():
    names = sorted(p.stem for p in CONFIGS.glob("*.toml"))
    assert {"oracle", "linear", "m1_market_kneg", "m2_kgt1", "m3_market_reduced", "m4_robust", "m5_theta_2d"} <= set(names)
    for path in CONFIGS.glob("*.toml"):
        cfg = load_config(path)
        p = cfg.pde()
        assert cfg.region(p)


def test_robust_points_become_a_set():
    cfg = load_config(CONFIGS / "m4_robust.toml")
    p = cfg.pde()
    assert p.robust is not None and len(p.robust.array()) == 3
