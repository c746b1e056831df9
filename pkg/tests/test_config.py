import json
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from dproto.config import (
    THREADS_ENV,
    EvalConfig,
    MDMConfig,
    RunConfig,
    TrainConfig,
    derive_seed,
    make_rng,
    resolve_threads,
)
from dproto.errors import ConfigError

from tests.conftest import tiny_config


def test_defaults_are_valid():
    config = RunConfig()
    config.validate()
    assert config.trainer.lambda2 <= 0 <= config.trainer.lambda1
    assert config.mdm.grid_sizes()[0] == (6, 6)
    assert len(config.mdm.grid_sizes()) == config.mdm.num_scales


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="inconnue"):
        RunConfig.from_dict({"seeed": 3})
    with pytest.raises(ConfigError, match="trainer"):
        RunConfig.from_dict({"trainer": {"lambda_1": 0.5}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mdm": [1, 2]})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"seed": "abc"})


def test_missing_sections_take_defaults():
    config = RunConfig.from_dict({"seed": 7, "eval": {"top_percent": 10}})
    assert config.seed == 7
    assert config.eval.top_percent == 10
    assert config.trainer == TrainConfig()


@pytest.mark.parametrize("sections", [
    {"trainer": TrainConfig(lambda2=0.1)},
    {"trainer": TrainConfig(lambda1=-0.1)},
    {"mdm": MDMConfig(grid_base=50, num_scales=10)},
    {"eval": EvalConfig(step_percent=3.0)},
    {"eval": EvalConfig(top_percent=0.0)},
    {"mdm": MDMConfig(tau=1.5)},
    {"mdm": MDMConfig(window=0)},
    {"mdm": MDMConfig(min_improvement=-1e-3)},
])
def test_invariant_violations(sections):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(**sections)


def test_save_and_load_round_trip(tmp_path):
    config = tiny_config()
    path = tmp_path / "config.json"
    config.save(path)
    loaded = RunConfig.load(path)
    assert loaded.to_dict() == config.to_dict()
    assert loaded.backbone.input_size == (16, 16, 3)
    assert json.loads(path.read_text(encoding="utf-8"))["seed"] == 0


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="introuvable"):
        RunConfig.load(tmp_path / "absent.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{ pas du json", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.load(broken)


def test_with_overrides_returns_a_copy():
    config = tiny_config()
    changed = config.with_overrides(mdm=replace(config.mdm, eta=2.5))
    assert changed.mdm.eta == 2.5
    assert config.mdm.eta != 2.5


def test_large_scale_preset():
    config = RunConfig.large_scale_preset()
    config.validate()
    assert config.backbone.input_size == (224, 224, 3)
    assert config.backbone.shaping_channels == 512
    assert config.protolayer.num_masks == 720
    assert config.mdm.eta == 10.0


def test_derived_seeds_are_stable_and_distinct():
    assert derive_seed(42, "push", 3) == derive_seed(42, "push", 3)
    assert derive_seed(42, "push", 3) != derive_seed(42, "push", 4)
    assert derive_seed(42, "push") != derive_seed(43, "push")
    assert make_rng(1, "x").integers(1 << 30) == make_rng(1, "x").integers(1 << 30)


@given(root=st.integers(0, 2**32 - 1), key=st.one_of(st.integers(-10**6, 10**6), st.text(max_size=8)))
def test_derived_seed_range(root, key):
    assert 0 <= derive_seed(root, key) < 2**32


def test_thread_resolution(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert resolve_threads() == 1
    assert resolve_threads(3) == 3
    monkeypatch.setenv(THREADS_ENV, "4")
    assert resolve_threads() == 4
    assert resolve_threads(2) == 2
    monkeypatch.setenv(THREADS_ENV, "beaucoup")
    with pytest.raises(ConfigError):
        resolve_threads()
    with pytest.raises(ConfigError):
        resolve_threads(0)
