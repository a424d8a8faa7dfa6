import json

import pytest

from minivla.config import RunConfig, load_run_config
from minivla.pipeline import ConfigError


def test_defaults_valid_and_documented():
    d = RunConfig().to_dict()
    assert d["executor"] == "graph" and d["kv_strategy"] == "static"
    assert d["sweep"] == [1, 2, 3, 4, 5, 6] and d["repeats"] == 10


def test_graph_requires_static():
    with pytest.raises(ConfigError, match="requires kv_strategy 'static'"):
        RunConfig(executor="graph", kv_strategy="dynamic")
    RunConfig(executor="eager", kv_strategy="dynamic")


@pytest.mark.parametrize("bad", [
    {"topology": "ring"}, {"num_trajectories": 0}, {"repeats": 0}, {"sweep": []},
    {"max_new_tokens": 10_000}, {"selector": "best"}, {"matmul_kernel": "fft"},
    {"timing_statistic": "max"},
])
def test_invalid_values(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_round_trip_and_file(tmp_path):
    cfg = RunConfig(num_trajectories=3, topology="multi", sweep=(1, 3))
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"repeats": 2, "model": {"hidden_dim": 32}}))
    loaded, keys = load_run_config(p)
    assert loaded.repeats == 2 and loaded.model.hidden_dim == 32 and keys == {"repeats", "model"}


def test_unknown_keys_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"turbo": True})
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_run_config(p)
    with pytest.raises(OSError):
        load_run_config(tmp_path / "absent.json")


def test_override_ignores_none_and_validates():
    cfg = RunConfig()
    assert cfg.override(repeats=None) is cfg
    assert cfg.override(repeats=4).repeats == 4
    with pytest.raises(ConfigError):
        cfg.override(executor="graph", kv_strategy="dynamic")


def test_request_kwargs_forwarding():
    kw = RunConfig(sampler_seed=5).request_kwargs(num_trajectories=2)
    assert kw["sampler_seed"] == 5 and kw["num_trajectories"] == 2
