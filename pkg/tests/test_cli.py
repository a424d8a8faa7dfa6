import csv
import json

import pytest

from minivla.cli import main
from minivla.scenario import bundled

FAST = {"repeats": 1, "warmup": 0, "max_new_tokens": 4}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(FAST))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_generate_default(tmp_path, cfg_file):
    assert run("generate", "--config", cfg_file, "--out", tmp_path) == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert len(res["trajectories"]) == 1 and len(res["trajectories"][0]) == 64
    lat = json.loads((tmp_path / "latency.json").read_text())
    assert len(lat["action_gen_iter_ms"]) == 10


def test_generate_single_six(tmp_path, cfg_file):
    assert run("generate", "--config", cfg_file, "--num-traj", 6, "--topology", "single",
               "--out", tmp_path) == 0
    res = json.loads((tmp_path / "result.json").read_text())
    assert len(res["trajectories"]) == 6 and len(res["reasonings"]) == 1


def test_graph_with_dynamic_kv_exits_2(tmp_path, cfg_file, capsys):
    assert run("generate", "--config", cfg_file, "--executor", "graph", "--kv", "dynamic",
               "--out", tmp_path) == 2
    assert "requires kv_strategy 'static'" in capsys.readouterr().err


def test_missing_scenario_exits_1(tmp_path, cfg_file):
    assert run("generate", "--config", cfg_file, "--scenario", tmp_path / "none.json",
               "--out", tmp_path) == 1


def test_bad_config_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"topology": "star"}))
    assert run("generate", "--config", p, "--out", tmp_path) == 2
    p.write_text(json.dumps({"no_such_key": 1}))
    assert run("generate", "--config", p, "--out", tmp_path) == 2


def test_profile_rows_and_repeats(tmp_path, tmp_path_factory):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**FAST, "repeats": 3}))
    out = tmp_path / "o"
    assert run("profile", "--config", p, "--sweep", "1,2", "--out", out) == 0
    rows = read_csv(out / "sweep.csv")
    assert [(r["topology"], r["n"]) for r in rows] == [
        ("multi", "1"), ("multi", "2"), ("single", "1"), ("single", "2")]
    assert {r["repeats"] for r in rows} == {"3"}
    data = json.loads((out / "profile_data.json").read_text())
    assert data["topology_equivalence_n1"] is True
    scaling = json.loads((out / "scaling.json").read_text())
    assert set(scaling) == {"multi", "single"}
    iters = read_csv(out / "actiongen_iters.csv")
    assert [r["mode"] for r in iters[:10]] == ["eager", "capture"] + ["replay"] * 8


def test_profile_sweep_without_one_exits_2(tmp_path, cfg_file):
    assert run("profile", "--config", cfg_file, "--sweep", "2,3", "--out", tmp_path) == 2


def test_profile_single_topology_only(tmp_path, cfg_file):
    assert run("profile", "--config", cfg_file, "--sweep", "1", "--topology", "single",
               "--out", tmp_path) == 0
    assert {r["topology"] for r in read_csv(tmp_path / "sweep.csv")} == {"single"}


def test_compare_actiongen_columns_and_counters(tmp_path, cfg_file):
    assert run("compare-actiongen", "--config", cfg_file, "--sweep", "1", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "actiongen.csv")
    assert list(rows[0]) == ["variant", "n", "action_gen_ms", "alloc_count", "dispatch_count",
                             "replay_count"]
    by = {r["variant"]: r for r in rows}
    assert int(by["baseline"]["alloc_count"]) > int(by["+static_kv"]["alloc_count"])
    assert int(by["+graph"]["replay_count"]) == 8
    assert int(by["+graph"]["dispatch_count"]) < int(by["+static_kv"]["dispatch_count"])
    data = json.loads((tmp_path / "actiongen_data.json").read_text())
    assert len({r["trajectories_sha256"] for r in data["runs"]}) == 1


def test_eval_open_gt_predictor(tmp_path, cfg_file):
    assert run("eval", "open", "--predictor", "gt", "--config", cfg_file, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "open_loop.csv")
    assert len(rows) == 4 and rows[-1]["case_id"] == "mean"
    assert float(rows[-1]["min_ade_m"]) == 0


def test_eval_open_engine(tmp_path, cfg_file):
    assert run("eval", "open", "--num-traj", 2, "--config", cfg_file, "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "open_loop.csv")
    assert all(float(r["min_ade_m"]) >= 0 for r in rows)


def test_eval_closed_scripted_bundled(tmp_path, cfg_file):
    assert run("eval", "closed", "--policy", "scripted", "--config", cfg_file,
               "--out", tmp_path) == 0
    rows = {r["scenario_id"]: r for r in read_csv(tmp_path / "closed_loop.csv")}
    assert float(rows["straight"]["dtf_m"]) == 100.0
    assert rows["straight"]["failure_kind"] == "None"
    assert rows["curved_failure"]["failure_kind"] == "OffDrivable"
    assert rows["obstacle"]["failure_kind"] == "Collision"
    assert "mean" in rows


def test_eval_missing_world_exits_1(tmp_path, cfg_file):
    assert run("eval", "closed", "--policy", "scripted", tmp_path / "missing.json",
               "--config", cfg_file, "--out", tmp_path) == 1


def test_eval_closed_engine_policy(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(FAST))
    world = json.loads(bundled("world_straight.json").read_text())
    world["max_distance"] = 5.0
    del world["name"]  # fall back to the file stem
    w = tmp_path / "short.json"
    w.write_text(json.dumps(world))
    assert run("eval", "closed", w, "--config", p, "--out", tmp_path) == 0
    assert read_csv(tmp_path / "closed_loop.csv")[0]["scenario_id"] == "short"


def test_log_level_env(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("MINIVLA_LOG", "info")
    assert run("generate", "--config", cfg_file, "--out", tmp_path) == 0
