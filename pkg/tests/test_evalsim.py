import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minivla.evalsim import (
    ClosedLoopWorld,
    EnginePolicy,
    FailureKind,
    OpenLoopCase,
    ScriptedPolicy,
    SimulationError,
    check_failure,
    diversity,
    eval_open_loop,
    min_ade,
    project_to_polyline,
    simulate_closed_loop,
)
from minivla.pipeline import Engine, InferenceRequest, straight_history
from minivla.scenario import BUNDLED_WORLDS, bundled_world, load_open_loop_dataset, bundled

STEP_ARC = 5.0 * 0.1  # one control step at the bundled initial speed


def oracle_min_ade(samples, gt):
    best = math.inf
    for s in samples:
        tot = 0.0
        for (sx, sy, *_), (gx, gy, *_) in zip(s, gt):
            tot += math.sqrt((float(sx) - float(gx)) ** 2 + (float(sy) - float(gy)) ** 2)
        best = min(best, tot / len(gt))
    return best


def gt_line():
    return np.column_stack([np.arange(1, 65) * 0.5, np.zeros(64), np.zeros(64)])


def test_min_ade_identity_and_offsets():
    gt = gt_line()
    assert min_ade(gt[None], gt) == 0
    a, b = gt.copy(), gt.copy()
    a[:, 0] += 1
    b[:, 1] += 2
    assert min_ade([a, b], gt) == pytest.approx(1.0)


def test_min_ade_ignores_yaw():
    gt = gt_line()
    s = gt.copy()
    s[:, 2] = 3.0
    assert min_ade(s[None], gt) == 0


def test_min_ade_against_independent_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        k = int(rng.integers(1, 7))
        samples = rng.normal(0, 10, (k, 64, 3))
        gt = rng.normal(0, 10, (64, 3))
        assert abs(min_ade(samples, gt) - oracle_min_ade(samples, gt)) < 1e-9


def test_min_ade_length_mismatch():
    with pytest.raises(ValueError):
        min_ade(np.zeros((2, 63, 3)), np.zeros((64, 3)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 5))
def test_adding_a_sample_never_increases_min_ade(seed, k):
    rng = np.random.default_rng(seed)
    s = rng.normal(0, 5, (k + 1, 64, 3))
    gt = rng.normal(0, 5, (64, 3))
    assert min_ade(s, gt) <= min_ade(s[:k], gt)


def test_diversity_examples():
    gt = gt_line()
    assert diversity([gt, gt, gt]) == 0
    b = gt.copy()
    b[:, :2] += (3, 4)
    assert diversity([gt, b]) == pytest.approx(5.0)
    with pytest.raises(ValueError):
        diversity([gt])


def test_diversity_translation_invariant():
    rng = np.random.default_rng(1)
    s = rng.normal(0, 3, (4, 64, 3))
    moved = s.copy()
    moved[..., :2] += (17.5, -3.25)
    assert diversity(moved) == pytest.approx(diversity(s), abs=1e-9)


def test_projection_signs_and_ties():
    line = np.array([[0, 0], [10, 0], [10, 10]], float)
    lat, s = project_to_polyline(line, (5, 2))
    assert (lat, s) == (2.0, 5.0)
    assert project_to_polyline(line, (5, -1))[0] == -1.0
    # (11, -1) is nearest the shared vertex at equal distance from both segments
    _, s = project_to_polyline(line, (11, -1))
    assert s == 10.0


# ---------------------------------------------------------------------------
# closed loop


def fine_crossing_arc(curvature, halfwidth, v=5.0, h=1e-4):
    """Arc length at the first |y| > halfwidth under fine Euler integration."""
    x = y = th = s = 0.0
    while abs(y) <= halfwidth:
        x, y, th = x + v * math.cos(th) * h, y + v * math.sin(th) * h, th + curvature * v * h
        s += v * h
    return s


def scripted_for(world):
    sp = world.scripted_policy or {}
    return ScriptedPolicy(sp.get("accel", 0.0), sp.get("curvature", 0.0))


def test_bundled_straight_world_reaches_max_distance():
    w = bundled_world("straight")
    res = simulate_closed_loop(w, scripted_for(w))
    assert res.failure.kind is FailureKind.NONE
    assert res.dtf_m == w.max_distance


def test_bundled_curved_world_matches_fine_oracle():
    w = bundled_world("curved_failure")
    res = simulate_closed_loop(w, scripted_for(w))
    ref = fine_crossing_arc(0.05, w.halfwidth)
    assert res.failure.kind is FailureKind.OFF_DRIVABLE
    assert abs(res.dtf_m - ref) <= STEP_ARC
    assert ref == pytest.approx(20 * math.acos(0.9), abs=1e-3)


def test_bundled_obstacle_world_matches_contact_distance():
    w = bundled_world("obstacle")
    res = simulate_closed_loop(w, scripted_for(w))
    radius = w.obstacles[0, 2]
    assert res.failure.kind is FailureKind.COLLISION
    assert abs(res.dtf_m - (10 - (1.0 + radius))) <= STEP_ARC


def test_failure_precedence():
    w = ClosedLoopWorld([[0, 0], [100, 0]], halfwidth=5.0, obstacles=[[0, 6, 1, 0, 0]])
    assert check_failure(w, 0, 6, 0) is FailureKind.COLLISION
    assert check_failure(w, 50, 6, 0) is FailureKind.OFF_DRIVABLE
    assert check_failure(w, 50, 4.5, 0) is FailureKind.LATERAL_DEVIATION
    assert check_failure(w, 50, 3.9, 0) is FailureKind.NONE


def test_lateral_deviation_against_separate_gt_path():
    w = ClosedLoopWorld([[0, 0], [100, 0]], halfwidth=10.0, gt_path=[[0, 3], [100, 3]])
    assert check_failure(w, 10, -1.5, 0) is FailureKind.LATERAL_DEVIATION
    assert check_failure(w, 10, 0, 0) is FailureKind.NONE


def test_moving_obstacle():
    w = ClosedLoopWorld([[0, 0], [100, 0]], halfwidth=3.0, obstacles=[[30, 0, 1, -5, 0]])
    res = simulate_closed_loop(w, ScriptedPolicy())
    assert res.failure.kind is FailureKind.COLLISION
    # closing speed 10 m/s, contact gap 28 m
    assert abs(res.dtf_m - 14.0) <= STEP_ARC


def test_world_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        ClosedLoopWorld([[0, 0]], 1.0)
    with pytest.raises(ValueError):
        ClosedLoopWorld([[0, 0], [1, 0]], 0.0)
    with pytest.raises(ValueError):
        ClosedLoopWorld([[0, 0], [1, 0]], 1.0, replan_period=0)
    w = bundled_world("obstacle")
    back = ClosedLoopWorld.from_dict(w.to_dict())
    assert back.to_dict() == w.to_dict()


def test_policy_error_carries_trace():
    calls = []

    def flaky(obs):
        calls.append(obs.step)
        if len(calls) > 2:
            raise RuntimeError("planner down")
        return ScriptedPolicy()(obs)

    with pytest.raises(SimulationError) as ei:
        simulate_closed_loop(bundled_world("straight"), flaky)
    assert len(ei.value.trace) == 10


def test_closed_loop_reproducible():
    w = bundled_world("curved_failure")
    a = simulate_closed_loop(w, scripted_for(w))
    b = simulate_closed_loop(w, scripted_for(w))
    assert a.trace == b.trace and a.dtf_m == b.dtf_m


@settings(max_examples=20, deadline=None)
@given(k=st.floats(-0.1, 0.1), w1=st.floats(0.5, 6), w2=st.floats(0.5, 6))
def test_dtf_monotone_in_halfwidth(k, w1, w2):
    lo, hi = sorted((w1, w2))
    pol = ScriptedPolicy(0.0, k)
    mk = lambda hw: ClosedLoopWorld([[0, 0], [200, 0]], hw, max_distance=60)
    assert simulate_closed_loop(mk(hi), pol).dtf_m >= simulate_closed_loop(mk(lo), pol).dtf_m


def test_engine_policy_runs_closed_loop(model, small_frames):
    w = ClosedLoopWorld([[0, 0], [200, 0]], 3.5, max_distance=6.0)
    pol = EnginePolicy(Engine(model=model), small_frames, max_new_tokens=4)
    a = simulate_closed_loop(w, pol)
    b = simulate_closed_loop(w, EnginePolicy(Engine(model=model), small_frames, max_new_tokens=4))
    assert a.dtf_m == b.dtf_m and a.trace == b.trace


# ---------------------------------------------------------------------------
# open loop


def make_case(cid, frames, gt=None):
    return OpenLoopCase(cid, frames, straight_history(5.0), gt_line() if gt is None else gt)


def gt_predictor(case, k):
    return np.repeat(case.gt_future[None], k, 0)


def test_open_loop_gt_stub_is_zero(small_frames):
    rep = eval_open_loop([make_case("a", small_frames)], gt_predictor, k=6)
    assert rep.mean == 0 and rep.rows()[-1] == ("mean", 0.0)


def engine_predictor(model, **kw):
    eng = Engine(model=model)

    def predict(case, k):
        req = InferenceRequest(case.frames, case.pose_history, num_trajectories=k,
                               max_new_tokens=4, **kw)
        return eng.infer(req).trajectories
    return predict


def test_open_loop_identical_cases_equal(model, small_frames):
    rep = eval_open_loop([make_case("a", small_frames), make_case("a", small_frames)],
                         engine_predictor(model), k=2)
    assert rep.per_case[0][1] == rep.per_case[1][1]
    assert len(rep.per_case) == 2


def test_open_loop_topologies_agree_at_k1(model, small_frames):
    cases = [make_case("a", small_frames)]
    single = eval_open_loop(cases, engine_predictor(model, topology="single"), k=1)
    multi = eval_open_loop(cases, engine_predictor(model, topology="multi"), k=1)
    assert single.mean == multi.mean


def test_open_loop_skips_bad_items(tmp_path):
    items, loader = load_open_loop_dataset(bundled("open_loop_cases.json"))
    bad = [{"case_id": "ghost", "frames": {"path": str(tmp_path / "nope.bin"),
                                           "shape": [4, 4, 8, 8, 3]}}]
    rep = eval_open_loop(list(items) + bad, gt_predictor, k=2, loader=loader)
    assert rep.skipped == 1 and len(rep.per_case) == len(items)
    assert rep.mean == 0


def test_open_loop_parallel_matches_serial(model):
    items, loader = load_open_loop_dataset(bundled("open_loop_cases.json"))
    serial = eval_open_loop(items, engine_predictor(model), k=2, loader=loader)
    par = eval_open_loop(items, None, k=2, loader=loader, parallel=2,
                         predictor_factory=lambda: engine_predictor(model))
    assert serial.per_case == par.per_case


def test_bundled_world_names():
    assert [bundled_world(n).name for n in BUNDLED_WORLDS] == list(BUNDLED_WORLDS)
