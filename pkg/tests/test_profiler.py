import itertools

import pytest
from hypothesis import given
from hypothesis import strategies as st

from minivla.profiler import (
    COMPONENTS,
    LatencyComponent,
    LatencyReport,
    Profiler,
    ScalingReport,
    actiongen_proportion,
    aggregate_reports,
    classify_trend,
    interleaved_reports,
    linear_fit,
    read_sweep_csv,
    scaling_factor,
    sweep_row,
    tokens_per_second,
    write_sweep_csv,
)

V = LatencyComponent.REASONING_VISION


class StepClock:
    """Fake clock advancing a fixed number of seconds per read."""

    def __init__(self, step):
        self._t = itertools.count(0, step)

    def __call__(self):
        return next(self._t)


def test_sections_of_one_component_accumulate():
    p = Profiler(StepClock(0.002))
    with p.section(V):
        pass
    with p.section(V):
        pass
    assert p.report[V] == pytest.approx(4.0)


def test_zero_work_section_non_negative():
    p = Profiler()
    assert p.time_section(LatencyComponent.PREPROCESSING, lambda: None) >= 0


def test_nested_same_component_rejected():
    p = Profiler()
    with pytest.raises(RuntimeError, match="nested"):
        with p.section(V):
            with p.section(V):
                pass


def test_postprocessing_kept_out_of_components():
    p = Profiler(StepClock(0.001))
    with p.section("postprocessing"):
        pass
    assert p.report.postprocessing_ms == pytest.approx(1.0)
    assert p.report.component_sum() == 0
    assert len(COMPONENTS) == 5


@pytest.mark.parametrize("sweep,expected", [
    ({1: 1.0, 6: 5.63}, 5.63),
    ({1: 1.0, 6: 1.0}, 1.0),
    ({1: 0.2, 6: 0.63}, 3.15),
])
def test_scaling_factor_examples(sweep, expected):
    assert scaling_factor(sweep) == pytest.approx(expected)


def test_scaling_factor_errors_and_mapping_form():
    with pytest.raises(ValueError):
        scaling_factor({2: 1.0, 6: 2.0})
    with pytest.raises(ZeroDivisionError):
        scaling_factor({1: 0.0, 6: 2.0})
    assert scaling_factor({1: {"a": 2.0}, 3: {"a": 1.0}, 6: {"a": 3.0}}) == {"a": 1.5}


def test_tokens_per_second():
    assert tokens_per_second(1012, 100_000) == pytest.approx(10.12)
    assert tokens_per_second(0, 0) == 0
    with pytest.raises(ValueError):
        tokens_per_second(5, 0)


def test_actiongen_proportion():
    assert actiongen_proportion(action_ms=42.06, total_ms=100) == pytest.approx(0.4206)
    assert actiongen_proportion(action_ms=0, total_ms=100) == 0


def test_linear_fit_exact_and_noisy():
    slope, icpt, r2 = linear_fit([4, 8, 16, 32], [9, 17, 33, 65])
    assert (slope, icpt, r2) == pytest.approx((2.0, 1.0, 1.0))
    assert linear_fit([1, 2, 3, 4], [1, 3, 2, 4])[2] < 0.95


def test_trend_classification():
    assert classify_trend(1.19) == "constant"
    assert classify_trend(0.81) == "constant"
    assert classify_trend(1.5) == "scaling"


def _report(scale, total=None):
    comps = {c: scale * (i + 1) for i, c in enumerate(COMPONENTS)}
    return LatencyReport(components=comps, total_ms=total or sum(comps.values()) * 1.1,
                         action_gen_iter_ms=[scale] * 10, cot_tokens=7,
                         counters={"alloc_count": 1, "dispatch_count": 2, "replay_count": 3,
                                   "kv_bytes": 4})


def test_report_json_round_trip():
    r = _report(0.1234567)
    back = LatencyReport.from_json(r.to_json())
    assert back == r


def test_aggregate_statistics():
    reps = [_report(1.0), _report(5.0), _report(2.0)]
    agg = aggregate_reports(reps)
    assert agg[V] == 2.0 and agg.repeats == 3
    assert agg.action_gen_iter_ms == [1.0] * 10
    assert agg.total_ms >= agg.component_sum()
    assert aggregate_reports(reps, "median")[V] == 4.0
    assert aggregate_reports(reps, "mean")[V] == pytest.approx(16 / 3)
    with pytest.raises(ValueError):
        aggregate_reports([])
    with pytest.raises(ValueError, match="statistic"):
        aggregate_reports(reps, "mode")


def test_scaling_report_requires_n1_and_summarizes():
    with pytest.raises(ValueError):
        ScalingReport("single", {2: {}})
    rep = ScalingReport.from_reports("multi", {1: _report(1.0), 6: _report(3.0)})
    d = rep.to_json_dict()
    assert d["n_values"] == [1, 6]
    assert d["scaling_factor"]["reasoning_vision"] == pytest.approx(3.0)
    assert set(d["trend"].values()) == {"scaling"}


def test_sweep_csv_round_trip():
    rows = [sweep_row("single", "static", "graph", n, _report(n * 0.5)) for n in (1, 2)]
    back = read_sweep_csv(write_sweep_csv(rows))
    assert [r["n"] for r in back] == [1, 2]
    assert back[1]["reasoning_vision_ms"] == pytest.approx(2.0)
    assert back[0]["dispatch_count"] == 2 and back[0]["topology"] == "single"


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=5, max_size=5),
       st.integers(0, 10_000))
def test_report_round_trip_property(vals, m):
    r = LatencyReport(components=dict(zip(COMPONENTS, vals)), total_ms=sum(vals),
                      action_gen_iter_ms=vals * 2, cot_tokens=m)
    assert LatencyReport.from_json(r.to_json()) == r


def test_interleaved_reports_round_robin():
    order = []

    def job(name):
        def run(prof):
            order.append(name)
            with prof.section(V):
                pass
            return name
        return run

    out = interleaved_reports([job("a"), job("b")], repeats=3, warmup=1)
    assert order == ["a", "b"] + ["a", "b"] * 3
    assert [res for res, _ in out] == ["a", "b"]
    assert all(rep.repeats == 3 for _, rep in out)
