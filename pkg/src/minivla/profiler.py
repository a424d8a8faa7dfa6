"""Per-component latency instrumentation and derived statistics."""

from __future__ import annotations

import csv
import gc
import io
import json
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "LatencyComponent",
    "LatencyReport",
    "Profiler",
    "ScalingReport",
    "scaling_factor",
    "tokens_per_second",
    "actiongen_proportion",
    "linear_fit",
    "classify_trend",
    "aggregate_reports",
    "interleaved_reports",
    "TIMING_STATISTICS",
    "SWEEP_COLUMNS",
    "write_sweep_csv",
    "read_sweep_csv",
]


class LatencyComponent(str, Enum):
    PREPROCESSING = "preprocessing"
    REASONING_VISION = "reasoning_vision"
    REASONING_PREFILL = "reasoning_prefill"
    REASONING_DECODE = "reasoning_decode"
    ACTION_GEN = "action_gen"

    @property
    def key(self) -> str:
        return self.value + "_ms"


COMPONENTS = tuple(LatencyComponent)
COUNTER_KEYS = ("alloc_count", "dispatch_count", "replay_count", "kv_bytes")


@dataclass
class LatencyReport:
    components: dict[LatencyComponent, float] = field(
        default_factory=lambda: {c: 0.0 for c in COMPONENTS})
    total_ms: float = 0.0
    postprocessing_ms: float = 0.0
    repeats: int = 1
    counters: dict[str, int] = field(default_factory=lambda: {k: 0 for k in COUNTER_KEYS})
    action_gen_iter_ms: list[float] = field(default_factory=list)
    cot_tokens: int = 0

    def __getitem__(self, component: LatencyComponent) -> float:
        return self.components[LatencyComponent(component)]

    def component_sum(self) -> float:
        return sum(self.components.values())

    def to_json_dict(self) -> dict:
        d = {c.key: self.components[c] for c in COMPONENTS}
        d["action_gen_iter_ms"] = list(self.action_gen_iter_ms)
        d["total_ms"] = self.total_ms
        for k in COUNTER_KEYS:
            d[k] = int(self.counters.get(k, 0))
        d["cot_tokens"] = self.cot_tokens
        d["repeats"] = self.repeats
        d["postprocessing_ms"] = self.postprocessing_ms
        return d

    @classmethod
    def from_json_dict(cls, d: Mapping) -> LatencyReport:
        return cls(
            components={c: float(d[c.key]) for c in COMPONENTS},
            total_ms=float(d["total_ms"]),
            postprocessing_ms=float(d.get("postprocessing_ms", 0.0)),
            repeats=int(d.get("repeats", 1)),
            counters={k: int(d[k]) for k in COUNTER_KEYS},
            action_gen_iter_ms=[float(x) for x in d["action_gen_iter_ms"]],
            cot_tokens=int(d["cot_tokens"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> LatencyReport:
        return cls.from_json_dict(json.loads(s))


class Profiler:
    """Accumulates section timings for one inference stream."""

    def __init__(self, clock: Callable[[], float] = time.perf_counter):
        self._clock = clock
        self.report = LatencyReport()
        self._active: set[str] = set()

    @contextmanager
    def section(self, component):
        name = component.value if isinstance(component, LatencyComponent) else str(component)
        if name in self._active:
            raise RuntimeError(f"nested {name} section")
        self._active.add(name)
        t0 = self._clock()
        try:
            yield
        finally:
            ms = (self._clock() - t0) * 1e3
            self._active.discard(name)
            if name == "postprocessing":
                self.report.postprocessing_ms += ms
            elif name == "total":
                self.report.total_ms += ms
            else:
                c = LatencyComponent(name)
                self.report.components[c] += ms

    def time_section(self, component, thunk: Callable[[], object]) -> float:
        before = self._snapshot(component)
        with self.section(component):
            thunk()
        return self._snapshot(component) - before

    def _snapshot(self, component) -> float:
        name = component.value if isinstance(component, LatencyComponent) else str(component)
        if name == "postprocessing":
            return self.report.postprocessing_ms
        if name == "total":
            return self.report.total_ms
        return self.report.components[LatencyComponent(name)]


TIMING_STATISTICS: dict[str, Callable[[Iterable[float]], float]] = {
    "min": min,
    "median": statistics.median,
    "mean": statistics.fmean,
}


def aggregate_reports(reports: Sequence[LatencyReport], statistic: str = "min") -> LatencyReport:
    """Combine repeated runs field by field with ``statistic``.

    The default is the minimum: on a shared host slow samples come from
    interference, and the per-run timings are often bimodal, which makes a
    median jump between modes. Counters and token counts are taken from the
    last run; they are deterministic for a fixed request.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    try:
        stat = TIMING_STATISTICS[statistic]
    except KeyError:
        raise ValueError(f"statistic must be one of {tuple(TIMING_STATISTICS)}") from None
    iters = [r.action_gen_iter_ms for r in reports]
    width = min(len(i) for i in iters)
    return LatencyReport(
        components={c: stat([r.components[c] for r in reports]) for c in COMPONENTS},
        total_ms=stat([r.total_ms for r in reports]),
        postprocessing_ms=stat([r.postprocessing_ms for r in reports]),
        repeats=len(reports),
        counters=dict(reports[-1].counters),
        action_gen_iter_ms=[stat([i[k] for i in iters]) for k in range(width)],
        cot_tokens=reports[-1].cot_tokens,
    )


def interleaved_reports(jobs: Sequence[Callable[[Profiler], object]], repeats: int,
                        warmup: int = 1, statistic: str = "min"
                        ) -> list[tuple[object, LatencyReport]]:
    """Time several jobs with their repeats run round-robin.

    Each job takes a :class:`Profiler` and returns its result. After
    ``warmup`` untimed calls per job, every repeat round runs each job once,
    so slow drift in machine speed lands on all jobs alike rather than
    showing up as a trend across them. Garbage collection runs between
    timed calls, not during them. Returns ``(last result, aggregated
    report)`` per job.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if statistic not in TIMING_STATISTICS:
        raise ValueError(f"statistic must be one of {tuple(TIMING_STATISTICS)}")
    for job in jobs:
        for _ in range(warmup):
            job(Profiler())
    reports: list[list[LatencyReport]] = [[] for _ in jobs]
    last: list = [None] * len(jobs)
    for _ in range(repeats):
        for i, job in enumerate(jobs):
            prof = Profiler()
            with _gc_paused():
                last[i] = job(prof)
            reports[i].append(prof.report)
    return [(res, aggregate_reports(reps, statistic)) for res, reps in zip(last, reports)]


@contextmanager
def _gc_paused():
    # Every round allocates the same objects in the same order, so automatic
    # collections would keep landing in the same job and bias its timings.
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def scaling_factor(sweep: Mapping[int, float] | Mapping[int, Mapping]):
    """Latency at the largest N divided by latency at N=1.

    ``sweep`` maps N to either a scalar latency or a per-component mapping;
    the result has the same form.
    """
    if 1 not in sweep:
        raise ValueError("sweep must include N=1")
    top = max(sweep)
    base, last = sweep[1], sweep[top]
    if isinstance(base, Mapping):
        return {k: _ratio(last[k], base[k]) for k in base}
    return _ratio(last, base)


def _ratio(num: float, den: float) -> float:
    if den == 0:
        raise ZeroDivisionError("zero baseline latency")
    return num / den


def tokens_per_second(tokens: int, decode_ms: float) -> float:
    if tokens == 0:
        return 0.0
    if decode_ms <= 0:
        raise ValueError("decode duration must be positive")
    return tokens / (decode_ms / 1000.0)


def actiongen_proportion(report: LatencyReport | None = None, *, action_ms: float | None = None,
                         total_ms: float | None = None) -> float:
    if report is not None:
        action_ms, total_ms = report[LatencyComponent.ACTION_GEN], report.total_ms
    if not action_ms:
        return 0.0
    return action_ms / total_ms


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line through the points: ``(slope, intercept, r_squared)``."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def classify_trend(ratio: float, tolerance: float = 0.2) -> str:
    return "constant" if abs(ratio - 1.0) <= tolerance else "scaling"


@dataclass
class ScalingReport:
    topology: str
    latencies: dict[int, dict[LatencyComponent, float]]
    reports: dict[int, LatencyReport] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if 1 not in self.latencies:
            raise ValueError("sweep must include N=1")

    @classmethod
    def from_reports(cls, topology: str, reports: Mapping[int, LatencyReport]) -> ScalingReport:
        return cls(topology, {n: dict(r.components) for n, r in reports.items()}, dict(reports))

    def factors(self) -> dict[LatencyComponent, float]:
        return scaling_factor(self.latencies)

    def ratio(self, component: LatencyComponent, n: int) -> float:
        return _ratio(self.latencies[n][component], self.latencies[1][component])

    def trends(self, tolerance: float = 0.2) -> dict[LatencyComponent, str]:
        return {c: classify_trend(f, tolerance) for c, f in self.factors().items()}

    def proportions(self) -> dict[int, float]:
        return {n: actiongen_proportion(r) for n, r in sorted(self.reports.items())}

    def to_json_dict(self) -> dict:
        factors = self.factors()
        trends = self.trends()
        return {
            "topology": self.topology,
            "n_values": sorted(self.latencies),
            "latencies_ms": {str(n): {c.key: v for c, v in comps.items()}
                             for n, comps in sorted(self.latencies.items())},
            "scaling_factor": {c.value: factors[c] for c in COMPONENTS},
            "trend": {c.value: trends[c] for c in COMPONENTS},
            "action_gen_proportion": {str(n): p for n, p in self.proportions().items()},
        }


SWEEP_COLUMNS = (
    "topology", "kv", "executor", "n", "repeats",
    *(c.key for c in COMPONENTS), "total_ms", *COUNTER_KEYS, "cot_tokens",
)


def sweep_row(topology: str, kv: str, executor: str, n: int, report: LatencyReport) -> dict:
    d = report.to_json_dict()
    row = {"topology": topology, "kv": kv, "executor": executor, "n": n, "repeats": report.repeats}
    for col in SWEEP_COLUMNS[5:]:
        row[col] = d[col]
    return row


def write_sweep_csv(rows: Iterable[Mapping], fh: io.TextIOBase | None = None) -> str:
    buf = fh or io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue() if fh is None else ""


def read_sweep_csv(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = {}
        for k, v in r.items():
            if k in ("topology", "kv", "executor"):
                out[k] = v
            elif k.endswith("_ms"):
                out[k] = float(v)
            else:
                out[k] = int(v)
        rows.append(out)
    return rows
