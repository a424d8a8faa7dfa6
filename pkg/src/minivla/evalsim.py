"""Open-loop metrics and a small receding-horizon kinematic simulator."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np

from .pipeline import DT, PoseHistory

__all__ = [
    "EGO_RADIUS",
    "LATERAL_LIMIT",
    "min_ade",
    "diversity",
    "FailureKind",
    "FailureEvent",
    "ClosedLoopWorld",
    "Observation",
    "Plan",
    "ScriptedPolicy",
    "EnginePolicy",
    "simulate_closed_loop",
    "ClosedLoopResult",
    "SimulationError",
    "project_to_polyline",
    "check_failure",
    "OpenLoopCase",
    "OpenLoopReport",
    "eval_open_loop",
    "SELECTORS",
]

log = logging.getLogger(__name__)

EGO_RADIUS = 1.0
LATERAL_LIMIT = 4.0


def _xy(trajs) -> np.ndarray:
    a = np.asarray(trajs, dtype=np.float64)
    return a[..., :2]


def min_ade(samples, gt) -> float:
    """Smallest mean (x, y) displacement between any sample and ``gt``."""
    s, g = _xy(samples), _xy(gt)
    if s.ndim == 2:
        s = s[None]
    if len(s) < 1:
        raise ValueError("min_ade needs at least one sample")
    if s.shape[1:] != g.shape:
        raise ValueError(f"sample length {s.shape[1]} != ground truth length {g.shape[0]}")
    ade = np.sqrt(((s - g) ** 2).sum(-1)).mean(-1)
    return float(ade.min())


def diversity(samples) -> float:
    """Mean pairwise ADE over unordered sample pairs."""
    s = _xy(samples)
    k = len(s)
    if k < 2:
        raise ValueError("diversity needs at least two samples")
    i, j = np.triu_indices(k, 1)
    d = np.sqrt(((s[i] - s[j]) ** 2).sum(-1)).mean(-1)
    return float(d.mean())


# ---------------------------------------------------------------------------
# closed loop


class FailureKind(str, enum.Enum):
    COLLISION = "Collision"
    OFF_DRIVABLE = "OffDrivable"
    LATERAL_DEVIATION = "LateralDeviation"
    NONE = "None"


@dataclass(frozen=True)
class FailureEvent:
    kind: FailureKind
    arc_length: float
    step: int | None


def project_to_polyline(line: np.ndarray, p) -> tuple[float, float]:
    """Signed lateral offset (left positive) and arc length of the projection of ``p``.

    Uses the nearest segment; on a tie the lower segment index wins.
    """
    px, py = float(p[0]), float(p[1])
    best = None
    s0 = 0.0
    for a, b in zip(line[:-1], line[1:]):
        dx, dy = b[0] - a[0], b[1] - a[1]
        seg = math.hypot(dx, dy)
        t = ((px - a[0]) * dx + (py - a[1]) * dy) / (seg * seg)
        t = min(1.0, max(0.0, t))
        qx, qy = a[0] + t * dx, a[1] + t * dy
        dist = math.hypot(px - qx, py - qy)
        if best is None or dist < best[0]:
            side = math.copysign(1.0, dx * (py - a[1]) - dy * (px - a[0]))
            best = (dist, side * dist, s0 + t * seg)
        s0 += seg
    return best[1], best[2]


@dataclass
class ClosedLoopWorld:
    centerline: np.ndarray
    halfwidth: float
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))
    max_distance: float = 100.0
    replan_period: int = 5
    initial_speed: float = 5.0
    gt_path: np.ndarray | None = None
    name: str = "world"
    scripted_policy: dict | None = None

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64).reshape(-1, 2)
        obs = np.asarray(self.obstacles, dtype=np.float64).reshape(-1, 5) if len(self.obstacles) else np.zeros((0, 5))
        self.obstacles = obs
        self._gt_is_centerline = self.gt_path is None
        if self._gt_is_centerline:
            self.gt_path = self.centerline
        else:
            self.gt_path = np.asarray(self.gt_path, dtype=np.float64).reshape(-1, 2)
            if len(self.gt_path) < 2:
                raise ValueError("gt_path needs at least two points")
        if len(self.centerline) < 2:
            raise ValueError("centerline needs at least two points")
        if np.any(np.hypot(*np.diff(self.centerline, axis=0).T) == 0):
            raise ValueError("centerline has a zero-length segment")
        if not self.halfwidth > 0:
            raise ValueError("halfwidth must be positive")
        if int(self.replan_period) < 1:
            raise ValueError("replan_period must be >= 1")
        if not self.max_distance > 0:
            raise ValueError("max_distance must be positive")
        if self.initial_speed < 0:
            raise ValueError("initial_speed must be >= 0")
        self.replan_period = int(self.replan_period)
        self.halfwidth = float(self.halfwidth)
        self.max_distance = float(self.max_distance)
        self.initial_speed = float(self.initial_speed)

    def start_pose(self) -> tuple[float, float, float]:
        (x0, y0), (x1, y1) = self.centerline[:2]
        return float(x0), float(y0), math.atan2(y1 - y0, x1 - x0)

    def obstacles_at(self, t: float) -> np.ndarray:
        o = self.obstacles
        pos = o[:, :2] + o[:, 3:5] * t
        return np.column_stack([pos, o[:, 2]])

    @classmethod
    def from_dict(cls, d: dict, name: str = "world") -> ClosedLoopWorld:
        return cls(
            centerline=d["centerline"],
            halfwidth=float(d["halfwidth"]),
            obstacles=d.get("obstacles", []),
            max_distance=float(d["max_distance"]),
            replan_period=int(d.get("replan_period", 5)),
            initial_speed=float(d.get("initial_speed", 5.0)),
            gt_path=d.get("gt_path"),
            name=d.get("name", name),
            scripted_policy=d.get("scripted_policy"),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> ClosedLoopWorld:
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), name=path.stem)

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "centerline": self.centerline.tolist(),
            "halfwidth": self.halfwidth,
            "obstacles": self.obstacles.tolist(),
            "max_distance": self.max_distance,
            "replan_period": self.replan_period,
            "initial_speed": self.initial_speed,
        }
        if not self._gt_is_centerline:
            d["gt_path"] = self.gt_path.tolist()
        if self.scripted_policy is not None:
            d["scripted_policy"] = dict(self.scripted_policy)
        return d


def check_failure(world: ClosedLoopWorld, x: float, y: float, t: float) -> FailureKind:
    """Failure kind at one ego position; collision beats off-drivable beats deviation."""
    obs = world.obstacles_at(t)
    if len(obs):
        d = np.hypot(obs[:, 0] - x, obs[:, 1] - y)
        if np.any(d < EGO_RADIUS + obs[:, 2]):
            return FailureKind.COLLISION
    lat, _ = project_to_polyline(world.centerline, (x, y))
    if abs(lat) > world.halfwidth:
        return FailureKind.OFF_DRIVABLE
    dev = lat if world._gt_is_centerline else project_to_polyline(world.gt_path, (x, y))[0]
    if abs(dev) > LATERAL_LIMIT:
        return FailureKind.LATERAL_DEVIATION
    return FailureKind.NONE


@dataclass(frozen=True)
class Observation:
    step: int
    time: float
    pose: tuple[float, float, float]  # world frame
    speed: float
    history: PoseHistory  # ego frame, last pose at the origin
    replan_index: int


@dataclass
class Plan:
    actions: np.ndarray  # [N, 64, 2]
    trajectories: np.ndarray  # [N, 64, 3] ego frame


class Policy(Protocol):
    def __call__(self, obs: Observation) -> Plan: ...


@dataclass
class ScriptedPolicy:
    """Constant acceleration and curvature for every sample."""

    accel: float = 0.0
    curvature: float = 0.0
    samples: int = 1
    steps: int = 64

    def __call__(self, obs: Observation) -> Plan:
        from .pipeline import actions_to_trajectory

        act = np.tile([self.accel, self.curvature], (self.steps, 1)).astype(np.float64)
        traj = actions_to_trajectory(act, obs.speed)
        return Plan(np.repeat(act[None], self.samples, 0), np.repeat(traj[None], self.samples, 0))


class EnginePolicy:
    """Plans with the full inference pipeline on fixed camera frames.

    Replan ``r`` uses base seeds offset by ``r * num_trajectories`` so lane
    seed streams never repeat across replans.
    """

    def __init__(self, engine, frames, **request_kwargs):
        self.engine = engine
        self.frames = np.asarray(frames, dtype=np.float32)
        self.kwargs = dict(request_kwargs)

    def __call__(self, obs: Observation) -> Plan:
        from .pipeline import InferenceRequest

        kw = dict(self.kwargs)
        n = kw.get("num_trajectories", 1)
        off = obs.replan_index * n
        kw["sampler_seed"] = kw.get("sampler_seed", 0) + off
        kw["init_seed"] = kw.get("init_seed", 0) + off
        res = self.engine.infer(InferenceRequest(self.frames, obs.history, **kw))
        return Plan(res.actions.astype(np.float64), res.trajectories)


def _to_world(traj: np.ndarray, pose) -> np.ndarray:
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    out = np.empty_like(traj[..., :2])
    out[..., 0] = x + c * traj[..., 0] - s * traj[..., 1]
    out[..., 1] = y + s * traj[..., 0] + c * traj[..., 1]
    return out


def _select_lane0(plan: Plan, world: ClosedLoopWorld, pose) -> int:
    return 0


def _select_min_lateral(plan: Plan, world: ClosedLoopWorld, pose) -> int:
    ends = _to_world(plan.trajectories[:, -1], pose)
    offs = [abs(project_to_polyline(world.centerline, e)[0]) for e in ends]
    return int(np.argmin(offs))


SELECTORS: dict[str, Callable[[Plan, ClosedLoopWorld, tuple], int]] = {
    "lane0": _select_lane0,
    "min_lateral": _select_min_lateral,
}


class SimulationError(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


class ClosedLoopResult(NamedTuple):
    dtf_m: float
    failure: FailureEvent
    trace: list[dict]


def _ego_history(world_hist: list[tuple[float, float, float]]) -> PoseHistory:
    x, y, th = world_hist[-1]
    c, s = math.cos(th), math.sin(th)
    p = np.array(world_hist[-16:], dtype=np.float64)
    dx, dy = p[:, 0] - x, p[:, 1] - y
    ego = np.column_stack([c * dx + s * dy, -s * dx + c * dy, np.angle(np.exp(1j * (p[:, 2] - th)))])
    ego[-1] = 0.0
    return PoseHistory(ego)


def simulate_closed_loop(world: ClosedLoopWorld, policy: Policy, selector: str = "lane0",
                         max_steps: int = 100_000) -> ClosedLoopResult:
    """Drive ``policy`` through ``world`` until failure or ``max_distance``.

    Every ``replan_period`` steps the policy is asked for a plan; the selected
    sample's next actions are executed with the same Euler unicycle update the
    pipeline uses. Speed is floored at zero. DTF is the arc length covered
    before the first failing step.
    """
    pick = SELECTORS[selector]
    x, y, th = world.start_pose()
    v = world.initial_speed
    hist = [(x - v * DT * (15 - i) * math.cos(th), y - v * DT * (15 - i) * math.sin(th), th)
            for i in range(16)]
    s = 0.0
    trace: list[dict] = []
    actions = None
    cursor = 0
    replan = 0
    for step in range(max_steps):
        if step % world.replan_period == 0:
            obs = Observation(step, step * DT, (x, y, th), v, _ego_history(hist), replan)
            try:
                plan = policy(obs)
                lane = pick(plan, world, (x, y, th))
                actions = np.asarray(plan.actions, dtype=np.float64)[lane]
            except Exception as e:
                raise SimulationError(f"policy failed at step {step}: {e}", trace) from e
            if len(actions) < world.replan_period:
                raise SimulationError("plan shorter than the replan period", trace)
            cursor = 0
            replan += 1
        a, k = actions[cursor]
        cursor += 1
        x, y, th, v = (x + v * math.cos(th) * DT, y + v * math.sin(th) * DT,
                       th + k * v * DT, max(0.0, v + a * DT))
        ds = math.hypot(x - hist[-1][0], y - hist[-1][1])
        hist.append((x, y, th))
        del hist[:-16]
        kind = check_failure(world, x, y, (step + 1) * DT)
        lat, _ = project_to_polyline(world.centerline, (x, y))
        trace.append({"step": step + 1, "x": x, "y": y, "yaw": th, "v": v, "s": s + ds,
                      "lateral": lat, "lane": int(lane), "event": kind.value})
        if kind is not FailureKind.NONE:
            return ClosedLoopResult(s, FailureEvent(kind, s, step + 1), trace)
        s += ds
        if s >= world.max_distance:
            return ClosedLoopResult(world.max_distance,
                                    FailureEvent(FailureKind.NONE, world.max_distance, None), trace)
    log.warning("%s: step budget exhausted after %.2f m", world.name, s)
    return ClosedLoopResult(s, FailureEvent(FailureKind.NONE, s, None), trace)


# ---------------------------------------------------------------------------
# open loop


@dataclass
class OpenLoopCase:
    case_id: str
    frames: np.ndarray
    pose_history: PoseHistory
    gt_future: np.ndarray
    prompts: dict | None = None

    def __post_init__(self):
        self.gt_future = np.asarray(self.gt_future, dtype=np.float64)
        if self.gt_future.shape != (64, 3):
            raise ValueError(f"{self.case_id}: gt_future must be 64x3, got {self.gt_future.shape}")
        if not isinstance(self.pose_history, PoseHistory):
            self.pose_history = PoseHistory(self.pose_history)


Predictor = Callable[[OpenLoopCase, int], np.ndarray]


@dataclass
class OpenLoopReport:
    per_case: list[tuple[str, float]]
    skipped: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean([v for _, v in self.per_case])) if self.per_case else float("nan")

    def rows(self) -> list[tuple[str, float]]:
        return [*self.per_case, ("mean", self.mean)]


def eval_open_loop(dataset: Sequence, predictor: Predictor, k: int = 6, *,
                   loader: Callable[[object], OpenLoopCase] | None = None,
                   parallel: int = 1,
                   predictor_factory: Callable[[], Predictor] | None = None) -> OpenLoopReport:
    """minADE_k per case plus the mean.

    Items that are not :class:`OpenLoopCase` go through ``loader``; I/O and
    parse failures are logged, skipped and counted. With ``parallel > 1`` each
    worker thread builds its own predictor from ``predictor_factory``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cases: list[OpenLoopCase] = []
    skipped = 0
    for item in dataset:
        if isinstance(item, OpenLoopCase):
            cases.append(item)
            continue
        try:
            if loader is None:
                raise TypeError(f"no loader for {item!r}")
            cases.append(loader(item))
        except (OSError, ValueError, KeyError, TypeError) as e:
            log.warning("skipping open-loop case %s: %s", item, e)
            skipped += 1

    def score(case: OpenLoopCase, pred: Predictor) -> float:
        return min_ade(pred(case, k), case.gt_future)

    if parallel > 1 and len(cases) > 1:
        if predictor_factory is None:
            raise ValueError("parallel evaluation needs a predictor_factory")
        import threading

        local = threading.local()

        def work(case):
            if not hasattr(local, "pred"):
                local.pred = predictor_factory()
            return score(case, local.pred)

        with ThreadPoolExecutor(parallel) as ex:
            scores = list(ex.map(work, cases))
    else:
        scores = [score(c, predictor) for c in cases]
    return OpenLoopReport([(c.case_id, v) for c, v in zip(cases, scores)], skipped)
