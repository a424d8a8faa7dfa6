"""Open-loop displacement metrics and closed-loop distance to failure."""

# %% Open loop: compare k samples against the recorded future and keep the best.
import numpy as np

from minivla import (Engine, EnginePolicy, InferenceRequest, ScriptedPolicy, bundled,
                     bundled_world, diversity, eval_open_loop, load_scenario,
                     simulate_closed_loop)
from minivla.scenario import BUNDLED_WORLDS, load_open_loop_dataset

engine = Engine()
items, loader = load_open_loop_dataset(bundled("open_loop_cases.json"))


def predict(case, k):
    req = InferenceRequest(case.frames, case.pose_history, num_trajectories=k, max_new_tokens=8)
    trajs = engine.infer(req).trajectories
    print(f"  {case.case_id:<16} sample diversity {diversity(trajs):6.2f} m")
    return trajs


report = eval_open_loop(items, predict, k=6, loader=loader)
for case_id, value in report.rows():
    print(f"minADE_6 {case_id:<16} {value:7.3f} m")
# Untrained weights put these far from zero; the ground-truth stub in the
# test suite pins the metric itself.

# %% Closed loop with scripted drivers: constant acceleration and curvature.
for name in BUNDLED_WORLDS:
    world = bundled_world(name)
    sp = world.scripted_policy or {}
    res = simulate_closed_loop(world, ScriptedPolicy(sp.get("accel", 0.0), sp.get("curvature", 0.0)))
    print(f"{name:<15} DTF {res.dtf_m:6.2f} m  {res.failure.kind.value:<12} step {res.failure.step}")

# %% Closed loop with the full pipeline replanning every half second.
scenario = load_scenario(bundled("demo_scenario.json"))
world = bundled_world("straight")
policy = EnginePolicy(engine, scenario.frames, num_trajectories=2, max_new_tokens=8)
res = simulate_closed_loop(world, policy, selector="min_lateral")
lat = np.array([row["lateral"] for row in res.trace])
print(f"engine policy: DTF {res.dtf_m:.2f} m, {res.failure.kind.value}, "
      f"max |lateral| {np.abs(lat).max():.2f} m over {len(res.trace)} steps")
