"""One request through the whole pipeline.

Run with ``python demos/01_first_inference.py``.
"""

# %% Load the bundled scenario: 4 cameras x 4 frames of procedural imagery and
# a 16-pose history of the ego car cruising straight at 5 m/s.
from minivla import Engine, InferenceRequest, LatencyComponent, load_scenario, bundled

scenario = load_scenario(bundled("demo_scenario.json"))
print("frames", scenario.frames.shape, "history", scenario.pose_history.poses.shape)

# %% The engine owns randomly initialised weights for a small model. Weights are
# seeded, so every run of this script produces the same numbers.
engine = Engine()
cfg = engine.config
print(f"decoder blocks {cfg.decoder_blocks}, hidden {cfg.hidden_dim}, kv_dim {cfg.kv_dim}")

# %% Ask for three trajectories that share one reasoning pass.
req = InferenceRequest(scenario.frames, scenario.pose_history, num_trajectories=3,
                       topology="single", max_new_tokens=16, sampler_seed=1)
result = engine.infer(req)

# The weights are untrained, so the "reasoning" is a random walk over the
# driving vocabulary. What matters here is its shape, not its meaning.
print("reasoning:", result.reasonings[0])
print("trajectories", result.trajectories.shape)
for lane, traj in enumerate(result.trajectories):
    x, y, yaw = traj[-1]
    print(f"  lane {lane}: ends at x={x:6.2f} m  y={y:6.2f} m  yaw={yaw:+.3f} rad")

# %% Where did the time go?
lat = result.latency
for c in LatencyComponent:
    print(f"  {c.value:<18} {lat[c]:8.2f} ms")
print(f"  {'total':<18} {lat.total_ms:8.2f} ms   ({lat.cot_tokens} reasoning tokens)")
print("counters", lat.counters)
