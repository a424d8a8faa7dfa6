"""Recording the refinement pass once and replaying it.

Pass 1 runs eagerly, pass 2 is recorded into a graph, and passes 3 to 10
replay it with a single dispatch each. A synthetic per-dispatch delay makes
the saved launch overhead visible in wall-clock time.
"""

# %%
from minivla import Engine, InferenceRequest, LatencyComponent, bundled, load_scenario

scenario = load_scenario(bundled("demo_scenario.json"))

for delay_us in (0, 20):
    print(f"\nsynthetic dispatch delay {delay_us} us")
    for executor in ("eager", "graph"):
        engine = Engine(dispatch_delay_ns=delay_us * 1000)
        r = engine.infer(InferenceRequest(scenario.frames, scenario.pose_history,
                                          executor=executor, max_new_tokens=8))
        modes = "".join(s.mode[0] for s in r.iterations)
        dispatches = [s.dispatches for s in r.iterations]
        print(f"  {executor:>5}: modes {modes}  dispatches {dispatches}")
        print(f"         action generation {r.latency[LatencyComponent.ACTION_GEN]:.1f} ms")

# %% The graph binds buffer addresses at record time. That only works when
# KV buffers stay put, so the combination with dynamic storage is refused.
from minivla import ConfigError

try:
    InferenceRequest(scenario.frames, scenario.pose_history, kv_strategy="dynamic",
                     executor="graph")
except ConfigError as e:
    print("\nrefused:", e)
