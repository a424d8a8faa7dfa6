"""How latency grows with the number of sampled trajectories.

``multi`` repeats the whole reasoning pass per trajectory (batched);
``single`` reasons once and hands the same KV context to every sample.
"""

# %%
from minivla import Engine, InferenceRequest, LatencyComponent as C, bundled, load_scenario
from minivla.profiler import actiongen_proportion, interleaved_reports

scenario = load_scenario(bundled("demo_scenario.json"))
engine = Engine()
ns = (1, 2, 4, 6)
keys = [(t, n) for t in ("single", "multi") for n in ns]


def job(topology, n):
    req = InferenceRequest(scenario.frames, scenario.pose_history, topology=topology,
                           num_trajectories=n, max_new_tokens=16)
    return lambda prof: engine.infer(req, prof)


# Repeats run round-robin over all settings so machine noise is shared evenly.
reports = dict(zip(keys, (rep for _, rep in interleaved_reports([job(*k) for k in keys], 5))))

# %%
cols = (C.REASONING_VISION, C.REASONING_PREFILL, C.REASONING_DECODE, C.ACTION_GEN)
print(f"{'':>10}" + "".join(f"{c.value:>19}" for c in cols) + "   action share")
for t, n in keys:
    rep = reports[t, n]
    print(f"{t:>7} N={n}" + "".join(f"{rep[c]:17.1f}ms" for c in cols)
          + f"   {100 * actiongen_proportion(rep):5.1f}%")

# %% Scaling factor: latency at the largest N over latency at N=1.
for t in ("single", "multi"):
    f = {c.value: reports[t, ns[-1]][c] / reports[t, 1][c] for c in cols}
    print(t, {k: round(v, 2) for k, v in f.items()})
