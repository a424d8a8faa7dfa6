"""Run, profile and evaluate the reasoning-to-action pipeline from the shell.

Every command writes deterministic data files and, separately, wall-clock
timing files into ``--out``. Exit codes: 0 success, 1 I/O error,
2 configuration error, 3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .evalsim import (
    ClosedLoopWorld,
    EnginePolicy,
    ScriptedPolicy,
    eval_open_loop,
    simulate_closed_loop,
)
from .model import Model
from .pipeline import ConfigError, Engine, InferenceRequest, StageError
from .profiler import (
    LatencyComponent,
    ScalingReport,
    interleaved_reports,
    sweep_row,
    write_sweep_csv,
)
from .scenario import BUNDLED_WORLDS, Scenario, bundled, load_open_loop_dataset, load_scenario

log = logging.getLogger("minivla")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3

ACTIONGEN_VARIANTS = (
    ("baseline", "dynamic", "eager"),
    ("+static_kv", "static", "eager"),
    ("+graph", "static", "graph"),
)
ACTIONGEN_COLUMNS = ("variant", "n", "action_gen_ms", "alloc_count", "dispatch_count", "replay_count")


class InvariantError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _scenario(args) -> Scenario:
    return load_scenario(args.scenario or bundled("demo_scenario.json"))


def _engine(cfg: RunConfig, model: Model | None = None) -> Engine:
    return Engine(cfg.model, model, cfg.dispatch_delay_ns, cfg.matmul_kernel)


def _request(cfg: RunConfig, sc: Scenario, **over) -> InferenceRequest:
    return InferenceRequest(sc.frames, sc.pose_history, system_prompt=sc.system_prompt,
                            user_prompt=sc.user_prompt, **cfg.request_kwargs(**over))


def _timed(jobs: list[tuple[Engine, InferenceRequest]], cfg: RunConfig):
    thunks = [lambda prof, e=e, r=r: e.infer(r, prof) for e, r in jobs]
    return interleaved_reports(thunks, cfg.repeats, cfg.warmup, cfg.timing_statistic)


def cmd_generate(cfg: RunConfig, args) -> int:
    sc = _scenario(args)
    out = Path(cfg.out)
    res = _engine(cfg).infer(_request(cfg, sc))
    data = res.data_dict()
    data["kv_bytes"] = res.latency.counters["kv_bytes"]
    data["cot_token_count"] = res.latency.cot_tokens
    _dump_json(out / "result.json", data)
    _dump_json(out / "latency.json", res.latency.to_json_dict())
    log.info("wrote %s", out / "result.json")
    return EXIT_OK


def cmd_profile(cfg: RunConfig, args) -> int:
    if 1 not in cfg.sweep:
        raise ConfigError("profile sweep must include N=1")
    sc = _scenario(args)
    out = Path(cfg.out)
    topologies = [args.topology] if args.topology else ["multi", "single"]
    model = Model(cfg.model)
    rows, scaling, data, iter_rows = [], {}, {"runs": []}, []
    results: dict[tuple[str, int], object] = {}
    ns = sorted(set(cfg.sweep))
    engines = {topo: _engine(cfg, model) for topo in topologies}
    keys = [(topo, n) for topo in topologies for n in ns]
    timed = _timed([(engines[t], _request(cfg, sc, topology=t, num_trajectories=n)) for t, n in keys],
                   cfg)
    for topo in topologies:
        reports = {}
        for (t, n), (res, rep) in zip(keys, timed):
            if t != topo:
                continue
            results[topo, n] = res
            reports[n] = rep
            rows.append(sweep_row(topo, cfg.kv_strategy, cfg.executor, n, rep))
            for it, ms in enumerate(rep.action_gen_iter_ms, 1):
                mode = res.iterations[it - 1].mode
                iter_rows.append((topo, n, it, mode, f"{ms:.6f}"))
            data["runs"].append({
                "topology": topo, "n": n, "repeats": rep.repeats,
                "counters": dict(rep.counters), "cot_tokens": rep.cot_tokens,
                "iteration_modes": [r.mode for r in res.iterations],
                "trajectories_sha256": _digest(res.trajectories),
            })
        scaling[topo] = ScalingReport.from_reports(topo, reports).to_json_dict()
    if len(topologies) == 2:
        a, b = results["multi", 1], results["single", 1]
        data["topology_equivalence_n1"] = bool(
            a.trajectories.tobytes() == b.trajectories.tobytes()
            and a.cot_tokens == b.cot_tokens)
    (out / "sweep.csv").write_text(write_sweep_csv(rows))
    _dump_json(out / "scaling.json", scaling)
    _write_csv(out / "actiongen_iters.csv", ("topology", "n", "iteration", "mode", "ms"), iter_rows)
    _dump_json(out / "profile_data.json", data)
    return EXIT_OK


def _diff_report(name: str, ref: np.ndarray, got: np.ndarray) -> str:
    d = np.abs(ref.astype(np.float64) - got.astype(np.float64))
    idx = np.unravel_index(int(np.argmax(d)), d.shape)
    return (f"variant {name} diverges from baseline: {int((d > 0).sum())} differing values, "
            f"max |diff| {float(d.max()):.3e} at {tuple(map(int, idx))}")


def cmd_compare_actiongen(cfg: RunConfig, args) -> int:
    sc = _scenario(args)
    out = Path(cfg.out)
    model = Model(cfg.model)
    timing_rows, data = [], {"runs": []}
    for n in sorted(set(cfg.sweep)):
        jobs = [(_engine(cfg, model), _request(cfg, sc, num_trajectories=n, kv_strategy=kv, executor=ex))
                for _, kv, ex in ACTIONGEN_VARIANTS]
        timed = _timed(jobs, cfg)
        ref = timed[0][0].trajectories
        for (name, kv, ex), (res, rep) in zip(ACTIONGEN_VARIANTS, timed):
            if ref.tobytes() != res.trajectories.tobytes():
                raise InvariantError(_diff_report(name, ref, res.trajectories))
            c = res.action_counters
            timing_rows.append((name, n, f"{rep[LatencyComponent.ACTION_GEN]:.6f}", c["alloc_count"],
                                c["dispatch_count"], c["replay_count"]))
            data["runs"].append({
                "variant": name, "n": n, "kv_strategy": kv, "executor": ex,
                "action_counters": {k: c[k] for k in ("alloc_count", "dispatch_count", "replay_count")},
                "iterations": [{"iteration": r.iteration, "mode": r.mode, "dispatches": r.dispatches,
                                "replays": r.replays, "allocs": r.allocs, "kv_allocs": r.kv_allocs}
                               for r in res.iterations],
                "trajectories_sha256": _digest(res.trajectories),
            })
    data["equivalent"] = True
    _write_csv(out / "actiongen.csv", ACTIONGEN_COLUMNS, timing_rows)
    _dump_json(out / "actiongen_data.json", data)
    return EXIT_OK


def _gt_predictor(case, k):
    return np.repeat(case.gt_future[None], k, 0)


def cmd_eval(cfg: RunConfig, args, explicit: set[str]) -> int:
    out = Path(cfg.out)
    k = cfg.num_trajectories if "num_trajectories" in explicit else 6
    if args.mode == "open":
        path = args.path[0] if args.path else bundled("open_loop_cases.json")
        items, loader = load_open_loop_dataset(path)
        if args.predictor == "gt":
            pred, factory = _gt_predictor, lambda: _gt_predictor
        else:
            model = Model(cfg.model)

            def factory():
                engine = _engine(cfg, model)

                def predict(case, kk):
                    req = InferenceRequest(case.frames, case.pose_history,
                                           **cfg.request_kwargs(num_trajectories=kk))
                    return engine.infer(req).trajectories
                return predict
            pred = factory()
        rep = eval_open_loop(items, pred, k, loader=loader, parallel=cfg.parallel,
                             predictor_factory=factory)
        if rep.skipped:
            log.warning("%d open-loop case(s) skipped", rep.skipped)
        _write_csv(out / "open_loop.csv", ("case_id", "min_ade_m"),
                   [(cid, repr(float(v))) for cid, v in rep.rows()])
        return EXIT_OK
    paths = args.path or [bundled(f"world_{w}.json") for w in BUNDLED_WORLDS]
    rows, dtfs = [], []
    model = None if args.policy == "scripted" else Model(cfg.model)
    sc = None if args.policy == "scripted" else _scenario(args)
    for p in paths:
        world = ClosedLoopWorld.load(p)
        if args.policy == "scripted":
            sp = world.scripted_policy or {}
            policy = ScriptedPolicy(float(sp.get("accel", 0.0)), float(sp.get("curvature", 0.0)))
        else:
            policy = EnginePolicy(_engine(cfg, model), sc.frames, **cfg.request_kwargs())
        res = simulate_closed_loop(world, policy, cfg.selector)
        ev = res.failure
        rows.append((world.name, repr(float(res.dtf_m)), ev.kind.value,
                     "" if ev.step is None else ev.step))
        dtfs.append(res.dtf_m)
    rows.append(("mean", repr(float(np.mean(dtfs))), "", ""))
    _write_csv(out / "closed_loop.csv", ("scenario_id", "dtf_m", "failure_kind", "failure_step"), rows)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--scenario", help="scenario JSON (default: bundled demo)")
    common.add_argument("--num-traj", type=int, dest="num_trajectories")
    common.add_argument("--topology", choices=("multi", "single"))
    common.add_argument("--kv", choices=("dynamic", "static"), dest="kv_strategy")
    common.add_argument("--executor", choices=("eager", "graph"))
    common.add_argument("--seed", type=int, help="base seed for token sampling and action init")
    common.add_argument("--repeats", type=int)
    common.add_argument("--sweep", help="comma-separated N values, e.g. 1,2,6")
    common.add_argument("--out", help="output directory")
    common.add_argument("--parallel", type=int, help="worker count for open-loop eval")

    p = argparse.ArgumentParser(prog="minivla", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="run one inference request")
    sub.add_parser("profile", parents=[common], help="latency sweep over N")
    sub.add_parser("compare-actiongen", parents=[common],
                   help="action-generation latency of baseline, +static_kv and +graph")
    ev = sub.add_parser("eval", parents=[common], help="open- or closed-loop evaluation")
    ev.add_argument("mode", choices=("open", "closed"))
    ev.add_argument("path", nargs="*", help="dataset (open) or world files (closed)")
    ev.add_argument("--predictor", choices=("engine", "gt"), default="engine",
                    help="open loop: 'gt' returns ground truth (harness check)")
    ev.add_argument("--policy", choices=("engine", "scripted"), default="engine",
                    help="closed loop: 'scripted' uses the world's scripted_policy block")
    ev.add_argument("--selector", choices=("lane0", "min_lateral"))
    return p


def _resolve_config(args) -> tuple[RunConfig, set[str]]:
    cfg, explicit = load_run_config(args.config)
    over = {
        "num_trajectories": args.num_trajectories,
        "kv_strategy": args.kv_strategy,
        "executor": args.executor,
        "sampler_seed": args.seed,
        "init_seed": args.seed,
        "repeats": args.repeats,
        "out": args.out,
        "parallel": args.parallel,
        "selector": getattr(args, "selector", None),
    }
    if args.topology and args.command != "profile":
        over["topology"] = args.topology
    if args.sweep:
        try:
            over["sweep"] = tuple(int(t) for t in args.sweep.split(",") if t.strip())
        except ValueError as e:
            raise ConfigError(f"bad --sweep value {args.sweep!r}") from e
    explicit |= {k for k, v in over.items() if v is not None}
    return cfg.override(**over), explicit


def _setup_logging() -> None:
    level = os.environ.get("MINIVLA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # eval paths may follow options, which a greedy positional cannot pick up
    stray = [a for a in extra if a.startswith("-")]
    if stray or (extra and args.command != "eval"):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    if extra:
        args.path = [*args.path, *extra]
    try:
        cfg, explicit = _resolve_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        if args.command == "generate":
            return cmd_generate(cfg, args)
        if args.command == "profile":
            return cmd_profile(cfg, args)
        if args.command == "compare-actiongen":
            return cmd_compare_actiongen(cfg, args)
        return cmd_eval(cfg, args, explicit)
    except ConfigError as e:
        print(f"minivla: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        if isinstance(e.cause, ConfigError):
            print(f"minivla: configuration error: {e}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"minivla: internal error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except InvariantError as e:
        print(f"minivla: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (OSError, ValueError, KeyError) as e:
        # unreadable or malformed input files
        print(f"minivla: I/O error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
