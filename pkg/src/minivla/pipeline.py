"""Four-stage inference: preprocessing, reasoning, action generation, postprocessing.

Two topologies produce ``N`` trajectories per request:

``multi``
    Inputs are replicated to a batch of ``N`` before vision encoding, so
    reasoning runs batched and yields ``N`` CoT sequences with their own KV.
``single``
    Reasoning runs once; its sealed KV cache is physically duplicated to
    ``N`` lanes right before action generation.

Each lane uses its own seed stream (request seed + lane index) for both
token sampling and action initialisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kvcache import STRATEGIES, KvCache, KvLayout, lane_fingerprints, replicate_for_batch
from .model import EXECUTORS, BoundModel, IterationStats, Model, ModelConfig, sample_token
from .profiler import LatencyComponent, LatencyReport, Profiler
from .substrate import Substrate
from .tokenizers import (
    EOS_ID,
    SYSTEM_PROMPT,
    USER_PROMPT,
    TextTokenizer,
    TokenSequence,
    TrajectoryTokenizer,
    patchify,
)

__all__ = [
    "DT",
    "TOPOLOGIES",
    "ConfigError",
    "StageError",
    "PoseHistory",
    "InferenceRequest",
    "ReasoningOutput",
    "InferenceResult",
    "Engine",
    "actions_to_trajectory",
    "initial_speed",
    "straight_history",
]

log = logging.getLogger(__name__)

DT = 0.1
TOPOLOGIES = ("multi", "single")
SAMPLING_MODES = ("greedy", "stochastic")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PoseHistory:
    poses: np.ndarray

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.shape != (16, 3):
            raise ValueError(f"pose history must be 16x3, got {self.poses.shape}")
        if not np.allclose(self.poses[-1], 0.0, atol=1e-6):
            raise ValueError("the last history pose must be the origin with zero yaw")


def straight_history(speed: float) -> PoseHistory:
    """History of a vehicle that drove straight along +x at constant speed."""
    t = np.arange(-15, 1) * DT
    poses = np.zeros((16, 3))
    poses[:, 0] = speed * t
    return PoseHistory(poses)


def initial_speed(history: PoseHistory | np.ndarray) -> float:
    p = history.poses if isinstance(history, PoseHistory) else np.asarray(history)
    return float(np.hypot(*(p[-1, :2] - p[-2, :2])) / DT)


@dataclass
class InferenceRequest:
    frames: np.ndarray
    pose_history: PoseHistory
    system_prompt: str = SYSTEM_PROMPT
    user_prompt: str = USER_PROMPT
    num_trajectories: int = 1
    topology: str = "single"
    kv_strategy: str = "static"
    executor: str = "graph"
    sampler_seed: int = 0
    init_seed: int = 0
    sampling: str = "stochastic"
    max_new_tokens: int | None = None
    force_tokens: int | None = None
    # one init seed per lane, overriding init_seed + lane
    lane_init_seeds: list[int] | None = None
    collect_fingerprints: bool = False

    def __post_init__(self):
        if not isinstance(self.pose_history, PoseHistory):
            self.pose_history = PoseHistory(self.pose_history)
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.num_trajectories < 1:
            raise ConfigError("num_trajectories must be >= 1")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}")
        if self.kv_strategy not in STRATEGIES:
            raise ConfigError(f"kv strategy must be one of {STRATEGIES}")
        if self.executor not in EXECUTORS:
            raise ConfigError(f"executor must be one of {EXECUTORS}")
        if self.executor == "graph" and self.kv_strategy != "static":
            raise ConfigError("the graph executor requires the static KV strategy "
                              "(captured commands need fixed KV buffer addresses)")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}")
        if self.frames.ndim != 5 or self.frames.shape[:2] != (4, 4) or self.frames.shape[-1] != 3:
            raise ConfigError(f"frames must be [4 cameras, 4 steps, H, W, 3], got {self.frames.shape}")
        if self.lane_init_seeds is not None and len(self.lane_init_seeds) != self.num_trajectories:
            raise ConfigError("lane_init_seeds must have one entry per trajectory")

    def init_seeds(self) -> list[int]:
        if self.lane_init_seeds is not None:
            return list(self.lane_init_seeds)
        return [self.init_seed + lane for lane in range(self.num_trajectories)]


@dataclass
class ReasoningOutput:
    cot_tokens: list[list[int]]
    kv: KvCache
    token_count: int
    prefill_hidden: np.ndarray
    prompt_len: int


@dataclass
class InferenceResult:
    reasonings: list[str]
    cot_tokens: list[list[int]]
    trajectories: np.ndarray  # [N, 64, 3]
    actions: np.ndarray  # [N, 64, 2]
    latency: LatencyReport
    iterations: list[IterationStats] = field(default_factory=list)
    lane_fingerprints: list[str] | None = None
    # substrate counter deltas of the action-generation stage alone
    action_counters: dict[str, int] = field(default_factory=dict)

    @property
    def counters(self) -> dict[str, int]:
        return dict(self.latency.counters)

    def data_dict(self) -> dict:
        """Deterministic part of the result (no wall-clock values)."""
        return {
            "reasonings": list(self.reasonings),
            "cot_tokens": [list(map(int, c)) for c in self.cot_tokens],
            "trajectories": self.trajectories.tolist(),
            "actions": self.actions.tolist(),
            "counters": self.counters,
        }


def actions_to_trajectory(actions, v0: float, dt: float = DT) -> np.ndarray:
    """Explicit-Euler unicycle rollout from the origin; pose i is the state after step i."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != 2:
        raise ValueError(f"actions must be [steps, 2], got {actions.shape}")
    if not np.all(np.isfinite(actions)):
        raise ValueError("non-finite actions")
    if v0 < 0:
        raise ValueError("initial speed must be >= 0")
    x = y = th = 0.0
    v = float(v0)
    out = np.empty((len(actions), 3))
    for i, (a, k) in enumerate(actions):
        x, y, th, v = (x + v * np.cos(th) * dt, y + v * np.sin(th) * dt,
                       th + k * v * dt, v + a * dt)
        out[i] = x, y, th
    return out


class Engine:
    """Owns model weights resident in one substrate; runs one request at a time."""

    def __init__(self, config: ModelConfig | None = None, model: Model | None = None,
                 dispatch_delay_ns: int = 0, matmul_kernel: str = "blas"):
        self.model = model or Model(config)
        self.config = self.model.config
        self.substrate = Substrate(dispatch_delay_ns, matmul_kernel)
        self.bound = BoundModel(self.model, self.substrate)
        c = self.config
        self.text_tokenizer = TextTokenizer(c.vocab_size, 3 * c.traj_bins)
        self.traj_tokenizer = TrajectoryTokenizer(base_id=c.traj_base_id, bins=c.traj_bins)

    # -- stage (i) ------------------------------------------------------------

    def preprocess(self, req: InferenceRequest) -> tuple[np.ndarray, TokenSequence]:
        patches = patchify(req.frames.reshape(16, *req.frames.shape[2:]), self.config.patch_size)
        text = (self.text_tokenizer.tokenize(req.system_prompt)
                + self.traj_tokenizer.tokenize(req.pose_history.poses)
                + self.text_tokenizer.tokenize(req.user_prompt))
        return patches, text

    # -- stage (ii) -----------------------------------------------------------

    def run_reasoning(self, req: InferenceRequest, patches: np.ndarray, text: TokenSequence,
                      prof: Profiler | None = None) -> ReasoningOutput:
        prof = prof or Profiler()
        c = self.config
        lanes = req.num_trajectories if req.topology == "multi" else 1
        limit = req.force_tokens if req.force_tokens is not None else (
            req.max_new_tokens if req.max_new_tokens is not None else c.max_new_tokens)
        with prof.section(LatencyComponent.REASONING_VISION):
            batch = np.broadcast_to(patches[None], (lanes,) + patches.shape)
            vis = self.bound.vision_encode(np.ascontiguousarray(batch))
        with prof.section(LatencyComponent.REASONING_PREFILL):
            ids = np.broadcast_to(text.ids[None], (lanes, len(text)))
            txt = self.bound.embed_tokens(ids)
            seq = self.bound.prog.op("concat", [vis, txt], "lm.seq", axis=1)
            prompt_len = self.substrate.shape(seq)[1]
            kv = KvCache(
                self.substrate,
                KvLayout(c.decoder_blocks, lanes, c.kv_dim, action_len=c.action_steps),
                req.kv_strategy,
                reasoning_capacity=prompt_len + limit,
            )
            hidden = self.bound.prefill(seq, kv)
        with prof.section(LatencyComponent.REASONING_DECODE):
            cot, m = self._decode(kv, hidden, lanes, limit, req)
            kv.seal()
        return ReasoningOutput(cot, kv, m, hidden, prompt_len)

    def _decode(self, kv: KvCache, hidden: np.ndarray, lanes: int, limit: int,
                req: InferenceRequest) -> tuple[list[list[int]], int]:
        rngs = [np.random.default_rng(req.sampler_seed + lane) for lane in range(lanes)]
        forced = req.force_tokens is not None
        logits = self.bound.logits(hidden)
        cot: list[list[int]] = [[] for _ in range(lanes)]
        done = [False] * lanes
        steps = 0
        while steps < limit:
            feed = []
            for lane in range(lanes):
                if done[lane]:
                    # finished lanes keep feeding the termination token
                    feed.append(EOS_ID)
                    continue
                lg = logits[lane]
                if forced:
                    lg = lg.copy()
                    lg[EOS_ID] = -np.inf
                tok = sample_token(lg, rngs[lane], req.sampling)
                if tok == EOS_ID:
                    done[lane] = True
                else:
                    cot[lane].append(tok)
                feed.append(tok)
            if all(done):
                break
            _, logits = self.bound.decode_step(kv, feed)
            steps += 1
        return cot, steps

    # -- stage (iii) ----------------------------------------------------------

    def run_action_generation(self, reasoning: ReasoningOutput, n: int, init_seeds, executor: str,
                              topology: str, on_iteration=None
                              ) -> tuple[np.ndarray, list[IterationStats], KvCache]:
        c = self.config
        init_seeds = list(init_seeds)
        if len(init_seeds) != n:
            raise ValueError("one init seed per lane is required")
        if topology == "single":
            kv = replicate_for_batch(reasoning.kv, n)
        else:
            kv = reasoning.kv
            if kv.layout.batch != n:
                raise ValueError(f"multi topology needs {n} reasoning lanes, got {kv.layout.batch}")
        init = np.stack([np.random.default_rng(s).standard_normal((c.action_steps, 2))
                         for s in init_seeds]).astype(np.float32)
        actions, iters = self.bound.diffusion_refine(init, kv, executor, on_iteration)
        return actions, iters, kv

    # -- full pipeline ----------------------------------------------------------

    def infer(self, req: InferenceRequest, prof: Profiler | None = None) -> InferenceResult:
        prof = prof or Profiler()
        s0 = self.substrate.stats()
        N = req.num_trajectories
        caches: list[KvCache] = []
        try:
            with prof.section("total"):
                with _stage("preprocessing"), prof.section(LatencyComponent.PREPROCESSING):
                    patches, text = self.preprocess(req)
                with _stage("reasoning"):
                    reasoning = self.run_reasoning(req, patches, text, prof)
                caches.append(reasoning.kv)
                fps = lane_fingerprints(reasoning.kv) if req.collect_fingerprints else None
                a0 = self.substrate.stats()
                with _stage("action_generation"), prof.section(LatencyComponent.ACTION_GEN):
                    actions, iters, akv = self.run_action_generation(
                        reasoning, N, req.init_seeds(), req.executor, req.topology)
                action_counters = (self.substrate.stats() - a0).as_dict()
                if akv is not reasoning.kv:
                    caches.append(akv)
                if req.collect_fingerprints and req.topology == "single":
                    fps = lane_fingerprints(akv)
                with _stage("postprocessing"), prof.section("postprocessing"):
                    v0 = initial_speed(req.pose_history)
                    trajectories = np.stack([actions_to_trajectory(a, v0) for a in actions])
                    cot = reasoning.cot_tokens
                    reasonings = [self.text_tokenizer.detokenize(t) for t in cot]
            counters = (self.substrate.stats() - s0).as_dict()
            counters["kv_bytes"] = akv.footprint_bytes()
        finally:
            for kv in caches:
                kv.release()
        report = prof.report
        report.counters = {k: counters[k] for k in ("alloc_count", "dispatch_count", "replay_count", "kv_bytes")}
        report.action_gen_iter_ms = [r.ms for r in iters]
        report.cot_tokens = reasoning.token_count
        return InferenceResult(reasonings, cot, trajectories, actions, report, iters, fps,
                               action_counters)


class _stage:
    """Re-raise any exception from the wrapped stage as a :class:`StageError`."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if ev is not None and not isinstance(ev, StageError) and isinstance(ev, Exception):
            raise StageError(self.name, ev) from ev
        return False
