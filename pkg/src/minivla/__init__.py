"""Desk-scale reasoning-to-action inference runtime."""

from .config import RunConfig, load_run_config
from .evalsim import (
    ClosedLoopWorld,
    EnginePolicy,
    FailureKind,
    OpenLoopCase,
    ScriptedPolicy,
    diversity,
    eval_open_loop,
    min_ade,
    simulate_closed_loop,
)
from .kvcache import KvCache, KvLayout, content_fingerprint, footprint_bytes, replicate_for_batch
from .model import BoundModel, Model, ModelConfig, sample_token
from .pipeline import (
    ConfigError,
    Engine,
    InferenceRequest,
    InferenceResult,
    PoseHistory,
    StageError,
    actions_to_trajectory,
    straight_history,
)
from .profiler import LatencyComponent, LatencyReport, Profiler, interleaved_reports
from .scenario import Scenario, bundled, bundled_world, load_scenario, procedural_frames
from .substrate import DispatchStats, ExecGraph, OpCommand, Substrate

__version__ = "0.1.0"
