"""Run configuration: model sizes plus request and harness settings.

JSON schema (every key optional; defaults shown by ``RunConfig().to_dict()``)::

    {
      "model": {<ModelConfig fields>},
      "topology": "single", "kv_strategy": "static", "executor": "graph",
      "num_trajectories": 1, "sampler_seed": 0, "init_seed": 0,
      "sampling": "stochastic", "max_new_tokens": 24,
      "repeats": 10, "warmup": 1, "timing_statistic": "min",
      "sweep": [1, 2, 3, 4, 5, 6],
      "out": "out", "dispatch_delay_ns": 0, "matmul_kernel": "blas",
      "selector": "lane0", "parallel": 1
    }

Command-line flags override file values.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

from .evalsim import SELECTORS
from .kvcache import STRATEGIES
from .model import EXECUTORS, ModelConfig
from .pipeline import SAMPLING_MODES, TOPOLOGIES, ConfigError
from .profiler import TIMING_STATISTICS
from .substrate import MATMUL_KERNELS

__all__ = ["RunConfig", "load_run_config"]


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    topology: str = "single"
    kv_strategy: str = "static"
    executor: str = "graph"
    num_trajectories: int = 1
    sampler_seed: int = 0
    init_seed: int = 0
    sampling: str = "stochastic"
    # generation cap for runs; the model's own max_new_tokens bounds it
    max_new_tokens: int | None = 24
    repeats: int = 10
    warmup: int = 1
    timing_statistic: str = "min"
    sweep: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    out: str = "out"
    dispatch_delay_ns: int = 0
    matmul_kernel: str = "blas"
    selector: str = "lane0"
    parallel: int = 1

    def __post_init__(self):
        object.__setattr__(self, "sweep", tuple(int(n) for n in self.sweep))
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.topology in TOPOLOGIES, f"topology must be one of {TOPOLOGIES}"),
            (self.kv_strategy in STRATEGIES, f"kv_strategy must be one of {STRATEGIES}"),
            (self.executor in EXECUTORS, f"executor must be one of {EXECUTORS}"),
            (self.sampling in SAMPLING_MODES, f"sampling must be one of {SAMPLING_MODES}"),
            (self.matmul_kernel in MATMUL_KERNELS, f"matmul_kernel must be one of {MATMUL_KERNELS}"),
            (self.selector in SELECTORS, f"selector must be one of {tuple(SELECTORS)}"),
            (self.timing_statistic in TIMING_STATISTICS,
             f"timing_statistic must be one of {tuple(TIMING_STATISTICS)}"),
            (self.num_trajectories >= 1, "num_trajectories must be >= 1"),
            (self.repeats >= 1, "repeats must be >= 1"),
            (self.warmup >= 0, "warmup must be >= 0"),
            (self.parallel >= 1, "parallel must be >= 1"),
            (len(self.sweep) > 0 and min(self.sweep) >= 1, "sweep must be a non-empty list of N >= 1"),
            (self.max_new_tokens is None or 0 <= self.max_new_tokens <= self.model.max_new_tokens,
             "max_new_tokens must lie in [0, model.max_new_tokens]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.executor == "graph" and self.kv_strategy != "static":
            raise ConfigError("executor 'graph' requires kv_strategy 'static' "
                              "(captured commands need fixed KV buffer addresses)")

    def request_kwargs(self, **over) -> dict:
        kw = dict(
            num_trajectories=self.num_trajectories,
            topology=self.topology,
            kv_strategy=self.kv_strategy,
            executor=self.executor,
            sampler_seed=self.sampler_seed,
            init_seed=self.init_seed,
            sampling=self.sampling,
            max_new_tokens=self.max_new_tokens,
        )
        kw.update(over)
        return kw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["sweep"] = list(self.sweep)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "model" in d:
                d["model"] = ModelConfig.from_dict(d["model"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def override(self, **values) -> RunConfig:
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        try:
            return replace(self, **values)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e


def load_run_config(path: str | os.PathLike | None) -> tuple[RunConfig, set[str]]:
    """Read a config file; returns the config and the keys the file set."""
    if path is None:
        return RunConfig(), set()
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return RunConfig.from_dict(d), set(d)
