"""Scenario, open-loop dataset and bundled-fixture loading.

A scenario file is JSON::

    {
      "frames": <nested 4x4xHxWx3 list>
              | {"path": "frames.f32", "shape": [4, 4, H, W, 3]}
              | {"procedural": {"seed": 0, "height": 56, "width": 56}},
      "past_poses": [[x, y, yaw], ...16 rows],
      "gt_future": [[x, y, yaw], ...64 rows],      # optional
      "prompts": {"system": "...", "user": "..."}  # optional
    }

Raw frame files hold little-endian float32 values in C order. Relative paths
resolve against the scenario file's directory.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .evalsim import ClosedLoopWorld, OpenLoopCase
from .pipeline import PoseHistory
from .tokenizers import SYSTEM_PROMPT, USER_PROMPT

__all__ = [
    "Scenario",
    "procedural_frames",
    "load_scenario",
    "scenario_from_dict",
    "load_open_loop_dataset",
    "bundled",
    "BUNDLED_WORLDS",
    "bundled_world",
]

FRAME_LEAD = (4, 4)


def procedural_frames(seed: int = 0, height: int = 56, width: int = 56) -> np.ndarray:
    """Deterministic synthetic camera frames in ``[0, 1]``, shape ``[4, 4, H, W, 3]``.

    Each camera sees a sky/road gradient with a lane stripe and a box that
    drifts across the four timesteps.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    out = np.empty(FRAME_LEAD + (height, width, 3), dtype=np.float32)
    for cam in range(4):
        tint = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
        box = rng.uniform(0.2, 0.7, size=2)
        drift = rng.uniform(-0.05, 0.05, size=2)
        for t in range(4):
            img = np.where(yy[..., None] < 0.45, tint * (1 - yy[..., None]), 0.3 + 0.2 * yy[..., None])
            stripe = np.abs(xx - 0.5 - 0.3 * (yy - 0.5) * (cam - 1.5) / 1.5) < 0.02
            img = np.where((stripe & (yy > 0.45))[..., None], 0.95, img)
            cy, cx = box + drift * t
            inside = (np.abs(yy - cy) < 0.08) & (np.abs(xx - cx) < 0.1)
            img = np.where(inside[..., None], np.float32([0.8, 0.1, 0.1]), img)
            out[cam, t] = img
    return out


@dataclass
class Scenario:
    frames: np.ndarray
    pose_history: PoseHistory
    gt_future: np.ndarray | None = None
    system_prompt: str = SYSTEM_PROMPT
    user_prompt: str = USER_PROMPT
    name: str = "scenario"

    def to_case(self, case_id: str | None = None) -> OpenLoopCase:
        if self.gt_future is None:
            raise ValueError(f"{self.name}: scenario has no gt_future")
        return OpenLoopCase(case_id or self.name, self.frames, self.pose_history, self.gt_future,
                            {"system": self.system_prompt, "user": self.user_prompt})


def _load_frames(spec, base: Path) -> np.ndarray:
    if isinstance(spec, dict):
        if "procedural" in spec:
            return procedural_frames(**spec["procedural"])
        if "path" in spec:
            shape = tuple(int(d) for d in spec["shape"])
            raw = np.fromfile(base / spec["path"], dtype="<f4")
            if raw.size != math.prod(shape):
                raise ValueError(f"frame file holds {raw.size} values, shape {shape} needs {math.prod(shape)}")
            return raw.reshape(shape).astype(np.float32)
        raise ValueError("frames object needs 'path' or 'procedural'")
    return np.asarray(spec, dtype=np.float32)


def scenario_from_dict(d: dict, base: str | os.PathLike = ".", name: str = "scenario") -> Scenario:
    frames = _load_frames(d["frames"], Path(base))
    if frames.ndim != 5 or frames.shape[:2] != FRAME_LEAD or frames.shape[-1] != 3:
        raise ValueError(f"frames must be [4, 4, H, W, 3], got {frames.shape}")
    prompts = d.get("prompts") or {}
    gt = d.get("gt_future")
    return Scenario(
        frames=frames,
        pose_history=PoseHistory(d["past_poses"]),
        gt_future=None if gt is None else np.asarray(gt, dtype=np.float64),
        system_prompt=prompts.get("system", SYSTEM_PROMPT),
        user_prompt=prompts.get("user", USER_PROMPT),
        name=d.get("name", name),
    )


def load_scenario(path: str | os.PathLike) -> Scenario:
    path = Path(path)
    with open(path) as fh:
        d = json.load(fh)
    return scenario_from_dict(d, path.parent, path.stem)


def load_open_loop_dataset(path: str | os.PathLike) -> tuple[list, Callable[[dict], OpenLoopCase]]:
    """Return ``(items, loader)`` for :func:`minivla.evalsim.eval_open_loop`.

    The dataset file is ``{"cases": [...]}`` where each entry is either an
    inline scenario object with ``case_id`` and ``gt_future`` or
    ``{"case_id": ..., "scenario": "relative/path.json"}``.
    """
    path = Path(path)
    with open(path) as fh:
        d = json.load(fh)
    base = path.parent

    def loader(entry) -> OpenLoopCase:
        cid = str(entry["case_id"])
        if "scenario" in entry:
            sc = load_scenario(base / entry["scenario"])
        else:
            sc = scenario_from_dict(entry, base, cid)
        return sc.to_case(cid)

    return list(d["cases"]), loader


BUNDLED_WORLDS = ("straight", "curved_failure", "obstacle")


def bundled(name: str) -> Path:
    """Path of a bundled fixture, e.g. ``bundled("demo_scenario.json")``."""
    p = Path(str(resources.files("minivla") / "data" / name))
    if not p.exists():
        raise FileNotFoundError(name)
    return p


def bundled_world(name: str) -> ClosedLoopWorld:
    return ClosedLoopWorld.load(bundled(f"world_{name}.json"))
