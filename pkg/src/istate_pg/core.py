"""Trajectories, returns and seeded random streams shared by every module."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "StepRecord",
    "Trajectory",
    "RngStream",
    "make_rng",
    "episodic_return",
    "write_jsonl",
    "read_jsonl",
]


@dataclass(frozen=True)
class StepRecord:
    obs: int
    internal: int
    action: int
    reward: float
    log_prob_action: float = 0.0
    log_prob_internal: float = 0.0

    def __post_init__(self):
        # nan marks log-probs that were not stored (e.g. read back from JSON)
        for name in ("log_prob_action", "log_prob_internal"):
            value = getattr(self, name)
            if value > 0.0:
                raise ValueError(f"{name} must be <= 0, got {value}")


@dataclass(frozen=True)
class Trajectory:
    """One episode of (o_t, y_t, a_t, r_t) records.

    The reward of the final step already includes any terminal reward, so the
    episodic return is a plain sum.
    """

    steps: tuple[StepRecord, ...] = ()
    terminated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def obs(self) -> np.ndarray:
        return np.array([s.obs for s in self.steps], dtype=np.int64)

    @property
    def internal(self) -> np.ndarray:
        return np.array([s.internal for s in self.steps], dtype=np.int64)

    @property
    def action(self) -> np.ndarray:
        return np.array([s.action for s in self.steps], dtype=np.int64)

    @property
    def reward(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps], dtype=np.float64)

    def episodic_return(self) -> float:
        return episodic_return(self)

    def to_dict(self) -> dict:
        return {
            "obs": [s.obs for s in self.steps],
            "internal": [s.internal for s in self.steps],
            "action": [s.action for s in self.steps],
            "reward": [s.reward for s in self.steps],
            "terminated": self.terminated,
            "log_prob_action": [s.log_prob_action for s in self.steps],
            "log_prob_internal": [s.log_prob_internal for s in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        n = len(d["obs"])
        lpa = d.get("log_prob_action", [math.nan] * n)
        lpi = d.get("log_prob_internal", [math.nan] * n)
        steps = [
            StepRecord(int(o), int(y), int(a), float(r), float(la), float(li))
            for o, y, a, r, la, li in zip(
                d["obs"], d["internal"], d["action"], d["reward"], lpa, lpi
            )
        ]
        return cls(tuple(steps), bool(d["terminated"]))


def episodic_return(traj: Trajectory | Sequence[float]) -> float:
    """Undiscounted sum of rewards; 0.0 for an empty episode."""
    if isinstance(traj, Trajectory):
        rewards: Iterable[float] = (s.reward for s in traj.steps)
    else:
        rewards = traj
    return float(math.fsum(rewards))


class RngStream:
    """A deterministic random stream keyed by ``(seed, stream_id)``.

    Streams with different ``stream_id`` come from independent children of the
    same ``SeedSequence`` root, so a run can hand one stream to every
    environment without any of them sharing state.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, size=None) -> float | np.ndarray:
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def make_rng(seed: int, stream_id: int = 0) -> RngStream:
    return RngStream(seed, stream_id)


def write_jsonl(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w") as f:
        for traj in trajectories:
            f.write(json.dumps(traj.to_dict()) + "\n")


def read_jsonl(path: str | Path) -> list[Trajectory]:
    with open(path) as f:
        return [Trajectory.from_dict(json.loads(line)) for line in f if line.strip()]
