"""Batched rollouts and the three training loops.

Every environment in a batch owns an :class:`RngStream`.  Per episode it draws
one ``(horizon + 1, 3)`` block of uniforms (environment noise, internal-state
draw, action draw), and the batch is then stepped in lockstep.  Results depend
only on the seed and stream ids, never on how many worker threads run the
rollout chunks.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import RngStream, StepRecord, Trajectory, make_rng
from .envs import DEFAULT_HORIZON, PomdpEnv, make_env
from .policy import Adam, JointPolicy, save_checkpoint

__all__ = [
    "MODES",
    "DEFAULT_INTERNAL_STATES",
    "ENV_DEFAULTS",
    "TrainConfig",
    "RolloutBatch",
    "LearningCurve",
    "NonFiniteError",
    "TrainResult",
    "collect_batch",
    "collect_rollout",
    "batch_grad",
    "make_optimizers",
    "train_step",
    "train",
    "evaluate",
    "env_streams",
]

log = logging.getLogger(__name__)

MODES = ("reinforce", "separate", "end_to_end")
DEFAULT_INTERNAL_STATES = {"heaven_hell": 2, "tiger": 10}
# per-environment defaults for the exploration knobs left as None in TrainConfig
ENV_DEFAULTS = {
    "heaven_hell": {"baseline": True, "entropy": 0.01, "entropy_internal": 0.0, "memory_init": 0.9},
    "tiger": {"baseline": True, "entropy": 0.02, "entropy_internal": 0.01, "memory_init": 0.0},
}
ROLLOUT_CHUNK = 500
EVAL_STREAM_BASE = 1 << 32


class NonFiniteError(FloatingPointError):
    """Parameters or gradients became non-finite during training."""


@dataclass
class TrainConfig:
    env_name: str
    mode: str = "end_to_end"
    num_internal_states: int | None = None
    batch_envs: int = 100
    num_updates: int = 2000
    horizon: int = DEFAULT_HORIZON
    step_size: float = 1e-2
    step_size_internal: float | None = None
    seed: int = 0
    baseline: bool | None = None
    eval_every: int = 10
    hidden_width: int = 32
    shared_trunk: bool = False
    init_scale: float = 0.05
    entropy: float | None = None
    entropy_internal: float | None = None
    memory_init: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.env_name not in DEFAULT_INTERNAL_STATES:
            raise ValueError(f"unknown environment {self.env_name!r}")
        if self.mode == "reinforce":
            if self.num_internal_states not in (None, 1):
                raise ValueError(
                    "mode 'reinforce' uses no memory: num_internal_states must be 1, "
                    f"got {self.num_internal_states}"
                )
            self.num_internal_states = 1
        elif self.num_internal_states is None:
            self.num_internal_states = DEFAULT_INTERNAL_STATES[self.env_name]
        if self.num_internal_states < 1:
            raise ValueError("num_internal_states must be >= 1")
        if self.shared_trunk and self.mode != "end_to_end":
            raise ValueError("shared_trunk is only available in end_to_end mode")
        if self.batch_envs < 1:
            raise ValueError("batch_envs must be >= 1")
        if self.num_updates < 0 or self.eval_every < 1 or self.horizon < 0:
            raise ValueError("num_updates/horizon must be >= 0 and eval_every >= 1")
        for key, value in ENV_DEFAULTS[self.env_name].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.entropy < 0 or self.entropy_internal < 0:
            raise ValueError("entropy coefficients must be >= 0")
        if not 0.0 <= self.memory_init < 1.0:
            raise ValueError("memory_init must lie in [0, 1)")
        if self.step_size_internal is None:
            self.step_size_internal = self.step_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "env_name" not in d:
            raise ValueError("config is missing required key 'env_name'")
        return cls(**d)


@dataclass
class RolloutBatch:
    """Padded arrays for ``B`` episodes of at most ``T`` steps (padding is -1)."""

    obs: np.ndarray
    internal: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    log_prob_action: np.ndarray
    log_prob_internal: np.ndarray
    length: np.ndarray
    terminated: np.ndarray
    null_obs: int

    def __len__(self) -> int:
        return len(self.length)

    @property
    def returns(self) -> np.ndarray:
        return self.reward.sum(axis=1)

    def trajectory(self, i: int) -> Trajectory:
        n = int(self.length[i])
        steps = [
            StepRecord(
                int(self.obs[i, t]),
                int(self.internal[i, t]),
                int(self.action[i, t]),
                float(self.reward[i, t]),
                float(self.log_prob_action[i, t]),
                float(self.log_prob_internal[i, t]),
            )
            for t in range(n)
        ]
        return Trajectory(tuple(steps), bool(self.terminated[i]))

    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(len(self))]

    @classmethod
    def concat(cls, parts: list["RolloutBatch"]) -> "RolloutBatch":
        names = ("obs", "internal", "action", "reward", "log_prob_action",
                 "log_prob_internal", "length", "terminated")
        return cls(*(np.concatenate([getattr(p, n) for p in parts]) for n in names),
                   null_obs=parts[0].null_obs)


def _rollout_chunk(env: PomdpEnv, policy: JointPolicy, rngs, horizon: int, greedy: bool):
    B, T = len(rngs), horizon
    U = np.stack([r.random((T + 1, 3)) for r in rngs])
    obs_rec = np.full((B, T), -1, dtype=np.int64)
    y_rec = np.full((B, T), -1, dtype=np.int64)
    a_rec = np.full((B, T), -1, dtype=np.int64)
    r_rec = np.zeros((B, T))
    lpa_rec = np.zeros((B, T))
    lpi_rec = np.zeros((B, T))
    length = np.zeros(B, dtype=np.int64)
    terminated = np.zeros(B, dtype=bool)

    log_pi, log_xi = policy.log_prob_tables()
    cdf_pi, cdf_xi = np.cumsum(np.exp(log_pi), axis=-1), np.cumsum(np.exp(log_xi), axis=-1)
    state = env.initial(U[:, 0, 0])
    obs = env.observe_initial(state)
    o_prev = np.full(B, policy.null_obs, dtype=np.int64)
    y_prev = np.zeros(B, dtype=np.int64)
    alive = np.ones(B, dtype=bool)
    for t in range(T):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        u = U[idx, t + 1]
        if t == 0:
            y = np.zeros(len(idx), dtype=np.int64)
            lpi = np.zeros(len(idx))
        else:
            op, yp = o_prev[idx], y_prev[idx]
            if greedy:
                y = log_xi[op, yp].argmax(axis=1)
            else:
                y = _draw(cdf_xi[op, yp], u[:, 1])
            lpi = log_xi[op, yp, y]
        o = obs[idx]
        a = log_pi[o, y].argmax(axis=1) if greedy else _draw(cdf_pi[o, y], u[:, 2])
        lpa = log_pi[o, y, a]

        new_state, new_obs, reward, terminal = env.transition(state[idx], a, u[:, 0])
        obs_rec[idx, t] = obs[idx]
        y_rec[idx, t] = y
        a_rec[idx, t] = a
        r_rec[idx, t] = reward
        lpa_rec[idx, t] = lpa
        lpi_rec[idx, t] = lpi
        length[idx] += 1

        state[idx] = new_state
        o_prev[idx] = obs[idx]
        y_prev[idx] = y
        obs[idx] = new_obs
        terminated[idx] = terminal
        alive[idx] = ~terminal
    return RolloutBatch(obs_rec, y_rec, a_rec, r_rec, lpa_rec, lpi_rec, length,
                        terminated, policy.null_obs)


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum((cdf <= u[:, None]).sum(axis=1), cdf.shape[1] - 1)


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("ISTATE_PG_THREADS", "1")))
    except ValueError:
        return 1


def collect_batch(
    env: PomdpEnv,
    policy: JointPolicy,
    rngs: list[RngStream],
    horizon: int,
    greedy: bool = False,
    workers: int | None = None,
) -> RolloutBatch:
    """One episode per stream, stepped in fixed-size chunks."""
    if policy.num_observations != env.num_observations or policy.num_actions != env.num_actions:
        raise ValueError(f"policy dimensions do not match environment {env.name!r}")
    chunks = [rngs[i:i + ROLLOUT_CHUNK] for i in range(0, len(rngs), ROLLOUT_CHUNK)]
    workers = _num_workers() if workers is None else workers
    run = lambda c: _rollout_chunk(env, policy, c, horizon, greedy)  # noqa: E731
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return RolloutBatch.concat(parts)


def collect_rollout(
    env: PomdpEnv, policy: JointPolicy, horizon: int, rng: RngStream, greedy: bool = False
) -> Trajectory:
    """Run one episode from a fresh reset of ``env``'s dynamics."""
    return collect_batch(env, policy, [rng], horizon, greedy, workers=1).trajectory(0)


def batch_grad(policy: JointPolicy, batch: RolloutBatch, weights: np.ndarray, which: str,
               entropy: float = 0.0, entropy_internal: float = 0.0):
    """``sum_i weights[i] * sum_t grad log(factor)`` over all episodes in ``batch``."""
    B, T = batch.obs.shape
    steps = np.arange(T)[None, :] < batch.length[:, None]
    w = np.broadcast_to(np.asarray(weights, float)[:, None], (B, T))
    action_rows = (batch.obs[steps], batch.internal[steps], batch.action[steps], w[steps])
    later = steps[:, 1:]
    internal_rows = (
        batch.obs[:, :-1][later],
        batch.internal[:, :-1][later],
        batch.internal[:, 1:][later],
        w[:, 1:][later],
    )
    return policy.rows_grad(which, action_rows, internal_rows, entropy, entropy_internal)


def make_optimizers(policy: JointPolicy, config: TrainConfig) -> list[tuple[slice, Adam]]:
    """One Adam over all parameters, or one per head for the separate mode."""
    if config.mode == "separate":
        return [
            (policy.action_slice, Adam(policy.action_slice.stop - policy.action_slice.start,
                                       config.step_size)),
            (policy.internal_slice, Adam(policy.internal_slice.stop - policy.internal_slice.start,
                                         config.step_size_internal)),
        ]
    return [(slice(0, policy.size), Adam(policy.size, config.step_size))]


def env_streams(seed: int, n: int, base: int = 1) -> list[RngStream]:
    return [make_rng(seed, base + i) for i in range(n)]


def train_step(
    policy: JointPolicy,
    env: PomdpEnv,
    rngs: list[RngStream],
    mode: str,
    optimizers: list[tuple[slice, Adam]],
    horizon: int,
    baseline: bool = False,
    update_index: int = 0,
    entropy: float = 0.0,
    entropy_internal: float = 0.0,
) -> tuple[float, RolloutBatch]:
    """Collect one rollout per stream and apply one update; returns the batch mean return."""
    if not rngs:
        raise ValueError("train_step needs at least one environment")
    batch = collect_batch(env, policy, rngs, horizon)
    returns = batch.returns
    weights = returns - returns.mean() if baseline else returns
    n = len(batch)
    if mode == "separate":
        grads = [batch_grad(policy, batch, weights, "action_only", entropy) / n,
                 batch_grad(policy, batch, weights, "internal_only", 0.0, entropy_internal) / n]
    elif mode == "end_to_end":
        grads = [batch_grad(policy, batch, weights, "joint", entropy, entropy_internal) / n]
    elif mode == "reinforce":
        grads = [batch_grad(policy, batch, weights, "action_only", entropy) / n]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if len(grads) != len(optimizers):
        raise ValueError(f"mode {mode!r} needs {len(grads)} optimizer(s)")
    for grad, (sl, opt) in zip(grads, optimizers):
        try:
            opt.step(policy.params[sl], grad[sl])
        except FloatingPointError as exc:
            raise NonFiniteError(f"update {update_index}: {exc}") from exc
    if not np.all(np.isfinite(policy.params)):
        raise NonFiniteError(f"update {update_index}: parameters became non-finite")
    return float(returns.mean()), batch


@dataclass
class LearningCurve:
    update: list[int] = field(default_factory=list)
    episodes: list[int] = field(default_factory=list)
    mean_return: list[float] = field(default_factory=list)
    stderr_return: list[float] = field(default_factory=list)

    HEADER = ("update", "episodes", "mean_return", "stderr_return")

    def append(self, update: int, episodes: int, returns: np.ndarray) -> None:
        self.update.append(update)
        self.episodes.append(episodes)
        self.mean_return.append(float(returns.mean()))
        sd = float(returns.std(ddof=1)) if len(returns) > 1 else 0.0
        self.stderr_return.append(sd / math.sqrt(len(returns)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for row in zip(self.update, self.episodes, self.mean_return, self.stderr_return):
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LearningCurve":
        rows = list(csv.reader(io.StringIO(text)))
        if tuple(rows[0]) != cls.HEADER:
            raise ValueError(f"unexpected curve header {rows[0]}")
        curve = cls()
        for r in rows[1:]:
            curve.update.append(int(r[0]))
            curve.episodes.append(int(r[1]))
            curve.mean_return.append(float(r[2]))
            curve.stderr_return.append(float(r[3]))
        return curve

    def __len__(self) -> int:
        return len(self.update)


@dataclass
class TrainResult:
    policy: JointPolicy
    curve: LearningCurve
    config: TrainConfig


def train(config: TrainConfig, out_dir: str | Path | None = None) -> TrainResult:
    """Run ``config.num_updates`` updates; optionally write checkpoint, curve and manifest."""
    env = make_env(config.env_name, config.horizon)
    policy = JointPolicy.for_env(
        env,
        config.num_internal_states,
        rng=make_rng(config.seed, 0),
        hidden_width=config.hidden_width,
        shared_trunk=config.shared_trunk,
        init_scale=config.init_scale,
    )
    if config.memory_init:
        policy.bias_toward_keeping(config.memory_init)
    optimizers = make_optimizers(policy, config)
    rngs = env_streams(config.seed, config.batch_envs)
    curve = LearningCurve()
    manifest = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "version": __version__,
            "config": config.to_dict(),
            "seed": config.seed,
            "outputs": {"checkpoint": "policy.json", "curve": "curve.csv"},
            "status": "running",
        }
        _write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    start = time.perf_counter()
    for k in range(config.num_updates):
        _, batch = train_step(policy, env, rngs, config.mode, optimizers, config.horizon,
                              config.baseline, update_index=k, entropy=config.entropy,
                              entropy_internal=config.entropy_internal)
        if (k + 1) % config.eval_every == 0 or k + 1 == config.num_updates:
            curve.append(k + 1, (k + 1) * config.batch_envs, batch.returns)
            log.debug("update %d mean return %.4f", k + 1, curve.mean_return[-1])
    if out_dir is not None:
        save_checkpoint(policy, out_dir / "policy.json")
        (out_dir / "curve.csv").write_text(curve.to_csv())
        manifest["status"] = "complete"
        manifest["duration_seconds"] = round(time.perf_counter() - start, 3)
        _write_atomic(out_dir / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return TrainResult(policy, curve, config)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def evaluate(
    policy: JointPolicy,
    env_name: str,
    n_episodes: int,
    seed: int = 0,
    greedy: bool = True,
    horizon: int = DEFAULT_HORIZON,
) -> tuple[float, float]:
    """Mean return and standard error over ``n_episodes`` fresh episodes."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = make_env(env_name, horizon)
    batch = collect_batch(env, policy, env_streams(seed, n_episodes, EVAL_STREAM_BASE),
                          horizon, greedy)
    r = batch.returns
    se = float(r.std(ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0
    return float(r.mean()), se
