"""Joint policy pi(a | o_t, y_t) * xi(y_t | o_{t-1}, y_{t-1}) with closed-form gradients.

Both factors are one-hidden-layer tanh networks on one-hot inputs.  All
parameters live in one flat vector so that the end-to-end mode can treat them
as a single parameter; the per-head matrices are views into it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import RngStream, Trajectory

__all__ = [
    "CHECKPOINT_VERSION",
    "CategoricalSample",
    "GradientBuffer",
    "JointPolicy",
    "Adam",
    "log_softmax",
    "softmax",
    "sample_categorical",
    "inverse_cdf",
    "act",
    "act_greedy",
    "logprob_grad",
    "adam_update",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
WHICH = ("action_only", "internal_only", "joint")


def log_softmax(logits) -> np.ndarray:
    """Max-shifted log-softmax over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("log_softmax needs finite logits")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draw per row of ``probs`` from uniforms ``u`` in [0, 1)."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf <= np.asarray(u)[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass(frozen=True)
class CategoricalSample:
    index: int
    log_prob: float


def sample_categorical(rng: RngStream, logits) -> CategoricalSample:
    logp = log_softmax(logits)
    index = int(inverse_cdf(np.exp(logp), rng.random()))
    return CategoricalSample(index, float(logp[index]))


def _one_hot(idx: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(idx), width))
    out[np.arange(len(idx)), idx] = 1.0
    return out


@dataclass
class GradientBuffer:
    """Accumulated score-function gradient over the flat parameter vector."""

    vector: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, size: int) -> "GradientBuffer":
        return cls(np.zeros(size), 0)

    def add(self, grad: np.ndarray, n: int = 1) -> None:
        if grad.shape != self.vector.shape:
            raise ValueError(f"gradient shape {grad.shape} != buffer {self.vector.shape}")
        self.vector += grad
        self.count += n

    def mean(self) -> np.ndarray:
        return self.vector / max(self.count, 1)

    def __len__(self) -> int:
        return len(self.vector)


class JointPolicy:
    """Action head and internal-state head sharing one flat parameter vector.

    Layout of ``params``: action head ``(W1, b1, W2, b2)``, internal head
    ``(W1, b1, W2, b2)``, then the optional shared observation embedding.
    The action head sees ``one_hot(o_t) ++ one_hot(y_t)``; the internal head
    sees ``one_hot(o_{t-1}) ++ one_hot(y_{t-1})`` where ``o_{t-1}`` may be the
    null token ``num_observations``.
    """

    def __init__(
        self,
        num_observations: int,
        num_actions: int,
        num_internal_states: int,
        hidden_width: int = 32,
        shared_trunk: bool = False,
        env_name: str = "",
        rng: RngStream | None = None,
        init_scale: float = 0.05,
    ):
        if min(num_observations, num_actions, num_internal_states, hidden_width) < 1:
            raise ValueError("all policy dimensions must be >= 1")
        self.num_observations = int(num_observations)
        self.num_actions = int(num_actions)
        self.num_internal_states = int(num_internal_states)
        self.hidden_width = int(hidden_width)
        self.shared_trunk = bool(shared_trunk)
        self.env_name = env_name

        H, K = self.hidden_width, self.num_internal_states
        self.action_in = self.num_observations + K
        self.internal_in = self.num_observations + 1 + K
        shapes = [
            ("a_W1", (H, self.action_in)),
            ("a_b1", (H,)),
            ("a_W2", (self.num_actions, H)),
            ("a_b2", (self.num_actions,)),
            ("i_W1", (H, self.internal_in)),
            ("i_b1", (H,)),
            ("i_W2", (K, H)),
            ("i_b2", (K,)),
        ]
        if self.shared_trunk:
            shapes.append(("trunk", (H, self.num_observations + 1)))
        self._shapes = shapes
        self._offsets = {}
        offset = 0
        for name, shape in shapes:
            size = int(np.prod(shape))
            self._offsets[name] = (offset, offset + size, shape)
            offset += size
        self.params = np.zeros(offset)
        self.action_slice = slice(0, self._offsets["a_b2"][1])
        self.internal_slice = slice(self._offsets["i_W1"][0], self._offsets["i_b2"][1])
        self.trunk_slice = (
            slice(self._offsets["trunk"][0], offset) if self.shared_trunk else slice(offset, offset)
        )

        if rng is not None:
            for name, (lo, hi, _) in self._offsets.items():
                if "W" in name or name == "trunk":
                    self.params[lo:hi] = rng.random(hi - lo) * 2 * init_scale - init_scale

    def bias_toward_keeping(self, keep: float, gain: float = 2.0) -> None:
        """Shift the internal head so it initially keeps ``y_{t-1}`` with probability ~``keep``.

        Hidden unit ``j`` is wired to the ``y_{t-1} = j`` input and feeds logit
        ``j``; the other units are left as initialized.
        """
        K, H = self.num_internal_states, self.hidden_width
        if K < 2:
            return
        if not 1.0 / K <= keep < 1.0:
            raise ValueError(f"keep must lie in [1/K, 1), got {keep}")
        if H < K:
            raise ValueError("bias_toward_keeping needs hidden_width >= num_internal_states")
        W1, W2 = self.view("i_W1"), self.view("i_W2")
        col = self.num_observations + 1
        lift = math.log(keep * (K - 1) / (1.0 - keep)) / math.tanh(gain)
        for j in range(K):
            W1[j, col + j] += gain
            W2[j, j] += lift

    @classmethod
    def for_env(cls, env, num_internal_states: int, rng: RngStream | None = None, **kw):
        return cls(
            env.num_observations,
            env.num_actions,
            num_internal_states,
            env_name=env.name,
            rng=rng,
            **kw,
        )

    @property
    def size(self) -> int:
        return len(self.params)

    @property
    def null_obs(self) -> int:
        return self.num_observations

    def view(self, name: str) -> np.ndarray:
        lo, hi, shape = self._offsets[name]
        return self.params[lo:hi].reshape(shape)

    def copy(self) -> "JointPolicy":
        other = JointPolicy(
            self.num_observations,
            self.num_actions,
            self.num_internal_states,
            self.hidden_width,
            self.shared_trunk,
            self.env_name,
        )
        other.params[:] = self.params
        return other

    # forward passes, batched over rows

    def _check(self, obs, y, obs_hi):
        obs = np.asarray(obs, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if obs.size and (obs.min() < 0 or obs.max() >= obs_hi):
            raise ValueError(f"observation id out of range [0, {obs_hi})")
        if y.size and (y.min() < 0 or y.max() >= self.num_internal_states):
            raise ValueError(
                f"internal state out of range [0, {self.num_internal_states})"
            )
        return obs, y

    def _inputs(self, obs, y, obs_width):
        return np.hstack([_one_hot(obs, obs_width), _one_hot(y, self.num_internal_states)])

    def _hidden(self, prefix, x, obs):
        z = x @ self.view(prefix + "W1").T + self.view(prefix + "b1")
        if self.shared_trunk:
            z = z + _one_hot(obs, self.num_observations + 1) @ self.view("trunk").T
        return np.tanh(z)

    def action_logits(self, obs, y) -> np.ndarray:
        obs, y = self._check(np.atleast_1d(obs), np.atleast_1d(y), self.num_observations)
        h = self._hidden("a_", self._inputs(obs, y, self.num_observations), obs)
        return h @ self.view("a_W2").T + self.view("a_b2")

    def internal_logits(self, prev_obs, prev_y) -> np.ndarray:
        prev_obs, prev_y = self._check(
            np.atleast_1d(prev_obs), np.atleast_1d(prev_y), self.num_observations + 1
        )
        h = self._hidden("i_", self._inputs(prev_obs, prev_y, self.num_observations + 1), prev_obs)
        return h @ self.view("i_W2").T + self.view("i_b2")

    def action_probs(self, obs, y) -> np.ndarray:
        return softmax(self.action_logits(obs, y))

    def internal_probs(self, prev_obs, prev_y) -> np.ndarray:
        return softmax(self.internal_logits(prev_obs, prev_y))

    def _all_inputs(self, obs_width):
        """One-hot rows for every ``(obs, y)`` combination, obs-major."""
        K = self.num_internal_states
        obs = np.repeat(np.arange(obs_width), K)
        y = np.tile(np.arange(K), obs_width)
        return obs, self._inputs(obs, y, obs_width)

    def _head_forward_all(self, prefix, obs_width):
        obs, x = self._all_inputs(obs_width)
        h = self._hidden(prefix, x, obs)
        logits = h @ self.view(prefix + "W2").T + self.view(prefix + "b2")
        return obs, x, h, logits

    def log_prob_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """``log pi[o, y, a]`` and ``log xi[o_prev, y_prev, y]`` over all inputs."""
        K = self.num_internal_states
        *_, la = self._head_forward_all("a_", self.num_observations)
        *_, li = self._head_forward_all("i_", self.num_observations + 1)
        return (log_softmax(la).reshape(self.num_observations, K, self.num_actions),
                log_softmax(li).reshape(self.num_observations + 1, K, K))

    # gradients

    def _head_grad(self, prefix, obs, y, target, weight, obs_width, out, entropy=0.0):
        # Rows sharing an input differ only in (target, weight), so the
        # output-layer error is accumulated per input before backpropagating:
        # sum_rows w * (onehot(target) - p) = S - wsum * p.
        K = self.num_internal_states
        all_obs, x, h, logits = self._head_forward_all(prefix, obs_width)
        n_in, n_out = logits.shape
        combo = obs * K + y
        S = np.bincount(combo * n_out + target, weights=weight,
                        minlength=n_in * n_out).reshape(n_in, n_out)
        wsum = np.bincount(combo, weights=weight, minlength=n_in)
        logp = log_softmax(logits)
        p = np.exp(logp)
        dl = S - wsum[:, None] * p
        if entropy:
            # d H / d logits = -p * (log p + H), once per visited row
            visits = np.bincount(combo, minlength=n_in)
            H = -(p * logp).sum(axis=1, keepdims=True)
            dl -= entropy * visits[:, None] * p * (logp + H)
        W2 = self.view(prefix + "W2")
        dz = (dl @ W2) * (1.0 - h * h)

        def put(name, value):
            lo, hi, _ = self._offsets[name]
            out[lo:hi] += value.ravel()

        put(prefix + "W1", dz.T @ x)
        put(prefix + "b1", dz.sum(axis=0))
        put(prefix + "W2", dl.T @ h)
        put(prefix + "b2", dl.sum(axis=0))
        if self.shared_trunk:
            put("trunk", dz.T @ _one_hot(all_obs, self.num_observations + 1))

    def rows_grad(
        self,
        which: str,
        action_rows: tuple | None = None,
        internal_rows: tuple | None = None,
        entropy: float = 0.0,
        entropy_internal: float = 0.0,
    ) -> np.ndarray:
        """Sum of ``weight * grad log factor`` over explicit rows.

        ``action_rows`` is ``(obs, y, action, weight)``; ``internal_rows`` is
        ``(prev_obs, prev_y, y, weight)``.  Non-zero ``entropy`` /
        ``entropy_internal`` add that multiple of the gradient of the action /
        internal head entropy summed over the same rows.
        """
        if which not in WHICH:
            raise ValueError(f"which must be one of {WHICH}, got {which!r}")
        out = np.zeros(self.size)
        if which != "internal_only" and action_rows is not None and len(action_rows[0]):
            obs, y, a, w = action_rows
            obs, y = self._check(obs, y, self.num_observations)
            a = np.asarray(a, dtype=np.int64)
            if a.min() < 0 or a.max() >= self.num_actions:
                raise ValueError("action id out of range")
            self._head_grad("a_", obs, y, a, np.asarray(w, float), self.num_observations, out,
                            entropy)
        if which != "action_only" and internal_rows is not None and len(internal_rows[0]):
            po, py, y, w = internal_rows
            po, py = self._check(po, py, self.num_observations + 1)
            _, y = self._check(po, y, self.num_observations + 1)
            self._head_grad("i_", po, py, y, np.asarray(w, float), self.num_observations + 1, out,
                            entropy_internal)
        return out

    def log_prob_sums(self, traj: Trajectory) -> tuple[float, float]:
        """Recomputed ``(sum log pi, sum log xi)`` along a trajectory."""
        a_rows, i_rows = _trajectory_rows(self, traj, 1.0)
        lp_a = log_softmax(self.action_logits(a_rows[0], a_rows[1]))
        s_a = lp_a[np.arange(len(a_rows[2])), a_rows[2]].sum() if len(a_rows[0]) else 0.0
        s_i = 0.0
        if len(i_rows[0]):
            lp_i = log_softmax(self.internal_logits(i_rows[0], i_rows[1]))
            s_i = lp_i[np.arange(len(i_rows[2])), i_rows[2]].sum()
        return float(s_a), float(s_i)


def _trajectory_rows(policy: JointPolicy, traj: Trajectory, weight: float):
    obs, y, a = traj.obs, traj.internal, traj.action
    w = np.full(len(obs), weight)
    action_rows = (obs, y, a, w)
    # y_0 is fixed, so the internal factor starts at t = 1 with input (o_0, y_0)
    internal_rows = (obs[:-1], y[:-1], y[1:], w[1:])
    return action_rows, internal_rows


def act(policy: JointPolicy, o_t: int, o_prev: int, y_prev: int, t: int, rng: RngStream):
    """Sample ``(a_t, y_t, log pi(a_t|o_t,y_t), log xi(y_t|o_prev,y_prev))``.

    At ``t == 0`` the internal state is fixed to 0 and contributes log-prob 0.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        y_t, lp_i = 0, 0.0
        policy._check([o_prev], [y_prev], policy.num_observations + 1)
    else:
        s = sample_categorical(rng, policy.internal_logits(o_prev, y_prev)[0])
        y_t, lp_i = s.index, s.log_prob
    s = sample_categorical(rng, policy.action_logits(o_t, y_t)[0])
    return s.index, y_t, s.log_prob, lp_i


def act_greedy(policy: JointPolicy, o_t: int, o_prev: int, y_prev: int, t: int):
    """Argmax of both heads; ties go to the lowest index."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        policy._check([o_prev], [y_prev], policy.num_observations + 1)
        y_t = 0
    else:
        y_t = int(np.argmax(policy.internal_logits(o_prev, y_prev)[0]))
    a_t = int(np.argmax(policy.action_logits(o_t, y_t)[0]))
    return a_t, y_t


def logprob_grad(policy: JointPolicy, traj: Trajectory, which: str = "joint") -> GradientBuffer:
    """``R_tau * sum_t grad log(factor)`` for one trajectory.

    ``which`` selects the action factor, the internal factor (steps t >= 1),
    or both.  Entries of parameters outside the selection are zero.
    """
    ret = traj.episodic_return()
    a_rows, i_rows = _trajectory_rows(policy, traj, ret)
    buf = GradientBuffer.zeros(policy.size)
    buf.add(policy.rows_grad(which, a_rows, i_rows))
    return buf


class Adam:
    """Adam for gradient *ascent* on a flat parameter slice."""

    def __init__(self, size: int, step_size: float = 1e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        if not np.all(np.isfinite(grad)):
            bad = np.flatnonzero(~np.isfinite(grad))
            raise FloatingPointError(
                f"non-finite gradient at {len(bad)} entries (first index {bad[0]})"
            )
        self.t += 1
        self.m *= self.beta1
        self.m += (1.0 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1.0 - self.beta2) * (grad * grad)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params += self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}


def adam_update(params: np.ndarray, grad, step_size: float, moment_state: Adam) -> np.ndarray:
    """Apply one ascent step in place and return ``params``."""
    g = grad.vector if isinstance(grad, GradientBuffer) else np.asarray(grad, float)
    if g.shape != params.shape or moment_state.m.shape != params.shape:
        raise ValueError("params, gradient and moment state must have equal length")
    moment_state.step_size = step_size
    moment_state.step(params, g)
    return params


def save_checkpoint(policy: JointPolicy, path: str | Path, extra: dict | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "env": policy.env_name,
        "num_observations": policy.num_observations,
        "num_actions": policy.num_actions,
        "num_internal_states": policy.num_internal_states,
        "hidden_width": policy.hidden_width,
        "shared_trunk": policy.shared_trunk,
        "params": [float(x) for x in policy.params],
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc) + "\n")


def load_checkpoint(path: str | Path) -> JointPolicy:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    policy = JointPolicy(
        doc["num_observations"],
        doc["num_actions"],
        doc["num_internal_states"],
        doc["hidden_width"],
        doc["shared_trunk"],
        doc["env"],
    )
    params = np.asarray(doc["params"], dtype=np.float64)
    if params.shape != policy.params.shape:
        raise ValueError("checkpoint parameter count does not match its header")
    if not np.all(np.isfinite(params)):
        raise ValueError("checkpoint contains non-finite parameters")
    policy.params[:] = params
    return policy
