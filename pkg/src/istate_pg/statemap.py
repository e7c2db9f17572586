"""Transition graphs over (observation, internal state) pairs.

Pipeline: harvest greedy rollouts, count consecutive pair transitions with the
action marginalized out, keep the pairs reachable from the initial pairs, and
export the result as DOT, JSON and a per-pair policy table.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Trajectory
from .envs import DEFAULT_HORIZON, HeavenHellEnv, make_env
from .policy import JointPolicy
from .train import collect_batch, env_streams

__all__ = [
    "HARVEST_STREAM_BASE",
    "TransitionMatrix",
    "PolicyTable",
    "StateGraph",
    "pair_index",
    "pair_of",
    "harvest_rollouts",
    "build_matrix",
    "prune_unreachable",
    "build_policy_table",
    "build_graph",
    "to_dot",
    "to_json",
    "policy_table_csv",
    "write_statemap",
    "verify_tiger_rule",
    "branch_mutual_information",
]

HARVEST_STREAM_BASE = 1 << 40


def pair_index(obs: int, internal: int, num_internal_states: int) -> int:
    return obs * num_internal_states + internal


def pair_of(index: int, num_internal_states: int) -> tuple[int, int]:
    return divmod(int(index), num_internal_states)


@dataclass
class TransitionMatrix:
    """Counts and row-normalized probabilities between pair ids.

    ``pairs[i]`` is the dense pair id of row/column ``i``; before pruning it is
    simply ``arange(num_observations * num_internal_states)``.
    """

    counts: np.ndarray
    probs: np.ndarray
    visit_counts: np.ndarray
    initial_pair_counts: np.ndarray
    pairs: np.ndarray
    num_internal_states: int

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    def row_of(self, pair_id: int) -> int:
        hit = np.flatnonzero(self.pairs == pair_id)
        if len(hit) == 0:
            raise KeyError(pair_id)
        return int(hit[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, TransitionMatrix):
            return NotImplemented
        return (
            self.num_internal_states == other.num_internal_states
            and np.array_equal(self.pairs, other.pairs)
            and np.array_equal(self.counts, other.counts)
            and np.array_equal(self.probs, other.probs)
            and np.array_equal(self.visit_counts, other.visit_counts)
            and np.array_equal(self.initial_pair_counts, other.initial_pair_counts)
        )


@dataclass
class PolicyTable:
    pairs: np.ndarray
    probs: np.ndarray  # (len(pairs), num_actions)
    greedy: np.ndarray

    def row(self, pair_id: int) -> int:
        return int(np.flatnonzero(self.pairs == pair_id)[0])


@dataclass
class StateGraph:
    env_name: str
    num_internal_states: int
    observation_names: tuple[str, ...]
    action_names: tuple[str, ...]
    matrix: TransitionMatrix

    @property
    def nodes(self) -> list[int]:
        return [int(p) for p in self.matrix.pairs]

    @property
    def initial(self) -> list[int]:
        m = self.matrix
        return [int(p) for p, c in zip(m.pairs, m.initial_pair_counts) if c > 0]

    @property
    def edges(self) -> list[tuple[int, int, float, int]]:
        m = self.matrix
        src, dst = np.nonzero(m.counts)
        return [
            (int(m.pairs[i]), int(m.pairs[j]), float(m.probs[i, j]), int(m.counts[i, j]))
            for i, j in zip(src, dst)
        ]


def harvest_rollouts(
    policy: JointPolicy,
    env_name: str,
    n: int = 10_000,
    seed: int = 0,
    horizon: int = DEFAULT_HORIZON,
) -> list[Trajectory]:
    """``n`` greedy episodes, each from its own freshly reset environment."""
    if n < 1:
        raise ValueError("n must be >= 1")
    env = make_env(env_name, horizon)
    batch = collect_batch(env, policy, env_streams(seed, n, HARVEST_STREAM_BASE),
                          horizon, greedy=True)
    return batch.trajectories()


def build_matrix(
    rollouts: list[Trajectory], num_observations: int, num_internal_states: int
) -> TransitionMatrix:
    """Count ``(o_t, y_t) -> (o_{t+1}, y_{t+1})`` over all rollouts."""
    if not rollouts:
        raise ValueError("build_matrix needs at least one rollout")
    K = num_internal_states
    n = num_observations * K
    counts = np.zeros((n, n), dtype=np.int64)
    visits = np.zeros(n, dtype=np.int64)
    initial = np.zeros(n, dtype=np.int64)
    for traj in rollouts:
        if len(traj) == 0:
            continue
        ids = traj.obs * K + traj.internal
        if ids.min() < 0 or ids.max() >= n:
            raise ValueError("rollout ids exceed the given observation/internal sizes")
        initial[ids[0]] += 1
        np.add.at(visits, ids, 1)
        np.add.at(counts, (ids[:-1], ids[1:]), 1)
    return TransitionMatrix(counts, _normalize(counts), visits, initial,
                            np.arange(n), num_internal_states)


def _normalize(counts: np.ndarray) -> np.ndarray:
    out = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, out, out=np.zeros(counts.shape), where=out > 0)


def prune_unreachable(matrix: TransitionMatrix) -> tuple[TransitionMatrix, list[int]]:
    """Keep pairs reachable from an initial pair along positive-count edges."""
    start = np.flatnonzero(matrix.initial_pair_counts > 0)
    seen = np.zeros(matrix.num_pairs, dtype=bool)
    seen[start] = True
    queue = deque(start.tolist())
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(matrix.counts[i]):
            if not seen[j]:
                seen[j] = True
                queue.append(j)
    keep = np.flatnonzero(seen)
    counts = matrix.counts[np.ix_(keep, keep)]
    pruned = TransitionMatrix(
        counts,
        _normalize(counts),
        matrix.visit_counts[keep],
        matrix.initial_pair_counts[keep],
        matrix.pairs[keep],
        matrix.num_internal_states,
    )
    return pruned, [int(p) for p in pruned.pairs]


def build_policy_table(policy: JointPolicy, kept_pairs) -> PolicyTable:
    pairs = np.asarray(kept_pairs, dtype=np.int64)
    obs, y = np.divmod(pairs, policy.num_internal_states)
    probs = policy.action_probs(obs, y) if len(pairs) else np.zeros((0, policy.num_actions))
    return PolicyTable(pairs, probs, probs.argmax(axis=1))


def build_graph(matrix: TransitionMatrix, env_name: str) -> StateGraph:
    env = make_env(env_name)
    return StateGraph(env_name, matrix.num_internal_states, env.observation_names,
                      env.action_names, matrix)


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def to_dot(graph: StateGraph, table: PolicyTable) -> str:
    """Graphviz text with nodes and edges in dense-index order."""
    K = graph.num_internal_states
    initial = set(graph.initial)
    lines = [f"digraph {_dot_quote(graph.env_name + '_statemap')} {{", "  rankdir=LR;"]
    for p in sorted(graph.nodes):
        o, y = pair_of(p, K)
        a = int(table.greedy[table.row(p)])
        label = f"obs={graph.observation_names[o]} | y={y} | a={graph.action_names[a]}"
        shape = "doubleoctagon" if p in initial else "ellipse"
        lines.append(f"  p{p} [label={_dot_quote(label)}, shape={shape}];")
    for src, dst, prob, count in sorted(graph.edges):
        lines.append(f"  p{src} -> p{dst} [label={_dot_quote(f'{prob:.3f} ({count})')}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_json(graph: StateGraph, table: PolicyTable) -> str:
    K = graph.num_internal_states
    m = graph.matrix
    nodes = []
    for i, p in enumerate(m.pairs):
        o, y = pair_of(p, K)
        r = table.row(int(p))
        nodes.append({
            "pair": int(p),
            "obs": o,
            "obs_name": graph.observation_names[o],
            "internal": y,
            "greedy_action": int(table.greedy[r]),
            "greedy_action_name": graph.action_names[int(table.greedy[r])],
            "action_probs": [float(x) for x in table.probs[r]],
            "visits": int(m.visit_counts[i]),
            "initial_count": int(m.initial_pair_counts[i]),
        })
    edges = [{"from": s, "to": d, "prob": pr, "count": c} for s, d, pr, c in sorted(graph.edges)]
    doc = {
        "env": graph.env_name,
        "num_internal_states": K,
        "actions": list(graph.action_names),
        "nodes": nodes,
        "edges": edges,
    }
    return json.dumps(doc, indent=2) + "\n"


def policy_table_csv(graph: StateGraph, table: PolicyTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "obs", "internal"] + [f"p_{a}" for a in graph.action_names]
               + ["greedy_action"])
    for i, p in enumerate(table.pairs):
        o, y = pair_of(p, graph.num_internal_states)
        w.writerow([int(p), graph.observation_names[o], y]
                   + [repr(float(x)) for x in table.probs[i]]
                   + [graph.action_names[int(table.greedy[i])]])
    return buf.getvalue()


def write_statemap(out_dir: str | Path, graph: StateGraph, table: PolicyTable) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "dot": out_dir / "statemap.dot",
        "json": out_dir / "statemap.json",
        "policy_table": out_dir / "policy_table.csv",
    }
    paths["dot"].write_text(to_dot(graph, table))
    paths["json"].write_text(to_json(graph, table))
    paths["policy_table"].write_text(policy_table_csv(graph, table))
    return paths


def _tiger_episode_ok(traj: Trajectory) -> bool:
    # obs ids: 0 null, 1 heard left, 2 heard right; actions: 0 listen, 1/2 open left/right
    obs, act = traj.obs, traj.action
    opens = np.flatnonzero(act != 0)
    if len(opens) == 0:
        return False
    t = int(opens[0])
    if t < 2 or obs[t] == 0 or obs[t] != obs[t - 1]:
        return False
    heard_left = obs[t] == 1
    return bool(act[t] == (2 if heard_left else 1))


def verify_tiger_rule(
    rollouts: list[Trajectory], env_name: str = "tiger", threshold: float = 0.95
) -> bool:
    """True when at least ``threshold`` of the episodes open the door opposite
    the side heard on the last two (consecutive, agreeing) listens.

    Episodes that never open a door count as violations.
    """
    if env_name != "tiger":
        raise ValueError(f"the tiger rule does not apply to {env_name!r}")
    if not rollouts:
        raise ValueError("no rollouts to check")
    ok = sum(_tiger_episode_ok(t) for t in rollouts)
    return ok / len(rollouts) >= threshold


def branch_mutual_information(rollouts: list[Trajectory]) -> float:
    """Mutual information (bits) between the heaven side and the internal
    state held on the first visit to the branching tile.

    The heaven side is read off the first observation; episodes that never
    reach the branching tile are skipped.
    """
    left_obs, right_obs = 8, 9
    joint: dict[tuple[int, int], int] = {}
    for traj in rollouts:
        obs = traj.obs
        if len(obs) == 0 or obs[0] not in (left_obs, right_obs):
            raise ValueError("rollout does not start on the heaven/hell start tile")
        hits = np.flatnonzero(obs == HeavenHellEnv.BRANCH)
        if len(hits) == 0:
            continue
        key = (int(obs[0] == right_obs), int(traj.internal[hits[0]]))
        joint[key] = joint.get(key, 0) + 1
    total = sum(joint.values())
    if total == 0:
        return 0.0
    side_p: dict[int, float] = {}
    state_p: dict[int, float] = {}
    for (s, y), c in joint.items():
        side_p[s] = side_p.get(s, 0) + c / total
        state_p[y] = state_p.get(y, 0) + c / total
    mi = 0.0
    for (s, y), c in joint.items():
        p = c / total
        mi += p * math.log2(p / (side_p[s] * state_p[y]))
    return mi
