"""Heaven/Hell and Tiger as discrete POMDPs.

Each environment keeps its dynamics in batched form (``initial`` /
``transition`` act on arrays of episodes and take pre-drawn uniforms), which
the training loop steps in lockstep.  The scalar ``reset`` / ``step`` API wraps
the same dynamics for a single episode that owns its :class:`RngStream`.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .core import RngStream

__all__ = [
    "PomdpEnv",
    "HeavenHellEnv",
    "TigerEnv",
    "EpisodeDone",
    "ENVIRONMENTS",
    "make_env",
    "chance_level",
    "chance_level_stats",
    "DEFAULT_HORIZON",
    "STEP_PENALTY",
]

DEFAULT_HORIZON = 30
STEP_PENALTY = -0.01


class EpisodeDone(RuntimeError):
    """``step`` was called on a finished episode."""


class PomdpEnv:
    """Common surface of the benchmark environments.

    Subclasses define ``initial(u)``, ``observe_initial(state)`` and
    ``transition(state, action, u)`` over batches; ``state`` is an int array
    of shape ``(batch, state_dim)``.
    """

    name: str = ""
    observation_names: tuple[str, ...] = ()
    action_names: tuple[str, ...] = ()

    def __init__(self, horizon: int = DEFAULT_HORIZON):
        if horizon < 0:
            raise ValueError("horizon must be non-negative")
        self.horizon = int(horizon)
        self._state = None
        self._rng = None
        self._t = 0
        self._done = True

    @property
    def num_observations(self) -> int:
        return len(self.observation_names)

    @property
    def num_actions(self) -> int:
        return len(self.action_names)

    @property
    def null_obs(self) -> int:
        """Id of the "no previous observation" token, one past the real ids."""
        return self.num_observations

    # batched dynamics
    def initial(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def observe_initial(self, state: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def transition(self, state, action, u):
        raise NotImplementedError

    # scalar API
    def reset(self, rng: RngStream) -> int:
        self._rng = rng
        self._state = self.initial(np.array([rng.random()]))
        self._t = 0
        self._done = self.horizon == 0
        return int(self.observe_initial(self._state)[0])

    def step(self, action: int) -> tuple[int, float, bool]:
        if self._done or self._state is None:
            raise EpisodeDone("step() called after the episode ended; call reset()")
        if not 0 <= action < self.num_actions:
            raise ValueError(f"action {action} out of range for {self.name}")
        u = np.array([self._rng.random()])
        self._state, obs, reward, terminal = self.transition(
            self._state, np.array([action]), u
        )
        self._t += 1
        self._done = bool(terminal[0]) or self._t >= self.horizon
        return int(obs[0]), float(reward[0]), self._done

    @property
    def done(self) -> bool:
        return self._done

    def id_tables(self) -> dict:
        return {
            "env": self.name,
            "observations": list(self.observation_names),
            "null_observation": self.null_obs,
            "actions": list(self.action_names),
        }

    def id_tables_json(self) -> str:
        return json.dumps(self.id_tables(), indent=2)


# T-maze: top row 0..4 at (x, 0), stem 5, 6, 7 at (2, 1..3); start at 7.
_TILE_XY = {0: (0, 0), 1: (1, 0), 2: (2, 0), 3: (3, 0), 4: (4, 0),
            5: (2, 1), 6: (2, 2), 7: (2, 3)}
_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))  # up, right, down, left


def _move_table() -> np.ndarray:
    xy_tile = {xy: t for t, xy in _TILE_XY.items()}
    table = np.empty((len(_TILE_XY), len(_MOVES)), dtype=np.int64)
    for tile, (x, y) in _TILE_XY.items():
        for a, (dx, dy) in enumerate(_MOVES):
            table[tile, a] = xy_tile.get((x + dx, y + dy), tile)
    return table


class HeavenHellEnv(PomdpEnv):
    """T-maze where the heaven side is only visible on the start tile.

    Observation ids 0..7 are ``(tile, unknown)``; 8 and 9 are tile 7 with the
    heaven side shown (left / right).  Id 7 is never emitted.
    State columns: ``(agent_tile, heaven_tile)``.
    """

    name = "heaven_hell"
    observation_names = tuple(f"tile{t}" for t in range(8)) + (
        "tile7:heaven-left",
        "tile7:heaven-right",
    )
    action_names = ("up", "right", "down", "left")

    START = 7
    BRANCH = 2
    ENDS = (0, 4)
    GOAL_REWARD = 1.0
    MOVES = _move_table()

    def initial(self, u):
        heaven = np.where(np.asarray(u) < 0.5, self.ENDS[0], self.ENDS[1])
        tile = np.full_like(heaven, self.START)
        return np.stack([tile, heaven], axis=1)

    def observe(self, state: np.ndarray) -> np.ndarray:
        tile, heaven = state[:, 0], state[:, 1]
        at_start = np.where(heaven == self.ENDS[0], 8, 9)
        return np.where(tile == self.START, at_start, tile)

    def observe_initial(self, state):
        return self.observe(state)

    def transition(self, state, action, u):
        tile = self.MOVES[state[:, 0], action]
        heaven = state[:, 1]
        hell = self.ENDS[0] + self.ENDS[1] - heaven
        reward = np.full(tile.shape, STEP_PENALTY)
        reward = reward + np.where(tile == heaven, self.GOAL_REWARD, 0.0)
        reward = reward - np.where(tile == hell, self.GOAL_REWARD, 0.0)
        terminal = (tile == heaven) | (tile == hell)
        new_state = np.stack([tile, heaven], axis=1)
        return new_state, self.observe(new_state), reward, terminal

    @property
    def agent_tile(self) -> int:
        return int(self._state[0, 0])

    @property
    def heaven_tile(self) -> int:
        return int(self._state[0, 1])

    def set_state(self, agent_tile: int, heaven_tile: int, rng: RngStream | None = None):
        """Place the agent directly; used to probe the dynamics."""
        if heaven_tile not in self.ENDS:
            raise ValueError("heaven must be at tile 0 or tile 4")
        self._state = np.array([[agent_tile, heaven_tile]])
        self._rng = rng if rng is not None else RngStream(0)
        self._t = 0
        self._done = False
        return int(self.observe(self._state)[0])


class TigerEnv(PomdpEnv):
    """Two doors, one hiding a tiger; listening returns a noisy side hint.

    State column: ``tiger_side`` (0 left, 1 right).
    """

    name = "tiger"
    observation_names = ("null", "left", "right")
    action_names = ("listen", "open-left", "open-right")

    LISTEN_NOISE = 0.15
    LISTEN_REWARD = -0.01
    DOOR_REWARD = 0.1
    TIGER_REWARD = -1.0

    def __init__(self, horizon: int = DEFAULT_HORIZON, listen_noise: float = LISTEN_NOISE):
        super().__init__(horizon)
        self.listen_noise = float(listen_noise)

    def initial(self, u):
        side = (np.asarray(u) >= 0.5).astype(np.int64)
        return side[:, None]

    def observe_initial(self, state):
        return np.zeros(state.shape[0], dtype=np.int64)

    def transition(self, state, action, u):
        side = state[:, 0]
        listen = action == 0
        heard = np.where(np.asarray(u) < self.listen_noise, 1 - side, side)
        obs = np.where(listen, 1 + heard, 0)
        opened = action - 1  # 0 left door, 1 right door, -1 listen
        reward = np.where(
            listen,
            self.LISTEN_REWARD,
            np.where(opened == side, self.TIGER_REWARD, self.DOOR_REWARD),
        )
        return state.copy(), obs, reward.astype(np.float64), ~listen

    @property
    def tiger_side(self) -> int:
        return int(self._state[0, 0])


ENVIRONMENTS = {"heaven_hell": HeavenHellEnv, "tiger": TigerEnv}


def make_env(name: str, horizon: int = DEFAULT_HORIZON) -> PomdpEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(
            f"unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}"
        ) from None
    return cls(horizon=horizon)


def chance_level(
    env_name: str, num_episodes: int, rng: RngStream, horizon: int = DEFAULT_HORIZON
) -> float:
    """Mean episodic return of the uniform-random policy."""
    return chance_level_stats(env_name, num_episodes, rng, horizon)[0]


def chance_level_stats(
    env_name: str,
    num_episodes: int,
    rng: RngStream,
    horizon: int = DEFAULT_HORIZON,
    chunk: int = 100_000,
) -> tuple[float, float]:
    """``(mean, standard error)`` of the uniform-random policy's return."""
    if num_episodes < 1:
        raise ValueError("num_episodes must be >= 1")
    env = make_env(env_name, horizon)
    returns = []
    remaining = num_episodes
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        state = env.initial(rng.random(n))
        alive = np.ones(n, dtype=bool)
        total = np.zeros(n)
        for _ in range(horizon):
            if not alive.any():
                break
            action = rng.integers(0, env.num_actions, size=n)
            state, _, reward, terminal = env.transition(state, action, rng.random(n))
            total += np.where(alive, reward, 0.0)
            alive &= ~terminal
        returns.append(total)
    r = np.concatenate(returns)
    stderr = float(r.std(ddof=1) / math.sqrt(len(r))) if len(r) > 1 else 0.0
    return float(r.mean()), stderr
