import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from istate_pg.core import make_rng
from istate_pg.envs import (
    EpisodeDone,
    HeavenHellEnv,
    TigerEnv,
    chance_level,
    chance_level_stats,
    make_env,
)

# uniform-random policy values, frozen from the exact recursions below
V_TIGER = -0.45499999999999763
V_HEAVEN_HELL = -0.2501290416209222


# -- independent oracles -----------------------------------------------------

LAYOUT = {0: (0, 0), 1: (1, 0), 2: (2, 0), 3: (3, 0), 4: (4, 0), 5: (2, 1), 6: (2, 2), 7: (2, 3)}
DIRS = [(0, -1), (1, 0), (0, 1), (-1, 0)]


def grid_neighbor(tile, a):
    x, y = LAYOUT[tile]
    dx, dy = DIRS[a]
    inv = {xy: t for t, xy in LAYOUT.items()}
    return inv.get((x + dx, y + dy), tile)


def bfs_distance(src, dst):
    dist = {src: 0}
    q = deque([src])
    while q:
        t = q.popleft()
        for a in range(4):
            n = grid_neighbor(t, a)
            if n not in dist:
                dist[n] = dist[t] + 1
                q.append(n)
    return dist[dst]


def exact_random_value_heaven_hell(horizon=30):
    # value[t][tile] for heaven fixed at 0 (the problem is mirror symmetric)
    heaven, hell = 0, 4
    v = {tile: 0.0 for tile in LAYOUT}
    for _ in range(horizon):
        nv = {}
        for tile in LAYOUT:
            total = 0.0
            for a in range(4):
                n = grid_neighbor(tile, a)
                r = -0.01 + (1.0 if n == heaven else 0.0) - (1.0 if n == hell else 0.0)
                total += 0.25 * (r + (0.0 if n in (heaven, hell) else v[n]))
            nv[tile] = total
        v = nv
    return v[7]


def exact_random_value_tiger(horizon=30):
    per_step = (1 / 3) * -0.01 + (2 / 3) * (0.5 * 0.1 + 0.5 * -1.0)
    return sum((1 / 3) ** t * per_step for t in range(horizon))


def test_frozen_chance_values_match_exact_recursions():
    assert exact_random_value_tiger() == pytest.approx(V_TIGER, abs=1e-12)
    assert exact_random_value_heaven_hell() == pytest.approx(V_HEAVEN_HELL, abs=1e-12)


# -- heaven/hell ----------------------------------------------------------------

def reset_until(env, heaven_tile):
    for sid in range(100):
        obs = env.reset(make_rng(3, sid))
        if env.heaven_tile == heaven_tile:
            return obs
    raise AssertionError("no reset produced the requested heaven side")


def test_reset_reveals_heaven_side_on_start_tile():
    env = HeavenHellEnv()
    assert reset_until(env, 0) == 8
    assert env.agent_tile == 7
    assert env.observation_names[8] == "tile7:heaven-left"
    assert reset_until(env, 4) == 9


def test_reset_heaven_side_frequency():
    rng = make_rng(11, 0)
    env = HeavenHellEnv()
    left = 0
    n = 100_000
    for _ in range(n):
        env.reset(rng)
        left += env.heaven_tile == 0
    assert 0.495 <= left / n <= 0.505


def test_reset_is_deterministic_per_stream():
    env = HeavenHellEnv()
    assert env.reset(make_rng(5, 2)) == env.reset(make_rng(5, 2))


def test_step_examples():
    env = HeavenHellEnv()
    env.set_state(2, 0)
    assert env.step(3) == (1, pytest.approx(-0.01), False)
    env.set_state(1, 0)
    obs, r, done = env.step(3)
    assert (obs, done) == (0, True)
    assert r == pytest.approx(0.99, abs=1e-12)
    env.set_state(7, 0)
    obs, r, done = env.step(2)
    assert env.agent_tile == 7 and r == pytest.approx(-0.01) and not done
    assert obs == 8


def test_entering_hell():
    env = HeavenHellEnv()
    env.set_state(3, 0)
    obs, r, done = env.step(1)
    assert (obs, done) == (4, True)
    assert r == pytest.approx(-1.01, abs=1e-12)


def test_step_after_done_raises():
    env = HeavenHellEnv()
    env.set_state(1, 0)
    env.step(3)
    with pytest.raises(EpisodeDone):
        env.step(0)


def test_horizon_truncation():
    env = HeavenHellEnv(horizon=3)
    env.reset(make_rng(0))
    dones = [env.step(2)[2] for _ in range(3)]
    assert dones == [False, False, True]


def test_move_table_matches_layout():
    for tile, a in itertools.product(range(8), range(4)):
        assert HeavenHellEnv.MOVES[tile, a] == grid_neighbor(tile, a)


def test_shortest_path_is_five():
    assert bfs_distance(7, 0) == 5
    assert bfs_distance(7, 4) == 5


@pytest.mark.parametrize("heaven", [0, 4])
def test_brute_force_optimum_is_095(heaven):
    env = HeavenHellEnv()
    best = -np.inf
    for length in range(1, 7):
        for seq in itertools.product(range(4), repeat=length):
            env.set_state(7, heaven)
            total, done = 0.0, False
            for a in seq:
                if done:
                    break
                _, r, done = env.step(a)
                total += r
            best = max(best, total)
    assert best == pytest.approx(0.95, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32), st.lists(st.integers(0, 3), min_size=1, max_size=40))
def test_heaven_signal_only_on_start_tile(seed, actions):
    env = HeavenHellEnv()
    obs = env.reset(make_rng(seed))
    total = 0.0
    for a in actions:
        assert (obs >= 8) == (env.agent_tile == 7)
        assert obs != 7
        obs, r, done = env.step(a)
        total += r
        if done:
            break
    assert (obs >= 8) == (env.agent_tile == 7)
    assert -1 - 0.01 * env.horizon - 1e-12 <= total <= 0.95 + 1e-12


# -- tiger ---------------------------------------------------------------------

def tiger_with_side(side):
    env = TigerEnv()
    for sid in range(100):
        obs = env.reset(make_rng(8, sid))
        if env.tiger_side == side:
            return env, obs
    raise AssertionError


def test_tiger_reset_returns_null():
    for sid in range(20):
        assert TigerEnv().reset(make_rng(1, sid)) == 0


def test_tiger_side_frequency_and_determinism():
    env = TigerEnv()
    rng = make_rng(21)
    n = 100_000
    left = 0
    for _ in range(n):
        env.reset(rng)
        left += env.tiger_side == 0
    assert 0.495 <= left / n <= 0.505
    a, b = TigerEnv(), TigerEnv()
    a.reset(make_rng(4, 4))
    b.reset(make_rng(4, 4))
    assert a.tiger_side == b.tiger_side


def test_tiger_door_rewards():
    env, _ = tiger_with_side(0)
    assert env.step(2) == (0, pytest.approx(0.1), True)
    env, _ = tiger_with_side(0)
    assert env.step(1) == (0, pytest.approx(-1.0), True)
    with pytest.raises(EpisodeDone):
        env.step(0)


def test_tiger_listen_cost():
    env, _ = tiger_with_side(1)
    obs, r, done = env.step(0)
    assert obs in (1, 2) and r == pytest.approx(-0.01) and not done


def test_listen_noise_frequency():
    env = TigerEnv()
    n = 1_000_000
    state = np.zeros((n, 1), dtype=np.int64)  # tiger on the left
    _, obs, _, _ = env.transition(state, np.zeros(n, dtype=np.int64), make_rng(6).random(n))
    frac = np.mean(obs == 1)
    assert 0.848 <= frac <= 0.852


@pytest.mark.parametrize("name", ["heaven_hell", "tiger"])
def test_initial_side_frequency_three_sigma(name):
    env = make_env(name)
    n = 1_000_000
    state = env.initial(make_rng(13).random(n))
    col = state[:, 1] == 0 if name == "heaven_hell" else state[:, 0] == 0
    assert abs(col.mean() - 0.5) <= 3 * np.sqrt(0.25 / n)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_tiger_single_big_reward_at_end(seed):
    env = TigerEnv()
    rng = make_rng(seed, 1)
    env.reset(rng)
    rewards, done = [], False
    while not done:
        a = int(rng.integers(0, 3))
        _, r, done = env.step(a)
        rewards.append(r)
    big = [i for i, r in enumerate(rewards) if abs(r) >= 0.1]
    if len(rewards) < env.horizon or big:
        assert big == [len(rewards) - 1]


# -- chance level --------------------------------------------------------------

def test_chance_level_tiger():
    v = chance_level("tiger", 1_000_000, make_rng(0, 0))
    assert v == pytest.approx(V_TIGER, abs=0.002)


def test_chance_level_heaven_hell():
    v = chance_level("heaven_hell", 1_000_000, make_rng(0, 0))
    assert v == pytest.approx(V_HEAVEN_HELL, abs=0.002)


def test_chance_level_deterministic_and_validated():
    a = chance_level_stats("tiger", 5000, make_rng(3))
    b = chance_level_stats("tiger", 5000, make_rng(3))
    assert a == b
    with pytest.raises(ValueError):
        chance_level("maze", 10, make_rng(0))
    with pytest.raises(ValueError):
        chance_level("tiger", 0, make_rng(0))


def test_id_tables_json():
    import json
    tables = json.loads(make_env("tiger").id_tables_json())
    assert tables["observations"] == ["null", "left", "right"]
    assert tables["null_observation"] == 3
    assert make_env("heaven_hell").null_obs == 10
