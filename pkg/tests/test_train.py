import json

import numpy as np
import pytest

import istate_pg.train as train_mod
from istate_pg.core import make_rng
from istate_pg.envs import make_env
from istate_pg.policy import JointPolicy, logprob_grad
from istate_pg.train import (
    ENV_DEFAULTS,
    LearningCurve,
    NonFiniteError,
    TrainConfig,
    batch_grad,
    collect_batch,
    collect_rollout,
    env_streams,
    evaluate,
    make_optimizers,
    train,
    train_step,
)

UP, RIGHT, DOWN, LEFT = range(4)


class TablePolicy(JointPolicy):
    """Policy whose log-prob tables are fixed arrays (rollouts only use the tables)."""

    def __init__(self, env, k, log_pi, log_xi):
        super().__init__(env.num_observations, env.num_actions, k, hidden_width=1,
                         env_name=env.name)
        self._tables = (log_pi, log_xi)

    def log_prob_tables(self):
        return self._tables


def optimal_heaven_hell():
    env = make_env("heaven_hell")
    n, k = env.num_observations, 2
    pi = np.full((n, k, 4), 1e-12)
    pi[:, :, UP] = 1.0
    for tile, y, a in [(1, 0, LEFT), (1, 1, LEFT), (3, 0, RIGHT), (3, 1, RIGHT),
                       (2, 0, LEFT), (2, 1, RIGHT)]:
        pi[tile, y] = 1e-12
        pi[tile, y, a] = 1.0
    xi = np.full((n + 1, k, k), 1e-12)
    xi[:, 0, 0] = xi[:, 1, 1] = 1.0  # keep
    xi[8] = [[1.0, 1e-12]] * k  # heaven left -> y=0
    xi[9] = [[1e-12, 1.0]] * k  # heaven right -> y=1
    norm = lambda t: np.log(t / t.sum(-1, keepdims=True))  # noqa: E731
    return env, TablePolicy(env, k, norm(pi), norm(xi))


def small_policy(env_name="tiger", k=3, seed=0, hidden=8):
    env = make_env(env_name)
    pol = JointPolicy.for_env(env, k, rng=make_rng(seed, 0), hidden_width=hidden, init_scale=0.5)
    return env, pol


# -- rollouts ---------------------------------------------------------------------

def test_optimal_policy_fixture_scores_095():
    env, pol = optimal_heaven_hell()
    batch = collect_batch(env, pol, env_streams(0, 400), 30, greedy=True)
    assert np.allclose(batch.returns, 0.95, atol=1e-12)
    assert batch.terminated.all()
    # both sides of the maze appear
    assert set(batch.obs[:, 0]) == {8, 9}


def test_optimal_policy_sampled_matches_greedy_with_peaked_tables():
    env, pol = optimal_heaven_hell()
    batch = collect_batch(env, pol, env_streams(1, 200), 30, greedy=False)
    assert np.allclose(batch.returns, 0.95, atol=1e-12)


def test_horizon_zero_gives_empty_trajectory():
    env, pol = small_policy()
    traj = collect_rollout(env, pol, 0, make_rng(0, 1))
    assert traj.steps == ()
    assert traj.episodic_return() == 0.0
    assert not traj.terminated


def test_first_internal_state_is_zero():
    env, pol = small_policy("heaven_hell", k=4)
    batch = collect_batch(env, pol, env_streams(3, 50), 30)
    assert (batch.internal[:, 0] == 0).all()
    assert (batch.log_prob_internal[:, 0] == 0).all()


def test_recorded_log_probs_match_policy():
    env, pol = small_policy("heaven_hell", k=3)
    traj = collect_rollout(env, pol, 30, make_rng(5, 1))
    o_prev, y_prev = pol.null_obs, 0
    for t, s in enumerate(traj.steps):
        assert s.log_prob_action == pytest.approx(
            np.log(pol.action_probs(s.obs, s.internal)[0, s.action]), abs=1e-12)
        if t > 0:
            assert s.log_prob_internal == pytest.approx(
                np.log(pol.internal_probs(o_prev, y_prev)[0, s.internal]), abs=1e-12)
        o_prev, y_prev = s.obs, s.internal


def test_worker_count_does_not_change_results():
    env, pol = small_policy("heaven_hell", k=2)
    a = collect_batch(env, pol, env_streams(7, 1300), 30, workers=1)
    b = collect_batch(env, pol, env_streams(7, 1300), 30, workers=3)
    for name in ("obs", "internal", "action", "reward", "length", "terminated"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_batch_is_prefix_stable():
    # episode i depends only on its own stream
    env, pol = small_policy()
    a = collect_batch(env, pol, env_streams(2, 10), 30)
    b = collect_batch(env, pol, env_streams(2, 4), 30)
    assert np.array_equal(a.action[:4], b.action)


def test_dimension_mismatch_rejected():
    _, pol = small_policy("tiger")
    with pytest.raises(ValueError):
        collect_batch(make_env("heaven_hell"), pol, env_streams(0, 2), 30)


# -- gradients --------------------------------------------------------------------

@pytest.mark.parametrize("which", ["joint", "action_only", "internal_only"])
def test_batch_grad_equals_sum_of_trajectory_grads(which):
    env, pol = small_policy("heaven_hell", k=3)
    batch = collect_batch(env, pol, env_streams(4, 25), 30)
    got = batch_grad(pol, batch, batch.returns, which)
    want = sum(logprob_grad(pol, batch.trajectory(i), which).vector for i in range(len(batch)))
    assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


def test_batch_grad_is_linear_in_weights():
    env, pol = small_policy(k=2)
    batch = collect_batch(env, pol, env_streams(4, 30), 30)
    w = batch.returns
    g = batch_grad(pol, batch, w, "joint")
    g2 = batch_grad(pol, batch, w + 3.0, "joint")
    g1 = batch_grad(pol, batch, np.ones(len(batch)), "joint")
    assert np.allclose(g2 - g, 3.0 * g1, atol=1e-10)
    assert np.all(batch_grad(pol, batch, np.zeros(len(batch)), "joint") == 0)


def test_baseline_with_equal_returns_gives_zero_gradient():
    # horizon 1 and a policy that always listens: every return is -0.01
    env = make_env("tiger", horizon=1)
    pol = JointPolicy.for_env(env, 2, rng=make_rng(0, 0))
    pol.view("a_b2")[:] = [60.0, -60.0, -60.0]
    batch = collect_batch(env, pol, env_streams(0, 20), 1)
    assert np.all(batch.returns == -0.01)
    r = batch.returns
    g = batch_grad(pol, batch, r - r.mean(), "joint")
    # only rounding in the batch mean survives
    assert np.max(np.abs(g)) < 1e-14


# -- update modes -----------------------------------------------------------------

def _run(mode, updates, seed=3, **kw):
    cfg = TrainConfig("heaven_hell", mode, num_updates=updates, batch_envs=20, seed=seed, **kw)
    return train(cfg).policy.params


def test_separate_and_end_to_end_coincide():
    a = _run("separate", 30)
    b = _run("end_to_end", 30)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_separate_step_sizes_diverge_when_different():
    a = _run("separate", 10, step_size_internal=0.05)
    b = _run("end_to_end", 10)
    assert np.max(np.abs(a - b)) > 1e-6


def test_reinforce_never_touches_memory():
    cfg = TrainConfig("heaven_hell", "reinforce", num_updates=15, batch_envs=20)
    assert cfg.num_internal_states == 1
    pol = train(cfg).policy
    env = make_env("heaven_hell")
    init = JointPolicy.for_env(env, 1, rng=make_rng(0, 0))
    assert np.array_equal(pol.params[pol.internal_slice], init.params[init.internal_slice])
    assert not np.array_equal(pol.params[pol.action_slice], init.params[init.action_slice])


def test_memory_init_applied_before_training():
    pol = train(TrainConfig("heaven_hell", num_updates=0, memory_init=0.8)).policy
    for y in range(2):
        assert pol.internal_probs(5, y)[0, y] == pytest.approx(0.8, abs=0.03)
    plain = train(TrainConfig("heaven_hell", num_updates=0, memory_init=0.0)).policy
    assert plain.internal_probs(5, 0)[0, 0] == pytest.approx(0.5, abs=0.03)


def test_shared_trunk_trains():
    cfg = TrainConfig("tiger", "end_to_end", num_updates=5, batch_envs=10, shared_trunk=True)
    pol = train(cfg).policy
    assert pol.shared_trunk and np.all(np.isfinite(pol.params))


def test_reinforce_learns_to_listen_on_one_step_tiger():
    # with one step, listening (-0.01) beats opening (-0.45 on average)
    cfg = TrainConfig("tiger", "reinforce", num_updates=150, batch_envs=50, horizon=1)
    res = train(cfg)
    mean, _ = evaluate(res.policy, "tiger", 200, horizon=1)
    assert mean == pytest.approx(-0.01)


def test_non_finite_gradient_reports_update(monkeypatch):
    real = train_mod.batch_grad

    def bad(*args):
        g = real(*args)
        if bad.calls == 3:
            g[0] = np.inf
        bad.calls += 1
        return g

    bad.calls = 0
    monkeypatch.setattr(train_mod, "batch_grad", bad)
    with pytest.raises(NonFiniteError, match="update 3"):
        train(TrainConfig("tiger", num_updates=10, batch_envs=5))


# -- config -----------------------------------------------------------------------

def test_config_defaults():
    assert TrainConfig("heaven_hell").num_internal_states == 2
    assert TrainConfig("tiger").num_internal_states == 10
    for name, defaults in ENV_DEFAULTS.items():
        cfg = TrainConfig(name)
        assert {k: getattr(cfg, k) for k in defaults} == defaults
    # explicit values win over environment defaults
    plain = TrainConfig("tiger", baseline=False, entropy=0.0, entropy_internal=0.0)
    assert (plain.baseline, plain.entropy, plain.entropy_internal) == (False, 0.0, 0.0)
    cfg = TrainConfig("tiger", step_size=0.3)
    assert cfg.step_size_internal == 0.3


@pytest.mark.parametrize("kw", [
    dict(mode="reinforce", num_internal_states=5),
    dict(mode="separate", shared_trunk=True),
    dict(mode="bogus"),
    dict(num_internal_states=0),
    dict(batch_envs=0),
    dict(entropy=-0.1),
    dict(memory_init=1.0),
])
def test_config_rejects(kw):
    with pytest.raises(ValueError):
        TrainConfig("tiger", **kw)


def test_config_dict_roundtrip_and_errors():
    cfg = TrainConfig("tiger", seed=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="env_name"):
        TrainConfig.from_dict({"mode": "separate"})
    with pytest.raises(ValueError, match="unknown config keys"):
        TrainConfig.from_dict({"env_name": "tiger", "lr": 1})


# -- outputs ----------------------------------------------------------------------

def test_curve_csv_roundtrip():
    c = LearningCurve()
    c.append(10, 1000, np.array([0.1, 0.2, 0.3]))
    c.append(20, 2000, np.array([1 / 3, 0.5]))
    text = c.to_csv()
    assert text.splitlines()[0] == "update,episodes,mean_return,stderr_return"
    back = LearningCurve.from_csv(text)
    assert back.mean_return == c.mean_return and back.stderr_return == c.stderr_return


def test_run_directory_outputs_are_reproducible(tmp_path):
    cfg = TrainConfig("tiger", num_updates=12, batch_envs=10, eval_every=5, seed=9)
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    for name in ("curve.csv", "policy.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["config"] == cfg.to_dict()
    curve = LearningCurve.from_csv((tmp_path / "a" / "curve.csv").read_text())
    assert curve.update == [5, 10, 12]
    assert curve.episodes == [50, 100, 120]


def test_evaluate_rejects_zero_episodes():
    _, pol = small_policy()
    with pytest.raises(ValueError):
        evaluate(pol, "tiger", 0)
