import numpy as np
import pytest

from adssm import envs
from adssm.envs import EnvError, TaskSpec


def task(env_id, params):
    return TaskSpec(env_id, tuple(params), 0)


class TestSampleTask:
    def test_reacher_goal_in_disk(self):
        rng = np.random.default_rng(0)
        goals = np.array([envs.sample_task("point-reacher-goal", rng).params for _ in range(2000)])
        r = np.linalg.norm(goals, axis=1)
        assert r.max() <= 1.0
        # uniform over area: P(r < 0.5) = 0.25
        assert abs(np.mean(r < 0.5) - 0.25) < 0.03

    def test_dir_angle_range(self):
        rng = np.random.default_rng(1)
        th = np.array([envs.sample_task("point-dir", rng).params[0] for _ in range(2000)])
        assert th.min() >= 0 and th.max() < 2 * np.pi

    def test_vel_range(self):
        rng = np.random.default_rng(2)
        v = np.array([envs.sample_task("point-vel", rng).params[0] for _ in range(2000)])
        assert v.min() >= 0.1 and v.max() <= 1.0

    @pytest.mark.parametrize("env_id", envs.ENV_IDS)
    def test_same_seed_same_task(self, env_id):
        a = envs.sample_task(env_id, np.random.default_rng(5))
        b = envs.sample_task(env_id, np.random.default_rng(5))
        assert a == b
        assert envs.task_from_seed(env_id, a.seed) == a

    def test_unknown_env(self):
        with pytest.raises(EnvError):
            envs.sample_task("cheetah", np.random.default_rng(0))

    def test_json_round_trip(self):
        t = envs.sample_task("point-dir", np.random.default_rng(3))
        assert TaskSpec.from_json(t.to_json()) == t


class TestReset:
    @pytest.mark.parametrize("env_id", envs.ENV_IDS)
    def test_obs_dim(self, env_id):
        _, obs = envs.reset(envs.sample_task(env_id, np.random.default_rng(0)), 0)
        assert obs.shape == (1, 4) and obs.dtype == np.float32

    def test_jitter_bounded(self):
        t = task("point-reacher-goal", (0.3, 0.3))
        _, obs = envs.reset([t] * 20000, np.random.default_rng(0))
        assert np.abs(obs).max() <= 5 * envs.RESET_JITTER + 1e-7
        assert np.std(obs) == pytest.approx(envs.RESET_JITTER, rel=0.05)

    def test_same_seed_same_obs(self):
        t = task("point-vel", (0.5,))
        np.testing.assert_array_equal(envs.reset(t, 9)[1], envs.reset(t, 9)[1])

    def test_mixed_envs_rejected(self):
        with pytest.raises(EnvError):
            envs.reset([task("point-vel", (0.5,)), task("point-dir", (0.5,))], 0)


def state_at(env_id, params, pos, vel, t=0, horizon=None):
    horizon = horizon or envs.HORIZON[env_id]
    return envs.EnvState(env_id, np.array([params], float), np.array([pos], np.float32),
                         np.array([vel], np.float32), t, horizon)


class TestStep:
    def test_dynamics(self):
        s = state_at("point-vel", (0.5,), (0.0, 0.0), (1.0, -1.0))
        s2, obs, _, done = envs.step(s, np.array([[0.5, 3.0]]))
        np.testing.assert_allclose(s2.vel, [[0.8 + 0.1, -0.8 + 0.2]], rtol=1e-6)
        np.testing.assert_allclose(s2.pos, 0.1 * s2.vel, rtol=1e-6)
        np.testing.assert_array_equal(obs, np.concatenate([s2.pos, s2.vel], -1))
        assert s2.t == 1 and not done

    def test_reacher_at_goal_zero_reward(self):
        # zero velocity and zero action keep the mass exactly on the goal
        s = state_at("point-reacher-goal", (0.25, -0.5), (0.25, -0.5), (0.0, 0.0))
        _, _, r, _ = envs.step(s, np.zeros((1, 2)))
        assert r[0] == 0.0

    def test_vel_at_target_zero_reward(self):
        # v' = 0.8 * 0.5 + 0.2 * 0.5 = 0.5
        s = state_at("point-vel", (0.5,), (0, 0), (0.5, 0.0))
        _, _, r, _ = envs.step(s, np.array([[0.5, 0.0]]))
        assert r[0] == pytest.approx(0.0, abs=1e-7)

    def test_dir_unit_speed(self):
        # v' = 0.8 + 0.2 * 1 = 1 along theta = 0; reward = 1 - 0.01
        s = state_at("point-dir", (0.0,), (0, 0), (1.0, 0.0))
        _, _, r, _ = envs.step(s, np.array([[1.0, 0.0]]))
        assert r[0] == pytest.approx(1.0 - envs.ACTION_COST, abs=1e-6)

    def test_action_clipped(self):
        s = state_at("point-vel", (0.5,), (0, 0), (0, 0))
        a = envs.step(s, np.array([[5.0, -5.0]]))[0]
        b = envs.step(s, np.array([[1.0, -1.0]]))[0]
        np.testing.assert_array_equal(a.vel, b.vel)

    def test_done_exactly_at_horizon(self):
        s, _ = envs.reset(task("point-reacher-goal", (0, 0)), 0)
        flags = []
        while not s.done:
            s, _, _, d = envs.step(s, np.zeros((1, 2)))
            flags.append(d)
        assert len(flags) == 20 and flags[-1] and not any(flags[:-1])
        with pytest.raises(EnvError):
            envs.step(s, np.zeros((1, 2)))

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_action(self, bad):
        s, _ = envs.reset(task("point-dir", (1.0,)), 0)
        with pytest.raises(EnvError):
            envs.step(s, np.array([[bad, 0.0]]))

    def test_pure(self):
        s, _ = envs.reset(task("point-dir", (1.0,)), 3)
        a = np.array([[0.3, -0.2]])
        out1, out2 = envs.step(s, a), envs.step(s, a)
        np.testing.assert_array_equal(out1[1], out2[1])
        np.testing.assert_array_equal(out1[2], out2[2])
        assert s.t == 0


class TestHiddenTask:
    @pytest.mark.parametrize("env_id", envs.ENV_IDS)
    def test_obs_bytes_independent_of_task(self, env_id):
        rng = np.random.default_rng(0)
        t1, t2 = envs.sample_task(env_id, rng), envs.sample_task(env_id, rng)
        s1, o1 = envs.reset(t1, 4)
        s2, o2 = envs.reset(t2, 4)
        assert o1.tobytes() == o2.tobytes()
        a = np.array([[0.4, -0.7]])
        assert envs.step(s1, a)[1].tobytes() == envs.step(s2, a)[1].tobytes()


class TestReferenceLines:
    def test_reacher_return_bounds(self):
        rng = np.random.default_rng(0)
        tasks = [envs.sample_task("point-reacher-goal", rng) for _ in range(20)]
        # worst case: full thrust in a fixed diagonal, away from the goal
        worst = envs.rollout_returns(tasks, lambda s: np.ones_like(s.pos), rng)
        rand = envs.random_returns(tasks, rng, episodes=5)
        for r in (worst, rand):
            assert np.all(r <= 0) and np.all(r >= -20 * 2.5)

    @pytest.mark.parametrize("env_id", envs.ENV_IDS)
    def test_oracle_beats_random(self, env_id):
        rng = np.random.default_rng(1)
        tasks = [envs.sample_task(env_id, rng) for _ in range(10)]
        orc = envs.oracle_returns(tasks, rng).mean()
        rnd = envs.random_returns(tasks, rng).mean()
        assert orc > rnd + 5

    def test_dir_oracle_is_stepwise_optimal(self):
        # perturbing the oracle's actions never improves the (deterministic) return
        t = task("point-dir", (0.7,))
        rng = np.random.default_rng(2)
        base = envs.oracle_returns([t], np.random.default_rng(0))[0, 0]

        def perturbed(s):
            a = envs.oracle_action(s.env_id, s.task_params, s.pos, s.vel, s.t, s.horizon)
            return a + rng.normal(0, 0.05, a.shape)

        for _ in range(10):
            assert envs.rollout_returns([t], perturbed, np.random.default_rng(0))[0, 0] <= base + 1e-5

    def test_normalized(self):
        assert envs.normalized(np.array([5.0]), np.array([0.0]), np.array([10.0]))[0] == 0.5
