import math

import numpy as np
import pytest

from ooorl.data import TransitionBuffer
from ooorl.env import (GridMazeEnv, PointMassWallEnv, SingleStateEnv, evaluate_policy,
                       generate_suboptimal_dataset, make_env, over_wall_policy, random_walk_dataset,
                       remove_near, run_episode, truncate_trajectories, under_wall_policy)

STEP = math.sqrt(0.5) * 0.05


@pytest.fixture(scope="module")
def d_off():
    return generate_suboptimal_dataset(PointMassWallEnv(seed=0), 100, 0.1, np.random.default_rng(0))


class TestPointMass:
    def test_noise_free_reset(self):
        env = PointMassWallEnv(seed=0, start_noise_std=0.0)
        np.testing.assert_array_equal(env.reset(), [0.0, 0.5])

    def test_reset_mean(self):
        env = PointMassWallEnv(seed=1)
        starts = np.array([env.reset() for _ in range(10_000)])
        assert np.all(np.abs(starts.mean(axis=0) - [0.0, 0.5]) < 0.002)

    def test_free_move_below_wall(self):
        env = PointMassWallEnv()
        nxt, r, done = env.transition(np.array([0.45, 0.05]), np.array([1.0, 0.0]))
        assert nxt[0] == pytest.approx(0.45 + STEP, abs=1e-12) and nxt[1] == 0.05
        assert STEP == pytest.approx(0.0354, abs=1e-4)

    def test_blocked_at_wall_face(self):
        env = PointMassWallEnv()
        nxt, _, _ = env.transition(np.array([0.48, 0.5]), np.array([1.0, 0.0]))
        assert nxt[0] < 0.5 and nxt[0] == pytest.approx(0.5)
        assert nxt[1] == 0.5

    def test_slides_along_wall(self):
        env = PointMassWallEnv()
        nxt, _, _ = env.transition(np.array([0.49, 0.5]), np.array([1.0, 1.0]))
        assert nxt[0] < 0.5 and nxt[1] == pytest.approx(0.5 + STEP)

    def test_goal_reward_terminal(self):
        env = PointMassWallEnv()
        nxt, r, done = env.transition(np.array([0.95, 0.15]), np.array([1.0, 0.0]))
        assert r == 1.0 and done

    def test_non_finite_action_rejected(self):
        env = PointMassWallEnv(seed=0)
        env.reset()
        with pytest.raises(ValueError):
            env.step(np.array([np.nan, 0.0]))

    def test_horizon_truncation(self):
        env = PointMassWallEnv(seed=0)
        ep = run_episode(env, lambda s: np.zeros(2))
        assert ep.length == 100 and not ep.success
        assert not ep.trajectory[-1].terminal

    def test_determinism(self):
        def roll(seed):
            env = PointMassWallEnv(seed=seed)
            rng = np.random.default_rng(seed)
            s = [env.reset()]
            for _ in range(200):
                nxt, _, term, trunc = env.step(rng.uniform(-1, 1, 2))
                s.append(env.reset() if term or trunc else nxt)
            return np.array(s)
        assert roll(3).tobytes() == roll(3).tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_collision_soundness(self, seed):
        env = PointMassWallEnv(seed=seed)
        rng = np.random.default_rng(seed)
        s = env.reset()
        for _ in range(3000):
            # biased towards the wall so crossings are attempted often
            a = np.clip(rng.normal([0.3, 0.0], 1.0), -1, 1)
            s0 = s
            s, _, term, trunc = env.step(a)
            assert np.all(s >= env.bounds[:, 0]) and np.all(s <= env.bounds[:, 1])
            assert not env.in_wall(s)
            route = env.crossing_route([(s0, s)])
            assert route in (None, "under", "over")
            if term or trunc:
                s = env.reset()

    def test_sparse_reward_sums(self):
        env = PointMassWallEnv(seed=0)
        rng = np.random.default_rng(0)
        for _ in range(20):
            ep = run_episode(env, lambda s: rng.uniform(-1, 1, 2))
            assert ep.episode_return in (0.0, 1.0)


class TestScriptedData:
    def test_hundred_over_wall_trajectories(self, d_off):
        env = PointMassWallEnv()
        trajs = d_off.trajectories()
        assert len(trajs) == 100
        for start, stop in trajs:
            pairs = [(d_off.states[i], d_off.next_states[i]) for i in range(start, stop)]
            assert env.crossing_route(pairs) == "over"

    def test_no_under_wall_states(self, d_off):
        s = d_off.states
        assert not np.any((np.abs(s[:, 0] - 0.5) < STEP) & (s[:, 1] < 0.1))

    def test_empty(self):
        assert len(generate_suboptimal_dataset(PointMassWallEnv(0), 0, 0.1, np.random.default_rng(0))) == 0

    def test_noise_free_identical(self):
        env = PointMassWallEnv(0, start_noise_std=0.0)
        buf = generate_suboptimal_dataset(env, 3, 0.0, np.random.default_rng(0))
        (a, b), (c, d), _ = buf.trajectories()
        np.testing.assert_array_equal(buf.states[a:b], buf.states[c:d])

    def test_under_wall_script_shorter(self):
        env = PointMassWallEnv(seed=0)
        under = evaluate_policy(env, under_wall_policy(env), 10)
        over = evaluate_policy(env, over_wall_policy(env), 10)
        assert under.success_rate == 1.0 and over.success_rate == 1.0
        assert under.mean_length < over.mean_length
        assert all(env.crossing_route(e) == "under" for e in under.episodes)

    def test_still_policy_fails(self):
        env = PointMassWallEnv(seed=0)
        assert evaluate_policy(env, lambda s: np.zeros(2), 3).success_rate == 0.0

    def test_zero_episodes_flagged_empty(self):
        summary = evaluate_policy(PointMassWallEnv(0), lambda s: np.zeros(2), 0)
        assert summary.empty and math.isnan(summary.success_rate)


def line_buffer(distances):
    buf = TransitionBuffer(2, 2)
    for d in distances:
        buf.add([d, 0.0], [0, 0], 0.0, [d, 0.0], False)
    buf.end_trajectory()
    return buf


def lengths_buffer(lengths):
    buf = TransitionBuffer(2, 2)
    for n in lengths:
        for i in range(n):
            buf.add([i, 0.0], [0, 0], 0.0, [i + 1, 0.0], False)
        buf.end_trajectory()
    return buf


class TestSurgery:
    def test_radius_zero_unchanged(self, d_off):
        assert remove_near(d_off, [[1.0, 0.15]], [0.0]).equals(d_off)

    def test_radius_covering_arena_empties(self, d_off):
        assert len(remove_near(d_off, [[0.5, 0.5]], [10.0])) == 0

    def test_distance_fixture(self):
        out = remove_near(line_buffer([1, 2, 3, 4]), [[0.0, 0.0]], [2.5])
        assert len(out) == 2
        np.testing.assert_array_equal(out.states[:, 0], [3, 4])

    def test_idempotent(self, d_off):
        once = remove_near(d_off, [[1.0, 0.15]], [0.3])
        assert remove_near(once, [[1.0, 0.15]], [0.3]).equals(once)
        dist = np.linalg.norm(once.states - [1.0, 0.15], axis=1)
        assert np.all(dist > 0.3)

    def test_truncate_counts(self):
        out = truncate_trajectories(lengths_buffer([5, 20, 40]), 20)
        assert [b - a for a, b in out.trajectories()] == [5, 20, 20]

    def test_truncate_to_one(self):
        out = truncate_trajectories(lengths_buffer([5, 20, 40]), 1)
        assert [b - a for a, b in out.trajectories()] == [1, 1, 1]

    def test_truncate_noop_bound(self, d_off):
        assert truncate_trajectories(d_off, 10_000).equals(d_off)


class TestGridMaze:
    def test_start_cell(self):
        env = GridMazeEnv(seed=0)
        s1, s2 = env.reset(), env.reset()
        np.testing.assert_array_equal(s1, s2)
        assert env.state_cell(s1) == env.start_cell

    def test_unreachable_goal_rejected(self):
        with pytest.raises(ValueError):
            GridMazeEnv(layout=["S#.", "##.", "..G"])

    def test_shortest_path_reaches_goal(self):
        env = GridMazeEnv(seed=0)
        assert env.shortest_path_length() is not None and env.shortest_path_length() < env.spec.horizon

    def test_random_walk_rarely_succeeds(self):
        env = GridMazeEnv(seed=0)
        buf = random_walk_dataset(env, 50, np.random.default_rng(0))
        assert len(buf.trajectories()) == 50
        assert np.all(np.isin(buf.rewards, [0.0, 1.0]))


def test_make_env_names():
    assert isinstance(make_env("pointmass", 0), PointMassWallEnv)
    assert isinstance(make_env("gridmaze", 0), GridMazeEnv)
    assert isinstance(make_env("single", 0), SingleStateEnv)
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("mujoco")
