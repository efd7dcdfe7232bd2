import numpy as np
import pytest

from ooorl.bonus import (CountBonus, RndBonus, combined_reward, count_bonus, count_observe, freeze,
                         rnd_reward, rnd_train_step)


class TestCountBonus:
    def test_unvisited_is_coefficient(self):
        assert count_bonus(CountBonus(5.0), np.array([0.3, 0.3])) == 5.0

    def test_three_visits_halves(self):
        b = CountBonus(5.0)
        s = np.array([0.31, 0.72])
        for _ in range(3):
            count_observe(b, s)
        assert count_bonus(b, s) == 2.5

    def test_zero_coefficient(self):
        b = CountBonus(0.0)
        assert np.all(b.intrinsic(np.random.default_rng(0).uniform(size=(50, 2))) == 0)

    def test_observe_then_query(self):
        b = CountBonus(1.0)
        s = np.array([0.1, 0.1])
        count_observe(b, s)
        assert count_bonus(b, s) == pytest.approx(1 / np.sqrt(2))

    def test_same_bin_shared(self):
        b = CountBonus(1.0, bin_width=0.05)
        count_observe(b, np.array([0.101, 0.201]))
        assert b.count(np.array([0.149, 0.249])) == 1
        assert b.count(np.array([0.151, 0.249])) == 0

    def test_ten_thousand_visits(self):
        b = CountBonus(1.0)
        b.observe(np.zeros((10_000, 2)))
        assert count_bonus(b, np.zeros(2)) == pytest.approx(1 / np.sqrt(10_001))
        assert count_bonus(b, np.zeros(2)) == pytest.approx(0.01, abs=1e-4)

    def test_strictly_decreasing(self):
        b = CountBonus(5.0)
        s = np.array([0.5, 0.5])
        values = []
        for _ in range(30):
            values.append(count_bonus(b, s))
            count_observe(b, s)
        assert all(y < x for x, y in zip(values, values[1:]))

    def test_action_keyed_counts(self):
        b = CountBonus(1.0, action_bin_width=0.5)
        b.observe(np.zeros((1, 2)), np.array([[0.9, 0.9]]))
        assert b.count(np.zeros(2), np.array([0.9, 0.9])) == 1
        assert b.count(np.zeros(2), np.array([-0.9, 0.9])) == 0

    def test_counts_round_trip(self, tmp_path):
        b = CountBonus(1.0)
        b.observe(np.random.default_rng(0).uniform(-1, 1, (200, 2)))
        b.save_counts(tmp_path / "c.txt")
        other = CountBonus(1.0)
        other.load_counts(tmp_path / "c.txt")
        assert other.counts == b.counts


def fresh_rnd(seed=0, **kw):
    return RndBonus(2, hidden=(32, 32), embed_dim=16, rng=np.random.default_rng(seed), **kw)


class TestRnd:
    def test_cloned_nets_zero_reward(self):
        b = fresh_rnd()
        b.predictor.flat[...] = b.target.flat
        s = np.random.default_rng(1).normal(size=(100, 2))
        assert np.all(rnd_reward(b, s) == 0)

    def test_independent_nets_positive(self):
        s = np.random.default_rng(1).normal(size=(500, 2))
        assert np.all(rnd_reward(fresh_rnd(), s) > 0)

    def test_zero_fraction_leaves_predictor(self):
        b = fresh_rnd(train_fraction=0.0)
        before = b.predictor.flat.copy()
        rnd_train_step(b, np.ones((256, 2)))
        np.testing.assert_array_equal(b.predictor.flat, before)
        assert b.last_train_size == 0

    def test_quarter_of_batch_used(self):
        b = fresh_rnd(train_fraction=0.25)
        rnd_train_step(b, np.random.default_rng(0).normal(size=(256, 2)))
        assert b.last_train_size == 64

    def test_singleton_overfit(self):
        b = fresh_rnd(lr=1e-3, train_fraction=1.0)
        s = np.array([[0.3, -0.2]])
        for _ in range(1500):
            rnd_train_step(b, s)
        assert rnd_reward(b, s)[0] < 1e-4

    @pytest.mark.parametrize("seed", range(5))
    def test_novelty_ordering(self, seed):
        rng = np.random.default_rng(seed)
        b = fresh_rnd(seed, lr=1e-3)
        region_a = lambda n: rng.uniform([0.0, 0.0], [0.3, 0.3], (n, 2))
        for _ in range(400):
            rnd_train_step(b, region_a(128))
        on_a = rnd_reward(b, region_a(500)).mean()
        on_b = rnd_reward(b, rng.uniform([0.9, 0.9], [1.2, 1.2], (500, 2))).mean()
        assert on_a < on_b

    def test_target_never_changes(self):
        b = fresh_rnd()
        digest = b.target_digest()
        for _ in range(20):
            b.train(np.random.default_rng(0).normal(size=(64, 2)))
        assert b.target_digest() == digest

    def test_normalized_std_band(self):
        # rewards as emitted during training, pooled after a 50-batch warm-up
        rng = np.random.default_rng(2)
        b = fresh_rnd(2)
        emitted = []
        for i in range(300):
            s = rng.uniform(-1, 1, (256, 2))
            if i >= 50:
                emitted.append(b.normalized(s))
            b.train(s)
        emitted = np.concatenate(emitted)
        assert np.all(emitted >= 0)
        assert 0.5 <= emitted.std() <= 2.0


class TestFrozen:
    def test_snapshot_ignores_source_training(self):
        b = fresh_rnd()
        rng = np.random.default_rng(0)
        b.train(rng.normal(size=(64, 2)))
        snap = freeze(b)
        probe = rng.normal(size=(50, 2))
        before = snap.intrinsic(probe)
        for _ in range(50):
            b.train(rng.normal(size=(64, 2)))
        np.testing.assert_array_equal(snap.intrinsic(probe), before)
        assert snap.train(probe) == 0.0

    def test_two_snapshots_identical(self):
        b = fresh_rnd()
        b.train(np.random.default_rng(0).normal(size=(64, 2)))
        probe = np.random.default_rng(1).normal(size=(20, 2))
        np.testing.assert_array_equal(b.freeze().intrinsic(probe), b.freeze().intrinsic(probe))

    def test_snapshot_read_only(self):
        snap = fresh_rnd().freeze()
        with pytest.raises(ValueError):
            snap.predictor.flat[0] = 1.0


class TestCombinedReward:
    def test_zero_coefficient_passthrough(self):
        r = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(combined_reward(CountBonus(0.0), r, np.zeros((3, 2))), r)
        np.testing.assert_array_equal(combined_reward(None, r, np.zeros((3, 2))), r)

    def test_unvisited_count_state(self):
        out = combined_reward(CountBonus(5.0), np.zeros(1), np.array([[0.2, 0.2]]))
        assert out[0] == 5.0

    def test_rnd_coefficient_ten(self):
        b = fresh_rnd(coef=10.0)
        s = np.random.default_rng(0).normal(size=(10, 2))
        b.train(s)
        r = np.random.default_rng(1).uniform(size=10)
        np.testing.assert_allclose(combined_reward(b, r, s), r + 10 * b.normalized(s))

    def test_additive_in_task_reward(self):
        b = CountBonus(5.0)
        s = np.random.default_rng(0).uniform(size=(20, 2))
        b.observe(s[:10])
        r = np.zeros(20)
        np.testing.assert_allclose(combined_reward(b, r + 0.75, s) - combined_reward(b, r, s), 0.75)
