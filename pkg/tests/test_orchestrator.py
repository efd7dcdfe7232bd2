import numpy as np
import pytest

from ooorl.data import TransitionBuffer
from ooorl.env import PointMassWallEnv, generate_suboptimal_dataset, make_env
from ooorl.orchestrator import (OooConfig, RunRecord, _Seeds, intrinsic_trace, make_explorer,
                                offline_retrain, online_phase, parameter_digest, pretrain,
                                run_experiment)

TINY = dict(hidden_sizes=(16, 16), batch_size=32, pretrain_steps=50, online_steps=200,
            retrain_steps=40, eval_interval=100, eval_episodes=2, final_eval_episodes=2,
            diag_interval=50, rnd_hidden=(16, 16), rnd_embed_dim=8, n_traj=5)


def tiny(**kw):
    return OooConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def d_off():
    return generate_suboptimal_dataset(PointMassWallEnv(seed=0), 5, 0.1, np.random.default_rng(0))


class TestConfig:
    def test_checkpoint_beyond_budget(self):
        with pytest.raises(ValueError):
            tiny(retrain_schedule=(300,))

    def test_negative_steps(self):
        with pytest.raises(ValueError):
            tiny(online_steps=-1)

    def test_unknown_bonus(self):
        with pytest.raises(ValueError):
            tiny(bonus="curiosity")

    def test_non_positive_temperature(self):
        with pytest.raises(ValueError):
            tiny(retrain_temperature=0.0)

    def test_retrain_temperature_reaches_exploiter_only(self):
        from ooorl.orchestrator import make_exploiter
        cfg = tiny(temperature=0.5, retrain_temperature=0.01)
        assert make_exploiter(cfg, 0).temperature == 0.01
        assert make_explorer(cfg, 0).temperature == 0.5
        assert make_exploiter(tiny(temperature=0.5), 0).temperature == 0.5

    def test_default_schedule_is_end_of_budget(self):
        assert tiny().schedule == (200,)


class TestPretrain:
    def test_zero_steps_is_fresh_init(self):
        cfg = tiny(pretrain_steps=0)
        agent = pretrain(cfg, TransitionBuffer(2, 2), make_explorer(cfg, 7))
        fresh = make_explorer(cfg, 7).initialize(2, 2)
        assert parameter_digest(agent) == parameter_digest(fresh)

    def test_empty_dataset_rejected(self):
        cfg = tiny()
        with pytest.raises(ValueError, match="non-empty"):
            pretrain(cfg, TransitionBuffer(2, 2), make_explorer(cfg, 0))

    def test_deterministic(self, d_off):
        cfg = tiny()
        a = pretrain(cfg, d_off, make_explorer(cfg, 3))
        b = pretrain(cfg, d_off, make_explorer(cfg, 3))
        assert parameter_digest(a) == parameter_digest(b)


class TestOnlinePhase:
    def test_zero_budget(self, d_off):
        cfg = tiny(online_steps=0)
        env = make_env("pointmass", 0)
        agent = pretrain(cfg, d_off, make_explorer(cfg, 0))
        before = parameter_digest(agent)
        d_on = online_phase(cfg, env, agent, d_off)
        assert len(d_on) == 0 and parameter_digest(agent) == before

    def test_one_transition_per_step(self, d_off):
        cfg = tiny()
        record = RunRecord()
        d_on = online_phase(cfg, make_env("pointmass", 0), pretrain(cfg, d_off, make_explorer(cfg, 0)),
                            d_off, record=record)
        assert len(d_on) == cfg.online_steps == record.env_steps
        assert [e.step for e in record.evals] == [100, 200]


class TestRunExperiment:
    def test_checkpoints_and_budget(self):
        result = run_experiment(tiny(retrain_schedule=(50, 120, 200)))
        retrains = [e for e in result.record.evals if e.policy == "exploit"]
        assert [e.step for e in retrains] == [50, 120, 200]
        assert result.record.env_steps == 200 and len(result.d_on) == 200
        steps = [e.step for e in result.record.evals]
        assert steps == sorted(steps)

    def test_monotone_buffer_at_checkpoints(self, monkeypatch):
        import ooorl.orchestrator as orch
        sizes = []
        real = orch.offline_retrain

        def spy(config, d_off, d_on, *args, **kw):
            sizes.append(len(d_on))
            return real(config, d_off, d_on, *args, **kw)
        monkeypatch.setattr(orch, "offline_retrain", spy)
        run_experiment(tiny(retrain_schedule=(0, 60, 200)))
        assert sizes == [0, 60, 200]

    def test_retraining_leaves_exploration_untouched(self):
        cfg = tiny(retrain_schedule=(60, 140, 200), bonus="rnd")
        with_retrain = run_experiment(cfg)
        without = run_experiment(cfg, retrain=False)
        assert with_retrain.record.explorer_digests == without.record.explorer_digests
        assert with_retrain.record.intrinsic == without.record.intrinsic

    def test_sync_back_copies_exploiter(self, monkeypatch):
        cfg = tiny(sync_exploiter_back=True, retrain_schedule=(200,))
        result = run_experiment(cfg)
        for a, b in zip(result.explorer.parameter_arrays(), result.exploiter.parameter_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_same_seed_same_run(self):
        a, b = run_experiment(tiny()), run_experiment(tiny())
        assert a.record.explorer_digests == b.record.explorer_digests
        assert parameter_digest(a.exploiter) == parameter_digest(b.exploiter)

    def test_td3_exploitation(self):
        result = run_experiment(tiny(exploitation_learner="td3", bonus="none"))
        point = result.record.latest("exploit")
        assert np.isfinite(point.max_batch_q)

    def test_phase_label_on_failure(self):
        with pytest.raises(RuntimeError, match="pretrain phase failed"):
            run_experiment(tiny(), d_off=TransitionBuffer(2, 2))


class TestOfflineRetrain:
    def test_zero_steps_fresh(self, d_off):
        cfg = tiny(retrain_steps=0)
        agent, _, diverged = offline_retrain(cfg, d_off, TransitionBuffer(2, 2), random_state=9)
        fresh = make_explorer(cfg, 9).initialize(2, 2)
        assert parameter_digest(agent) == parameter_digest(fresh) and not diverged

    def test_deterministic(self, d_off):
        cfg = tiny()
        a, _, _ = offline_retrain(cfg, d_off, TransitionBuffer(2, 2), random_state=1)
        b, _, _ = offline_retrain(cfg, d_off, TransitionBuffer(2, 2), random_state=1)
        assert parameter_digest(a) == parameter_digest(b)

    def test_frozen_bonus_changes_rewards(self, d_off):
        from ooorl.bonus import RndBonus
        cfg = tiny(bonus="rnd", frozen_rnd_retrain=True)
        bonus = RndBonus(2, hidden=(16, 16), embed_dim=8, rng=np.random.default_rng(0))
        bonus.train(d_off.states)
        snap = bonus.freeze()
        plain, _, _ = offline_retrain(cfg, d_off, TransitionBuffer(2, 2), random_state=1)
        frozen, _, _ = offline_retrain(cfg, d_off, TransitionBuffer(2, 2), random_state=1, snapshot=snap)
        assert frozen.last_diagnostics_.mean_intrinsic > 0
        assert plain.last_diagnostics_.mean_intrinsic == 0
        assert parameter_digest(plain) != parameter_digest(frozen)

    def test_warm_start_continues(self, d_off):
        cfg = tiny(warm_start_retrain=True)
        first, _, _ = offline_retrain(cfg, d_off, TransitionBuffer(2, 2), random_state=1)
        n = first.n_updates_
        second, _, _ = offline_retrain(cfg, d_off, TransitionBuffer(2, 2), random_state=2, previous=first)
        assert second is first and second.n_updates_ == n + cfg.retrain_steps


class TestIntrinsicTrace:
    def test_zero_coefficient_all_zero(self):
        result = run_experiment(tiny(bonus="count", bonus_coef=0.0, online_steps=200))
        trace = intrinsic_trace(result.record, window=50, every=50)
        assert [t for t, _ in trace] == [50, 100, 150, 200]
        assert all(v == 0 for _, v in trace)

    def test_missing_bonus(self):
        with pytest.raises(ValueError):
            intrinsic_trace(RunRecord(has_bonus=False))

    def test_single_state_count_decay(self):
        cfg = tiny(env="single", bonus="count", bonus_coef=1.0, pretrain_steps=0, online_steps=2000,
                   eval_interval=0, diag_interval=0, hidden_sizes=(8,), batch_size=8)
        result = run_experiment(cfg, retrain=False)
        series = np.asarray(result.record.intrinsic)
        t = np.arange(2000)
        np.testing.assert_allclose(series, 1 / np.sqrt(t + 2))
