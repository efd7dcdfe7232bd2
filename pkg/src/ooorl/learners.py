"""Actor-critic learners: implicit Q-learning and TD3.

Both are scikit-learn style estimators. Hyper-parameters are constructor
arguments (``get_params``/``set_params``/``clone`` work). ``fit`` trains
from a fresh initialization on a fixed buffer, unless ``warm_start`` is
set. ``predict`` returns deterministic actions. ``update`` performs a
single gradient step and is what the online loop calls.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .bonus import combined_reward
from .data import Batch, SamplerConfig, sample_reweighted, sample_uniform
from .nn import Adam, GaussianPolicy, Mlp, ema_update
from .validation import check_states


def expectile_loss(x, tau: float):
    """Elementwise asymmetric squared loss |tau - 1(x < 0)| * x**2."""
    x = np.asarray(x, dtype=np.float64)
    return np.abs(tau - (x < 0)) * x ** 2


@dataclass
class TrainDiagnostics:
    step: int
    value_loss: float
    q_loss: float
    policy_loss: float
    mean_q: float
    mean_weight: float
    mean_reward: float
    mean_extrinsic: float
    mean_intrinsic: float

    def as_dict(self):
        return asdict(self)


def _q_input(states, actions):
    return np.concatenate([states, actions], axis=1)


class _ActorCritic(BaseEstimator):
    """Shared plumbing: lazy init, seeding, acting, checkpoint naming."""

    def _rngs(self):
        ss = np.random.SeedSequence(self.random_state)
        init, sample, noise = ss.spawn(3)
        return (np.random.default_rng(init), np.random.default_rng(sample),
                np.random.default_rng(noise))

    def _check_initialized(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError(f"{type(self).__name__} is not initialized; call fit() or initialize()")

    def predict(self, states) -> np.ndarray:
        """Deterministic (mean) actions for a batch of states."""
        self._check_initialized()
        return self.policy_.mean(check_states(states, self.state_dim_)).astype(np.float64)

    def act(self, state, mode: str = "deterministic", rng=None) -> np.ndarray:
        self._check_initialized()
        s = check_states(state, self.state_dim_)
        if mode == "deterministic":
            return self.policy_.mean(s)[0].astype(np.float64)
        if mode != "stochastic":
            raise ValueError(f"unknown mode {mode!r}")
        return self._explore(s, self.noise_rng_ if rng is None else rng)[0].astype(np.float64)

    def as_policy(self):
        """Callable state -> deterministic action, for evaluation rollouts."""
        return lambda s: self.act(s, "deterministic")

    def _initial_buffer_check(self, buffer):
        if len(buffer) == 0:
            raise ValueError("cannot train on an empty buffer")

    def _sample(self, buffer) -> Batch:
        if self.highrew_mix > 0.0:
            return sample_reweighted(buffer, SamplerConfig(self.highrew_mix, self.batch_size),
                                     self.sample_rng_)
        return sample_uniform(buffer, self.batch_size, self.sample_rng_)

    def fit(self, buffer, n_steps: int | None = None):
        """Train for ``n_steps`` (default ``self.n_steps``) gradient steps on ``buffer``.

        Re-initializes all networks first unless ``warm_start`` is set and
        the estimator already has parameters.
        """
        steps = self.n_steps if n_steps is None else int(n_steps)
        if not (self.warm_start and hasattr(self, "policy_")):
            self.initialize(buffer.state_dim, buffer.action_dim)
        if steps > 0:
            self._initial_buffer_check(buffer)
        for _ in range(steps):
            self.update(buffer)
        return self

    def parameter_arrays(self) -> list[np.ndarray]:
        self._check_initialized()
        return [p for net in self._networks().values() for p in net.params]

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, net in self._networks().items():
            out.update(net.named_params(f"{name}."))
        return out


class IQLAgent(_ActorCritic):
    """Implicit Q-learning with twin critics and advantage-weighted policy extraction.

    Parameters
    ----------
    expectile : float
        Expectile of the value regression, in (0, 1).
    temperature : float
        AWR weights are ``exp((Q - V) / temperature)``, clipped at ``weight_clip``.
    highrew_mix : float
        Fraction of each batch drawn from reward-1 transitions.
    """

    def __init__(self, expectile=0.9, temperature=0.1, discount=0.99, ema_rate=0.005,
                 weight_clip=100.0, learning_rate=3e-4, hidden_sizes=(256, 256), batch_size=256,
                 n_steps=1000, highrew_mix=0.0, log_std_range=(-5.0, 2.0), warm_start=False,
                 random_state=None):
        self.expectile = expectile
        self.temperature = temperature
        self.discount = discount
        self.ema_rate = ema_rate
        self.weight_clip = weight_clip
        self.learning_rate = learning_rate
        self.hidden_sizes = hidden_sizes
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.highrew_mix = highrew_mix
        self.log_std_range = log_std_range
        self.warm_start = warm_start
        self.random_state = random_state

    def _validate(self):
        if not 0.0 < self.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.weight_clip <= 0:
            raise ValueError("weight_clip must be positive")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if not 0.0 <= self.highrew_mix <= 1.0:
            raise ValueError("highrew_mix must lie in [0, 1]")

    def initialize(self, state_dim: int, action_dim: int):
        self._validate()
        init, self.sample_rng_, self.noise_rng_ = self._rngs()
        h = tuple(self.hidden_sizes)
        self.state_dim_, self.action_dim_ = state_dim, action_dim
        self.policy_ = GaussianPolicy(state_dim, action_dim, h, rng=init,
                                      log_std_range=self.log_std_range)
        self.q1_ = Mlp([state_dim + action_dim, *h, 1], rng=init)
        self.q2_ = Mlp([state_dim + action_dim, *h, 1], rng=init)
        self.q1_target_ = self.q1_.copy()
        self.q2_target_ = self.q2_.copy()
        self.value_ = Mlp([state_dim, *h, 1], rng=init)
        lr = self.learning_rate
        self.policy_opt_ = Adam(self.policy_, lr)
        self.q1_opt_ = Adam(self.q1_, lr)
        self.q2_opt_ = Adam(self.q2_, lr)
        self.value_opt_ = Adam(self.value_, lr)
        self.n_updates_ = 0
        self.last_diagnostics_ = None
        return self

    def _networks(self):
        return {"policy": self.policy_, "q1": self.q1_, "q2": self.q2_, "q1_target": self.q1_target_,
                "q2_target": self.q2_target_, "value": self.value_}

    def _explore(self, s, rng):
        return self.policy_.sample(s, rng)

    def target_q(self, states, actions) -> np.ndarray:
        x = _q_input(states, actions)
        return np.minimum(self.q1_target_(x), self.q2_target_(x))[:, 0]

    def awr_weights(self, advantages) -> np.ndarray:
        adv = np.asarray(advantages, dtype=np.float64)
        if self.temperature == 0:
            w = np.where(adv > 0, self.weight_clip, np.where(adv == 0, 1.0, 0.0))
        else:
            with np.errstate(over="ignore"):
                w = np.exp(adv / self.temperature)
        w = np.minimum(w, self.weight_clip)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError("non-finite AWR weights")
        return w

    def value_step(self, states, actions) -> float:
        qt = self.target_q(states, actions)
        v, cache = self.value_.forward_cache(states)
        diff = qt - v[:, 0]
        weight = np.abs(self.expectile - (diff < 0))
        loss = float(np.mean(weight * diff ** 2))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite value loss")
        dv = (-2.0 / len(diff)) * weight * diff
        self.value_opt_.step(self.value_.backward(cache, dv[:, None]))
        return loss

    def policy_step(self, states, actions) -> tuple[float, float]:
        adv = self.target_q(states, actions) - self.value_(states)[:, 0]
        w = self.awr_weights(adv)
        loss, grads = self.policy_.weighted_nll_grad(states, actions, w)
        self.policy_opt_.step(grads)
        return loss, float(np.mean(w))

    def q_step(self, states, actions, rewards, next_states, terminals) -> tuple[float, float]:
        target = rewards + self.discount * (1.0 - terminals) * self.value_(next_states)[:, 0]
        x = _q_input(states, actions)
        total, mean_q = 0.0, 0.0
        for net, opt in ((self.q1_, self.q1_opt_), (self.q2_, self.q2_opt_)):
            q, cache = net.forward_cache(x)
            diff = q[:, 0] - target
            loss = float(np.mean(diff ** 2))
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite Q loss")
            opt.step(net.backward(cache, ((2.0 / len(diff)) * diff)[:, None]))
            total += loss
            mean_q += float(np.mean(q)) / 2
        ema_update(self.q1_target_, self.q1_, self.ema_rate)
        ema_update(self.q2_target_, self.q2_, self.ema_rate)
        return total, mean_q

    def update_batch(self, batch: Batch, rewards=None) -> TrainDiagnostics:
        """One IQL step (value, policy, twin Q, target EMA) on ``batch``.

        ``rewards`` overrides the batch's task rewards (e.g. shaped rewards).
        Only actions stored in the batch are ever fed to the critics.
        """
        self._check_initialized()
        s = batch.states.astype(np.float32)
        a = batch.actions.astype(np.float32)
        s2 = batch.next_states.astype(np.float32)
        r = batch.rewards if rewards is None else np.asarray(rewards, dtype=np.float64)
        t = batch.terminals.astype(np.float64)
        v_loss = self.value_step(s, a)
        pi_loss, mean_w = self.policy_step(s, a)
        q_loss, mean_q = self.q_step(s, a, r.astype(np.float32), s2, t.astype(np.float32))
        self.n_updates_ += 1
        self.last_diagnostics_ = TrainDiagnostics(
            self.n_updates_, v_loss, q_loss, pi_loss, mean_q, mean_w, float(np.mean(r)),
            float(np.mean(batch.rewards)), float(np.mean(r - batch.rewards)))
        return self.last_diagnostics_

    def update(self, buffer, bonus=None) -> TrainDiagnostics:
        """Sample a batch and take one step.

        With a bonus, rewards are shaped by the bonus and the bonus model is
        trained on the batch states afterwards.
        """
        batch = self._sample(buffer)
        rewards = None if bonus is None else combined_reward(bonus, batch.rewards, batch.states,
                                                             batch.actions)
        diag = self.update_batch(batch, rewards)
        if bonus is not None:
            bonus.train(batch.states)
        return diag


class TD3Agent(_ActorCritic):
    """TD3: twin critics, target policy smoothing, delayed deterministic actor.

    No pessimism of any kind; used to show what happens without it.
    """

    def __init__(self, discount=0.99, ema_rate=0.005, policy_delay=2, target_noise=0.2,
                 noise_clip=0.5, exploration_noise=0.1, learning_rate=3e-4,
                 hidden_sizes=(256, 256), batch_size=256, n_steps=1000, highrew_mix=0.0,
                 warm_start=False, random_state=None):
        self.discount = discount
        self.ema_rate = ema_rate
        self.policy_delay = policy_delay
        self.target_noise = target_noise
        self.noise_clip = noise_clip
        self.exploration_noise = exploration_noise
        self.learning_rate = learning_rate
        self.hidden_sizes = hidden_sizes
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.highrew_mix = highrew_mix
        self.warm_start = warm_start
        self.random_state = random_state

    def initialize(self, state_dim: int, action_dim: int):
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be at least 1")
        init, self.sample_rng_, self.noise_rng_ = self._rngs()
        h = tuple(self.hidden_sizes)
        self.state_dim_, self.action_dim_ = state_dim, action_dim
        self.policy_ = GaussianPolicy(state_dim, action_dim, h, rng=init)
        self.policy_target_ = self.policy_.copy()
        self.q1_ = Mlp([state_dim + action_dim, *h, 1], rng=init)
        self.q2_ = Mlp([state_dim + action_dim, *h, 1], rng=init)
        self.q1_target_ = self.q1_.copy()
        self.q2_target_ = self.q2_.copy()
        lr = self.learning_rate
        self.policy_opt_ = Adam(self.policy_, lr)
        self.q1_opt_ = Adam(self.q1_, lr)
        self.q2_opt_ = Adam(self.q2_, lr)
        self.n_updates_ = 0
        self.last_diagnostics_ = None
        self.last_policy_loss_ = float("nan")
        return self

    def _networks(self):
        return {"policy": self.policy_, "policy_target": self.policy_target_, "q1": self.q1_,
                "q2": self.q2_, "q1_target": self.q1_target_, "q2_target": self.q2_target_}

    def _explore(self, s, rng):
        mu = self.policy_.mean(s)
        return np.clip(mu + self.exploration_noise * rng.standard_normal(mu.shape), -1.0, 1.0)

    def update_batch(self, batch: Batch, rewards=None) -> TrainDiagnostics:
        self._check_initialized()
        s = batch.states.astype(np.float32)
        a = batch.actions.astype(np.float32)
        s2 = batch.next_states.astype(np.float32)
        r = batch.rewards if rewards is None else np.asarray(rewards, dtype=np.float64)
        t = batch.terminals.astype(np.float32)
        noise = np.clip(self.target_noise * self.noise_rng_.standard_normal(a.shape),
                        -self.noise_clip, self.noise_clip)
        a2 = np.clip(self.policy_target_.mean(s2) + noise, -1.0, 1.0)
        x2 = _q_input(s2, a2)
        q_next = np.minimum(self.q1_target_(x2), self.q2_target_(x2))[:, 0]
        target = r.astype(np.float32) + self.discount * (1.0 - t) * q_next
        x = _q_input(s, a)
        q_loss, mean_q = 0.0, 0.0
        for net, opt in ((self.q1_, self.q1_opt_), (self.q2_, self.q2_opt_)):
            q, cache = net.forward_cache(x)
            diff = q[:, 0] - target
            q_loss += float(np.mean(diff.astype(np.float64) ** 2))
            mean_q += float(np.mean(q)) / 2
            opt.step(net.backward(cache, ((2.0 / len(diff)) * diff)[:, None]))
        self.n_updates_ += 1
        if self.n_updates_ % self.policy_delay == 0:
            pi = self.policy_.mean(s)
            qpi, cache = self.q1_.forward_cache(_q_input(s, pi))
            _, dx = self.q1_.backward(cache, np.full_like(qpi, -1.0 / len(qpi)), input_grad=True)
            self.policy_opt_.step(self.policy_.mean_backward(s, dx[:, s.shape[1]:]))
            self.last_policy_loss_ = -float(np.mean(qpi))
            ema_update(self.policy_target_, self.policy_, self.ema_rate)
            ema_update(self.q1_target_, self.q1_, self.ema_rate)
            ema_update(self.q2_target_, self.q2_, self.ema_rate)
        self.last_diagnostics_ = TrainDiagnostics(
            self.n_updates_, 0.0, q_loss, self.last_policy_loss_, mean_q, 1.0, float(np.mean(r)),
            float(np.mean(batch.rewards)), float(np.mean(r - batch.rewards)))
        return self.last_diagnostics_

    def update(self, buffer, bonus=None) -> TrainDiagnostics:
        batch = self._sample(buffer)
        rewards = None if bonus is None else combined_reward(bonus, batch.rewards, batch.states,
                                                             batch.actions)
        diag = self.update_batch(batch, rewards)
        if bonus is not None:
            bonus.train(batch.states)
        return diag


def opt_update(agent, buffer, bonus) -> TrainDiagnostics:
    """Optimistic step: task reward plus exploration bonus."""
    return agent.update(buffer, bonus)


def pessm_update(agent: IQLAgent, buffer) -> TrainDiagnostics:
    """Pessimistic step on task rewards only; never sees a bonus."""
    return agent.update(buffer, None)


def td3_update(agent: TD3Agent, buffer) -> TrainDiagnostics:
    return agent.update(buffer, None)
