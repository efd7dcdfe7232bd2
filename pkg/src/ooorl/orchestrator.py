"""Offline pre-training, optimistic online collection, pessimistic retraining.

The exploration learner is the only agent that acts in the environment.
It trains on task reward plus an exploration bonus. At scheduled online
steps a separate exploitation learner is trained from scratch on the
collected data with task reward only. Evaluation rollouts run on a
cloned environment and do not count against the interaction budget.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np
from sklearn.base import clone

from .bonus import CountBonus, FrozenBonusSnapshot, RndBonus
from .data import MergedView, TransitionBuffer, merge_view
from .env import Env, PointMassWallEnv, evaluate_policy, generate_suboptimal_dataset, make_env
from .learners import IQLAgent, TD3Agent, opt_update, pessm_update

log = logging.getLogger(__name__)

PHASES = ("pretrain", "online", "retrain")


@dataclass
class OooConfig:
    # environment and offline data
    env: str = "pointmass"
    dataset: str | None = None
    n_traj: int = 100
    action_noise_std: float = 0.1
    # budgets
    pretrain_steps: int = 25_000
    online_steps: int = 50_000
    retrain_steps: int = 200_000
    retrain_schedule: tuple[int, ...] = ()
    eval_interval: int = 5_000
    eval_episodes: int = 10
    final_eval_episodes: int = 50
    diag_interval: int = 1_000
    # exploration bonus
    bonus: str = "count"
    bonus_coef: float = 5.0
    bonus_in_pretrain: bool = True
    count_bin_width: float = 0.05
    count_action_bin_width: float | None = None
    rnd_hidden: tuple[int, ...] = (512, 512)
    rnd_embed_dim: int = 64
    rnd_train_fraction: float = 0.25
    rnd_lr: float = 1e-4
    # IQL (both learners)
    expectile: float = 0.9
    temperature: float = 0.1
    retrain_temperature: float | None = None
    discount: float = 0.99
    ema_rate: float = 0.005
    weight_clip: float = 100.0
    learning_rate: float = 3e-4
    hidden_sizes: tuple[int, ...] = (256, 256)
    batch_size: int = 256
    highrew_mix: float = 0.5
    # TD3 exploitation ablation
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    exploration_noise: float = 0.1
    # ablation switches
    exploitation_learner: str = "iql"
    frozen_rnd_retrain: bool = False
    warm_start_retrain: bool = False
    sync_exploiter_back: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("pretrain_steps", "online_steps", "retrain_steps", "eval_interval",
                     "eval_episodes", "final_eval_episodes", "diag_interval", "n_traj"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 0:
                raise ValueError(f"{name} must be a non-negative integer")
        self.retrain_schedule = tuple(int(t) for t in self.retrain_schedule)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.rnd_hidden = tuple(int(h) for h in self.rnd_hidden)
        if any(t < 0 or t > self.online_steps for t in self.retrain_schedule):
            raise ValueError("retrain checkpoints must lie in [0, online_steps]")
        if list(self.retrain_schedule) != sorted(set(self.retrain_schedule)):
            raise ValueError("retrain_schedule must be strictly increasing")
        if self.bonus not in ("none", "count", "rnd"):
            raise ValueError(f"unknown bonus {self.bonus!r}")
        if self.exploitation_learner not in ("iql", "td3"):
            raise ValueError(f"unknown exploitation learner {self.exploitation_learner!r}")
        if self.frozen_rnd_retrain and self.bonus != "rnd":
            raise ValueError("frozen_rnd_retrain requires bonus='rnd'")
        if self.temperature <= 0 or (self.retrain_temperature is not None and self.retrain_temperature <= 0):
            raise ValueError("temperatures must be positive")
        if not 0.0 <= self.highrew_mix <= 1.0:
            raise ValueError("highrew_mix must lie in [0, 1]")

    @property
    def schedule(self) -> tuple[int, ...]:
        """Retraining checkpoints; lazily just the end of the budget by default."""
        return self.retrain_schedule or (self.online_steps,)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EvalPoint:
    step: int
    phase: str
    policy: str
    mean_return: float
    success_rate: float
    mean_length: float
    under_wall_fraction: float = float("nan")
    mean_intrinsic: float = float("nan")
    max_batch_q: float = float("nan")


@dataclass
class RunRecord:
    evals: list[EvalPoint] = field(default_factory=list)
    intrinsic: list[float] = field(default_factory=list)
    intrinsic_normalized: list[float] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)
    explorer_digests: list[tuple[int, str]] = field(default_factory=list)
    visitation: np.ndarray | None = None
    env_steps: int = 0
    has_bonus: bool = False

    def latest(self, policy: str) -> EvalPoint | None:
        rows = [e for e in self.evals if e.policy == policy]
        return rows[-1] if rows else None


@dataclass
class RunResult:
    record: RunRecord
    explorer: IQLAgent
    exploiter: IQLAgent | TD3Agent | None
    bonus: CountBonus | RndBonus | None
    d_off: TransitionBuffer
    d_on: TransitionBuffer


class _Seeds:
    """Independent random streams per concern, derived from one seed."""

    def __init__(self, seed: int):
        root = np.random.SeedSequence(seed)
        data, env, explorer, bonus, evaluation, retrain = root.spawn(6)
        self.data = np.random.default_rng(data)
        self.env = int(env.generate_state(1)[0])
        self.explorer = int(explorer.generate_state(1)[0])
        self.bonus = np.random.default_rng(bonus)
        self._eval = evaluation
        self._retrain = retrain

    def eval_seed(self, k: int) -> int:
        return int(self._eval.spawn(k + 1)[k].generate_state(1)[0])

    def retrain_seed(self, k: int) -> int:
        return int(np.random.SeedSequence(self._retrain.entropy,
                                          spawn_key=self._retrain.spawn_key + (k,)).generate_state(1)[0])


def parameter_digest(agent) -> str:
    h = hashlib.sha256()
    for p in agent.parameter_arrays():
        h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def make_explorer(config: OooConfig, random_state: int) -> IQLAgent:
    return IQLAgent(expectile=config.expectile, temperature=config.temperature,
                    discount=config.discount, ema_rate=config.ema_rate,
                    weight_clip=config.weight_clip, learning_rate=config.learning_rate,
                    hidden_sizes=config.hidden_sizes, batch_size=config.batch_size,
                    n_steps=config.pretrain_steps, highrew_mix=0.0, random_state=random_state)


def make_exploiter(config: OooConfig, random_state: int):
    if config.exploitation_learner == "td3":
        return TD3Agent(discount=config.discount, ema_rate=config.ema_rate,
                        policy_delay=config.policy_delay, target_noise=config.target_noise,
                        noise_clip=config.noise_clip, exploration_noise=config.exploration_noise,
                        learning_rate=config.learning_rate, hidden_sizes=config.hidden_sizes,
                        batch_size=config.batch_size, n_steps=config.retrain_steps,
                        highrew_mix=config.highrew_mix, warm_start=config.warm_start_retrain,
                        random_state=random_state)
    explorer = make_explorer(config, random_state)
    temperature = config.temperature if config.retrain_temperature is None else config.retrain_temperature
    return clone(explorer).set_params(n_steps=config.retrain_steps, highrew_mix=config.highrew_mix,
                                      warm_start=config.warm_start_retrain, temperature=temperature)


def make_bonus(config: OooConfig, state_dim: int, rng: np.random.Generator):
    if config.bonus == "count":
        return CountBonus(config.bonus_coef, config.count_bin_width, config.count_action_bin_width)
    if config.bonus == "rnd":
        return RndBonus(state_dim, config.bonus_coef, hidden=config.rnd_hidden,
                        embed_dim=config.rnd_embed_dim, train_fraction=config.rnd_train_fraction,
                        lr=config.rnd_lr, rng=rng)
    return None


def offline_dataset(config: OooConfig, env: Env, rng: np.random.Generator) -> TransitionBuffer:
    if config.dataset:
        from .data import load_dataset
        return load_dataset(config.dataset)
    if isinstance(env, PointMassWallEnv):
        return generate_suboptimal_dataset(env.clone(), config.n_traj, config.action_noise_std, rng)
    return TransitionBuffer(env.spec.state_dim, env.spec.action_dim)


def evaluate(env: Env, agent, n_episodes: int, seed: int):
    """Deterministic rollouts on a fresh clone; returns (summary, under-wall fraction)."""
    eval_env = env.clone(seed)
    params = agent.parameter_arrays()
    if not all(np.all(np.isfinite(p)) for p in params):
        return None, float("nan")
    summary = evaluate_policy(eval_env, agent.as_policy(), n_episodes)
    under = float("nan")
    if isinstance(eval_env, PointMassWallEnv):
        wins = [e for e in summary.episodes if e.success]
        if wins:
            under = float(np.mean([eval_env.crossing_route(e) == "under" for e in wins]))
    return summary, under


def _eval_point(step, phase, policy, summary, under, **extra) -> EvalPoint:
    if summary is None:
        return EvalPoint(step, phase, policy, 0.0, 0.0, float("nan"), under, **extra)
    return EvalPoint(step, phase, policy, summary.mean_return, summary.success_rate,
                     summary.mean_length, under, **extra)


Emit = Callable[[str, int, str, float], None]


def _noop(phase, step, name, value):
    pass


def pretrain(config: OooConfig, d_off: TransitionBuffer, explorer: IQLAgent, bonus=None,
             emit: Emit = _noop) -> IQLAgent:
    """Initialize ``explorer`` and run ``pretrain_steps`` optimistic steps on D_off."""
    explorer.initialize(d_off.state_dim, d_off.action_dim)
    if config.pretrain_steps and len(d_off) == 0:
        raise ValueError("pretraining needs a non-empty offline dataset")
    if bonus is not None and len(d_off):
        bonus.observe(d_off.states, d_off.actions)
    active = bonus if config.bonus_in_pretrain else None
    for i in range(1, config.pretrain_steps + 1):
        diag = opt_update(explorer, d_off, active)
        if config.diag_interval and i % config.diag_interval == 0:
            for k, v in diag.as_dict().items():
                if k != "step":
                    emit("pretrain", i, k, v)
    return explorer


def offline_retrain(config: OooConfig, d_off: TransitionBuffer, d_on: TransitionBuffer,
                    random_state: int, snapshot: FrozenBonusSnapshot | None = None,
                    previous=None, emit: Emit = _noop, step: int = 0):
    """Train an exploitation learner on D_off + D_on.

    Task rewards only, unless ``snapshot`` is given, in which case the frozen
    bonus is added (the frozen-bonus control). ``previous`` is continued
    instead of re-initialized when warm-starting.
    Returns ``(agent, max_mean_batch_q, diverged)``.
    """
    view = merge_view(d_off, d_on)
    if previous is not None and config.warm_start_retrain:
        agent = previous
    else:
        agent = make_exploiter(config, random_state)
        agent.initialize(view.state_dim, view.action_dim)
    if config.retrain_steps and len(view) == 0:
        raise ValueError("retraining needs data")
    max_q, diverged = -np.inf, False
    for i in range(1, config.retrain_steps + 1):
        try:
            if snapshot is not None:
                diag = opt_update(agent, view, snapshot)
            elif isinstance(agent, TD3Agent):
                diag = agent.update(view)
            else:
                diag = pessm_update(agent, view)
        except FloatingPointError:
            # divergence is an outcome here, not a crash
            diverged = True
            log.warning("exploitation training diverged at retrain step %d", i)
            break
        max_q = max(max_q, diag.mean_q)
        if config.diag_interval and i % config.diag_interval == 0:
            emit("retrain", step, f"batch_q@{i}", diag.mean_q)
    return agent, float(max_q), diverged


def online_phase(config: OooConfig, env: Env, explorer: IQLAgent, d_off: TransitionBuffer,
                 bonus=None, record: RunRecord | None = None, emit: Emit = _noop,
                 on_checkpoint: Callable[[int, TransitionBuffer], None] | None = None,
                 seeds: _Seeds | None = None) -> TransitionBuffer:
    """Collect ``online_steps`` transitions with the stochastic exploration policy.

    Every step is followed by one optimistic update on D_off + D_on.
    ``on_checkpoint`` is called at each retraining checkpoint with the
    current online buffer.
    """
    record = RunRecord() if record is None else record
    seeds = _Seeds(config.seed) if seeds is None else seeds
    d_on = TransitionBuffer(env.spec.state_dim, env.spec.action_dim,
                            capacity=max(config.online_steps, 1))
    view = MergedView(d_off, d_on)
    checkpoints = set(config.schedule)
    if 0 in checkpoints and on_checkpoint:
        on_checkpoint(0, d_on)
    s = env.reset()
    for t in range(1, config.online_steps + 1):
        try:
            a = explorer.act(s, "stochastic")
            s2, r, terminal, truncated = env.step(a)
        except Exception as exc:
            raise RuntimeError(f"environment failure at online step {t}: {exc}") from exc
        record.env_steps += 1
        d_on.add(s, a, r, s2, terminal)
        if bonus is not None:
            bonus.observe(s[None], a[None])
            record.intrinsic.append(float(bonus.intrinsic(s[None], a[None])[0]))
            record.intrinsic_normalized.append(float(bonus.normalized(s[None], a[None])[0]))
        else:
            record.intrinsic.append(0.0)
            record.intrinsic_normalized.append(0.0)
        if terminal or truncated:
            d_on.end_trajectory()
            s = env.reset()
        else:
            s = s2
        diag = opt_update(explorer, view, bonus)
        if config.diag_interval and t % config.diag_interval == 0:
            row = diag.as_dict()
            row["online_step"] = t
            record.diagnostics.append(row)
            for k, v in row.items():
                if k not in ("step", "online_step"):
                    emit("online", t, k, v)
            emit("online", t, "intrinsic_last1000", float(np.mean(record.intrinsic[-1000:])))
        if config.eval_interval and t % config.eval_interval == 0:
            summary, under = evaluate(env, explorer, config.eval_episodes, seeds.eval_seed(t))
            point = _eval_point(t, "online", "explore", summary, under,
                                mean_intrinsic=float(np.mean(record.intrinsic[-1000:])))
            record.evals.append(point)
            record.explorer_digests.append((t, parameter_digest(explorer)))
            _emit_eval(emit, point)
        if t in checkpoints and on_checkpoint:
            on_checkpoint(t, d_on)
    d_on.end_trajectory()
    return d_on


def _emit_eval(emit: Emit, point: EvalPoint):
    prefix = point.policy
    emit(point.phase, point.step, f"{prefix}_return", point.mean_return)
    emit(point.phase, point.step, f"{prefix}_success", point.success_rate)
    if np.isfinite(point.under_wall_fraction):
        emit(point.phase, point.step, f"{prefix}_under_wall_fraction", point.under_wall_fraction)
    if np.isfinite(point.max_batch_q):
        emit(point.phase, point.step, f"{prefix}_max_batch_q", point.max_batch_q)


def run_experiment(config: OooConfig, d_off: TransitionBuffer | None = None, emit: Emit = _noop,
                   retrain: bool = True) -> RunResult:
    """Pre-train, explore online, retrain offline at every checkpoint.

    With ``retrain=False`` the checkpoints are skipped, which must leave
    the exploration trajectory bit-for-bit unchanged.
    """
    seeds = _Seeds(config.seed)
    env = make_env(config.env, seeds.env)
    if d_off is None:
        d_off = offline_dataset(config, env, seeds.data)
    record = RunRecord(has_bonus=config.bonus != "none")
    bonus = make_bonus(config, env.spec.state_dim, seeds.bonus)
    explorer = make_explorer(config, seeds.explorer)
    phase = "pretrain"
    state = {"exploiter": None, "k": 0}

    def checkpoint(t, d_on):
        if not retrain:
            return
        snapshot = bonus.freeze() if config.frozen_rnd_retrain else None
        k = state["k"]
        agent, max_q, diverged = offline_retrain(config, d_off, d_on, seeds.retrain_seed(k),
                                                 snapshot=snapshot, previous=state["exploiter"],
                                                 emit=emit, step=t)
        state["exploiter"], state["k"] = agent, k + 1
        n_eval = config.final_eval_episodes if t == config.online_steps else config.eval_episodes
        summary, under = evaluate(env, agent, n_eval, seeds.eval_seed(t) + 1)
        point = _eval_point(t, "retrain", "exploit", summary, under, max_batch_q=max_q)
        record.evals.append(point)
        _emit_eval(emit, point)
        if diverged:
            emit("retrain", t, "exploit_diverged", 1.0)
        if config.sync_exploiter_back and isinstance(agent, IQLAgent):
            for name, net in explorer._networks().items():
                net.flat[...] = agent._networks()[name].flat

    try:
        pretrain(config, d_off, explorer, bonus, emit)
        record.explorer_digests.append((0, parameter_digest(explorer)))
        phase = "online"
        d_on = online_phase(config, env, explorer, d_off, bonus, record, emit,
                            on_checkpoint=checkpoint, seeds=seeds)
    except Exception as exc:
        raise RuntimeError(f"{phase} phase failed: {exc}") from exc
    n_final = config.final_eval_episodes
    summary, under = evaluate(env, explorer, n_final, seeds.eval_seed(config.online_steps) + 2)
    point = _eval_point(config.online_steps, "online", "explore_final", summary, under,
                        mean_intrinsic=float(np.mean(record.intrinsic[-1000:])) if record.intrinsic
                        else float("nan"))
    record.evals.append(point)
    _emit_eval(emit, point)
    if isinstance(env, PointMassWallEnv):
        record.visitation = env.visitation(d_on.states)
    record.explorer_digests.append((config.online_steps, parameter_digest(explorer)))
    return RunResult(record, explorer, state["exploiter"], bonus, d_off, d_on)


def intrinsic_trace(record: RunRecord, window: int = 1000, every: int = 1000,
                    normalized: bool = False) -> list[tuple[int, float]]:
    """(t, mean intrinsic reward over the last ``window`` online steps) every ``every`` steps."""
    if not record.has_bonus:
        raise ValueError("run has no exploration bonus data")
    series = np.asarray(record.intrinsic_normalized if normalized else record.intrinsic)
    out = []
    for t in range(every, len(series) + 1, every):
        out.append((t, float(series[max(0, t - window):t].mean())))
    return out
