"""Exploration bonuses and the shaped training reward.

All bonus objects share one small protocol used by the learners:

``intrinsic(states, actions)``
    reward added to the task reward, coefficient included.
``normalized(states, actions)``
    the same signal without the coefficient (for traces).
``observe(states, actions)``
    record visits (count tables only).
``train(states)``
    fit the novelty model on replayed states (RND only).
"""
from __future__ import annotations

import copy
import hashlib
from pathlib import Path

import numpy as np

from .nn import Adam, Mlp, RunningMoments


class CountBonus:
    """Visitation-count bonus ``c / sqrt(n + 1)`` on a discretized grid.

    By default counts are keyed on the binned state only; pass
    ``action_bin_width`` to key on (state, action) bins.
    """

    def __init__(self, coef: float = 5.0, bin_width: float = 0.05,
                 action_bin_width: float | None = None):
        if coef < 0:
            raise ValueError("coef must be non-negative")
        if bin_width <= 0 or (action_bin_width is not None and action_bin_width <= 0):
            raise ValueError("bin widths must be positive")
        self.coef = float(coef)
        self.bin_width = float(bin_width)
        self.action_bin_width = action_bin_width
        self.counts: dict[tuple[int, ...], int] = {}

    def keys(self, states, actions=None) -> list[tuple[int, ...]]:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        # the epsilon keeps values sitting on a bin edge from flipping on round-off
        bins = np.floor(s / self.bin_width + 1e-9).astype(np.int64)
        if self.action_bin_width is not None:
            a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
            bins = np.hstack([bins, np.floor(a / self.action_bin_width + 1e-9).astype(np.int64)])
        return [tuple(row) for row in bins.tolist()]

    def count(self, state, action=None) -> int:
        return self.counts.get(self.keys(state, action)[0], 0)

    def intrinsic(self, states, actions=None) -> np.ndarray:
        n = np.fromiter((self.counts.get(k, 0) for k in self.keys(states, actions)), dtype=np.float64)
        return self.coef / np.sqrt(n + 1.0)

    def normalized(self, states, actions=None) -> np.ndarray:
        n = np.fromiter((self.counts.get(k, 0) for k in self.keys(states, actions)), dtype=np.float64)
        return 1.0 / np.sqrt(n + 1.0)

    def observe(self, states, actions=None) -> None:
        for k in self.keys(states, actions):
            self.counts[k] = self.counts.get(k, 0) + 1

    def train(self, states) -> float:
        return 0.0

    def save_counts(self, path) -> None:
        lines = [f"{','.join(map(str, k))} {v}" for k, v in sorted(self.counts.items())]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    def load_counts(self, path) -> None:
        counts = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                key, value = line.split()
                counts[tuple(int(v) for v in key.split(","))] = int(value)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed count entry {line!r}") from None
        self.counts = counts


def count_bonus(bonus: CountBonus, s, a=None) -> float:
    return float(bonus.intrinsic(s, a)[0])


def count_observe(bonus: CountBonus, s, a=None) -> None:
    bonus.observe(s, a)


class RndBonus:
    """Random network distillation novelty bonus.

    States are standardized by running moments (clipped to +-5) before
    both networks. The raw reward is the squared prediction error. It is
    divided by the running std of raw rewards, without centering, so it
    stays non-negative.
    """

    def __init__(self, state_dim: int, coef: float = 5.0, hidden=(512, 512), embed_dim: int = 64,
                 train_fraction: float = 0.25, lr: float = 1e-4, rng=None, dtype=np.float32):
        if not 0.0 <= train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in [0, 1]")
        rng = np.random.default_rng(rng)
        self.coef = float(coef)
        self.train_fraction = float(train_fraction)
        self.target = Mlp([state_dim, *hidden, embed_dim], rng=rng, dtype=dtype)
        self.predictor = Mlp([state_dim, *hidden, embed_dim], rng=rng, dtype=dtype)
        self.optimizer = Adam(self.predictor, lr=lr)
        self.obs_moments = RunningMoments(state_dim)
        self.reward_moments = RunningMoments()
        self.rng = rng
        self.last_train_size = 0

    def _inputs(self, states):
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.clip(self.obs_moments.normalize(s), -5.0, 5.0)

    def raw_reward(self, states) -> np.ndarray:
        x = self._inputs(states)
        diff = self.predictor(x) - self.target(x)
        return np.sum(diff.astype(np.float64) ** 2, axis=1)

    def normalized(self, states, actions=None) -> np.ndarray:
        return self.reward_moments.scale(self.raw_reward(states))

    def intrinsic(self, states, actions=None) -> np.ndarray:
        return self.coef * self.normalized(states)

    def observe(self, states, actions=None) -> None:
        pass

    def train(self, states) -> float:
        """One predictor step on a random ``train_fraction`` of ``states``.

        Also folds the batch into the observation and reward statistics.
        """
        s = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if len(s) == 0:
            raise ValueError("empty state batch")
        self.obs_moments.update(s)
        self.reward_moments.update(self.raw_reward(s))
        k = int(round(self.train_fraction * len(s)))
        self.last_train_size = k
        if k == 0:
            return 0.0
        sub = s[self.rng.choice(len(s), size=k, replace=False)]
        x = self._inputs(sub)
        target = self.target(x)
        pred, cache = self.predictor.forward_cache(x)
        diff = pred - target
        loss = float(np.mean(diff.astype(np.float64) ** 2))
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite RND loss")
        self.optimizer.step(self.predictor.backward(cache, (2.0 / diff.size) * diff))
        return loss

    def freeze(self) -> "FrozenBonusSnapshot":
        return FrozenBonusSnapshot(self)

    def target_digest(self) -> str:
        h = hashlib.sha256()
        for p in self.target.params:
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def rnd_reward(bonus: RndBonus, s) -> np.ndarray:
    return bonus.raw_reward(s)


def rnd_train_step(bonus: RndBonus, state_batch) -> float:
    return bonus.train(state_batch)


class FrozenBonusSnapshot:
    """Immutable copy of an :class:`RndBonus`; training is a no-op."""

    def __init__(self, source: RndBonus):
        self.coef = source.coef
        self.target = copy.deepcopy(source.target)
        self.predictor = copy.deepcopy(source.predictor)
        self.obs_moments = copy.deepcopy(source.obs_moments)
        self.reward_moments = copy.deepcopy(source.reward_moments)
        for net in (self.target, self.predictor):
            net.flat.flags.writeable = False
            for p in net.params:
                p.flags.writeable = False

    _inputs = RndBonus._inputs
    raw_reward = RndBonus.raw_reward
    normalized = RndBonus.normalized
    intrinsic = RndBonus.intrinsic

    def observe(self, states, actions=None) -> None:
        pass

    def train(self, states) -> float:
        return 0.0


def freeze(bonus: RndBonus) -> FrozenBonusSnapshot:
    return bonus.freeze()


def combined_reward(bonus, r_ext, states, actions=None) -> np.ndarray:
    """Task reward plus the bonus' intrinsic reward (coefficient included)."""
    r_ext = np.asarray(r_ext, dtype=np.float64)
    if bonus is None or bonus.coef == 0.0:
        return r_ext.copy()
    return r_ext + bonus.intrinsic(states, actions).reshape(r_ext.shape)
