"""Transition storage and replay sampling.

A :class:`TransitionBuffer` is an append-only store with trajectory
boundaries and an index of reward-1 transitions. :class:`MergedView`
presents the union of two buffers without copying. Sampling is with
replacement, either uniform or mixed with uniform draws from the
reward-1 subset.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.rewards)

    def transition(self, i: int) -> Transition:
        return Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                          self.next_states[i], bool(self.terminals[i]))


@dataclass(frozen=True)
class SamplerConfig:
    """Mixture weight on the reward-1 subset and batch size."""

    highrew_mix: float = 0.5
    batch_size: int = 256

    def __post_init__(self):
        if not 0.0 <= self.highrew_mix <= 1.0:
            raise ValueError(f"highrew_mix must lie in [0, 1], got {self.highrew_mix}")
        if self.batch_size < 0:
            raise ValueError("batch_size must be non-negative")


class DatasetFormatError(ValueError):
    pass


class TransitionBuffer:
    """Append-only transition store.

    Trajectory boundaries are recorded with :meth:`end_trajectory`; a
    trailing segment that was never closed still counts as a trajectory.
    """

    def __init__(self, state_dim: int, action_dim: int, capacity: int = 1024):
        if state_dim <= 0 or action_dim <= 0:
            raise ValueError("dimensions must be positive")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        cap = max(int(capacity), 1)
        self._s = np.empty((cap, state_dim))
        self._a = np.empty((cap, action_dim))
        self._r = np.empty(cap)
        self._s2 = np.empty((cap, state_dim))
        self._t = np.empty(cap, dtype=bool)
        self._size = 0
        self._highrew: list[int] = []
        self._ends: list[int] = []

    def __len__(self) -> int:
        return self._size

    def __repr__(self):
        return (f"TransitionBuffer(state_dim={self.state_dim}, action_dim={self.action_dim}, "
                f"size={self._size}, trajectories={len(self.trajectories())})")

    def _grow(self):
        cap = 2 * len(self._r)
        for name in ("_s", "_a", "_r", "_s2", "_t"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._size] = old[: self._size]
            setattr(self, name, new)

    def add(self, state, action, reward, next_state, terminal) -> None:
        s = np.asarray(state, dtype=np.float64).reshape(-1)
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        s2 = np.asarray(next_state, dtype=np.float64).reshape(-1)
        if s.size != self.state_dim or s2.size != self.state_dim or a.size != self.action_dim:
            raise ValueError(
                f"transition dims ({s.size}, {a.size}, {s2.size}) do not match "
                f"state_dim={self.state_dim} action_dim={self.action_dim}")
        reward = float(reward)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a)) and np.all(np.isfinite(s2))
                and np.isfinite(reward)):
            raise ValueError("transition has non-finite entries")
        if self._size == len(self._r):
            self._grow()
        i = self._size
        self._s[i] = s
        self._a[i] = a
        self._r[i] = reward
        self._s2[i] = s2
        self._t[i] = bool(terminal)
        if reward == 1.0:
            self._highrew.append(i)
        self._size += 1

    def append(self, transition: Transition) -> None:
        self.add(transition.state, transition.action, transition.reward,
                 transition.next_state, transition.terminal)

    def end_trajectory(self) -> None:
        if self._size and (not self._ends or self._ends[-1] < self._size):
            self._ends.append(self._size)

    def trajectories(self) -> list[tuple[int, int]]:
        """(start, stop) index pairs of every trajectory."""
        bounds = list(self._ends)
        if self._size and (not bounds or bounds[-1] < self._size):
            bounds.append(self._size)
        starts = [0] + bounds[:-1]
        return list(zip(starts, bounds))

    @property
    def highrew_index(self) -> np.ndarray:
        return np.asarray(self._highrew, dtype=np.int64)

    @property
    def states(self) -> np.ndarray:
        return self._s[: self._size]

    @property
    def actions(self) -> np.ndarray:
        return self._a[: self._size]

    @property
    def rewards(self) -> np.ndarray:
        return self._r[: self._size]

    @property
    def next_states(self) -> np.ndarray:
        return self._s2[: self._size]

    @property
    def terminals(self) -> np.ndarray:
        return self._t[: self._size]

    def gather(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._t[idx], idx)

    def __getitem__(self, i: int) -> Transition:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        return self.gather([i % self._size]).transition(0)

    def select(self, keep) -> "TransitionBuffer":
        """New buffer holding the transitions where ``keep`` is true.

        Trajectory structure is kept; trajectories that lose every
        transition disappear.
        """
        keep = np.asarray(keep, dtype=bool)
        out = TransitionBuffer(self.state_dim, self.action_dim, capacity=max(int(keep.sum()), 1))
        for start, stop in self.trajectories():
            for i in range(start, stop):
                if keep[i]:
                    out.add(self._s[i], self._a[i], self._r[i], self._s2[i], self._t[i])
            out.end_trajectory()
        return out

    def copy(self) -> "TransitionBuffer":
        return self.select(np.ones(self._size, dtype=bool))

    def equals(self, other: "TransitionBuffer") -> bool:
        return (self.state_dim == other.state_dim and self.action_dim == other.action_dim
                and len(self) == len(other) and self.trajectories() == other.trajectories()
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("states", "actions", "rewards", "next_states", "terminals")))


class MergedView:
    """Read-only union of two buffers; indices of ``second`` follow ``first``."""

    def __init__(self, first: TransitionBuffer, second: TransitionBuffer):
        if (first.state_dim, first.action_dim) != (second.state_dim, second.action_dim):
            raise ValueError("cannot merge buffers with different dimensions")
        self.first = first
        self.second = second
        self.state_dim = first.state_dim
        self.action_dim = first.action_dim

    def __len__(self) -> int:
        return len(self.first) + len(self.second)

    @property
    def highrew_index(self) -> np.ndarray:
        return np.concatenate([self.first.highrew_index, self.second.highrew_index + len(self.first)])

    def gather(self, idx) -> Batch:
        idx = np.asarray(idx, dtype=np.int64)
        n1 = len(self.first)
        if len(self.second) == 0:
            return self.first.gather(idx)
        if n1 == 0:
            b = self.second.gather(idx)
            b.indices = idx
            return b
        in_first = idx < n1
        b1 = self.first.gather(np.where(in_first, idx, 0))
        b2 = self.second.gather(np.where(in_first, 0, idx - n1))
        m = in_first[:, None]
        return Batch(np.where(m, b1.states, b2.states), np.where(m, b1.actions, b2.actions),
                     np.where(in_first, b1.rewards, b2.rewards),
                     np.where(m, b1.next_states, b2.next_states),
                     np.where(in_first, b1.terminals, b2.terminals), idx)

    @property
    def states(self) -> np.ndarray:
        return np.concatenate([self.first.states, self.second.states])

    @property
    def rewards(self) -> np.ndarray:
        return np.concatenate([self.first.rewards, self.second.rewards])


def merge_view(d_off: TransitionBuffer, d_on: TransitionBuffer) -> MergedView:
    return MergedView(d_off, d_on)


def sample_uniform(buffer, batch_size: int, rng: np.random.Generator) -> Batch:
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot sample from an empty buffer")
    return buffer.gather(rng.integers(0, n, size=int(batch_size)))


def sample_reweighted(buffer, config: SamplerConfig, rng: np.random.Generator) -> Batch:
    """Each element comes from the reward-1 subset with probability ``highrew_mix``.

    With ``highrew_mix == 0`` this is exactly :func:`sample_uniform`
    (same random stream consumption).
    """
    n = len(buffer)
    if n == 0:
        raise ValueError("cannot sample from an empty buffer")
    if config.highrew_mix == 0.0:
        return sample_uniform(buffer, config.batch_size, rng)
    high = buffer.highrew_index
    if len(high) == 0:
        raise ValueError("cannot upsample reward-1 transitions: none observed")
    b = config.batch_size
    from_high = rng.random(b) < config.highrew_mix
    idx = np.where(from_high, high[rng.integers(0, len(high), size=b)], rng.integers(0, n, size=b))
    return buffer.gather(idx)


# dataset text format


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_dataset(buffer: TransitionBuffer, path) -> None:
    lines = [f"state_dim={buffer.state_dim} action_dim={buffer.action_dim}"]
    for start, stop in buffer.trajectories():
        for i in range(start, stop):
            lines.append(" | ".join([_fmt(buffer.states[i]), _fmt(buffer.actions[i]),
                                     repr(float(buffer.rewards[i])), _fmt(buffer.next_states[i]),
                                     "1" if buffer.terminals[i] else "0"]))
        lines.append("---")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def _parse_header(line: str, path) -> tuple[int, int]:
    try:
        fields = dict(tok.split("=", 1) for tok in line.split())
        return int(fields["state_dim"]), int(fields["action_dim"])
    except (ValueError, KeyError):
        raise DatasetFormatError(f"{path}:1: malformed header {line!r}") from None


def load_dataset(path) -> TransitionBuffer:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, missing header")
    d, k = _parse_header(lines[0], path)
    buf = TransitionBuffer(d, k, capacity=max(len(lines), 1))
    for lineno, line in enumerate(lines[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line == "---":
            buf.end_trajectory()
            continue
        parts = [p.split() for p in line.split("|")]
        if len(parts) != 5:
            raise DatasetFormatError(f"{path}:{lineno}: expected 5 '|'-separated fields, got {len(parts)}")
        s, a, r, s2, t = parts
        if len(s) != d or len(s2) != d or len(a) != k or len(r) != 1 or len(t) != 1:
            raise DatasetFormatError(
                f"{path}:{lineno}: field sizes ({len(s)}, {len(a)}, {len(r)}, {len(s2)}) "
                f"do not match state_dim={d} action_dim={k}")
        if t[0] not in ("0", "1"):
            raise DatasetFormatError(f"{path}:{lineno}: terminal flag must be 0 or 1, got {t[0]!r}")
        try:
            vals = [float(x) for x in s + a + r + s2]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        try:
            buf.add(vals[:d], vals[d:d + k], vals[d + k], vals[d + k + 1:], t[0] == "1")
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
    return buf
