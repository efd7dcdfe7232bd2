"""Deterministic, seedable environments and dataset tooling.

* :class:`PointMassWallEnv` is the 2-D navigation task with a vertical
  wall between start and goal. The short route passes under the wall and
  the long one goes over it.
* :class:`GridMazeEnv` is a small occupancy-grid maze with a sparse goal reward.
* :class:`SingleStateEnv` is a one-state MDP, used as a control for
  count-bonus decay.

Actions are always normalized to [-1, 1]^action_dim. ``step`` returns
``(next_state, reward, terminal, truncated)``. ``terminal`` means the
goal was reached. ``truncated`` means the horizon ran out without success,
so bootstrapping should continue through it.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Transition, TransitionBuffer


@dataclass(frozen=True)
class MdpSpec:
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    gamma: float = 0.99
    horizon: int = 100

    def __post_init__(self):
        if self.state_dim <= 0 or self.action_dim <= 0 or self.horizon <= 0:
            raise ValueError("dimensions and horizon must be positive")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have action_dim entries")
        if any(lo >= hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be below action_high")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class EpisodeResult:
    episode_return: float
    length: int
    success: bool
    trajectory: list[Transition] = field(default_factory=list)


@dataclass
class EvalSummary:
    n_episodes: int
    mean_return: float
    success_rate: float
    mean_length: float
    episodes: list[EpisodeResult]

    @property
    def empty(self) -> bool:
        return self.n_episodes == 0


def _check_action(action, dim):
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.size != dim:
        raise ValueError(f"expected action of size {dim}, got {a.size}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"non-finite action {a}")
    return np.clip(a, -1.0, 1.0)


class Env:
    """Base class: owns an RNG, the current state and the step counter."""

    spec: MdpSpec

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.state: np.ndarray | None = None
        self.t = 0

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.state = self.initial_state(self.rng if rng is None else rng)
        self.t = 0
        return self.state.copy()

    def step(self, action):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        a = _check_action(action, self.spec.action_dim)
        nxt, reward, terminal = self.transition(self.state, a)
        self.t += 1
        truncated = (not terminal) and self.t >= self.spec.horizon
        self.state = nxt
        return nxt.copy(), reward, terminal, truncated

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def transition(self, state, action):
        """Pure dynamics: ``(next_state, reward, terminal)``."""
        raise NotImplementedError

    def position(self, states) -> np.ndarray:
        """Coordinates used for distance-based dataset surgery."""
        return np.asarray(states, dtype=np.float64)[..., :2]

    def clone(self, seed=None) -> "Env":
        raise NotImplementedError


class PointMassWallEnv(Env):
    """Point mass in a walled arena.

    The wall is a zero-thickness vertical segment. A step whose path would
    cross it is stopped just short of the face while the motion along the
    wall is kept, so the agent slides.
    """

    name = "pointmass"

    def __init__(self, seed=None, *, start_mean=(0.0, 0.5), start_noise_std=0.02,
                 goal=(1.0, 0.15), goal_radius=0.1, wall_x=0.5, wall_y_range=(0.1, 1.2),
                 action_scale=math.sqrt(0.5) * 0.05,
                 bounds=((-0.25, 1.25), (-0.25, 1.45)), horizon=100, gamma=0.99):
        super().__init__(seed)
        self.start_mean = np.asarray(start_mean, dtype=np.float64)
        self.start_noise_std = float(start_noise_std)
        self.goal = np.asarray(goal, dtype=np.float64)
        self.goal_radius = float(goal_radius)
        self.wall_x = float(wall_x)
        self.wall_y_range = tuple(float(v) for v in wall_y_range)
        self.action_scale = float(action_scale)
        self.bounds = np.asarray(bounds, dtype=np.float64)
        self.spec = MdpSpec(2, 2, (-1.0, -1.0), (1.0, 1.0), gamma=gamma, horizon=horizon)
        self._kwargs = dict(start_mean=start_mean, start_noise_std=start_noise_std, goal=goal,
                            goal_radius=goal_radius, wall_x=wall_x, wall_y_range=wall_y_range,
                            action_scale=action_scale, bounds=bounds, horizon=horizon, gamma=gamma)

    def clone(self, seed=None) -> "PointMassWallEnv":
        return PointMassWallEnv(seed, **self._kwargs)

    def initial_state(self, rng):
        s = self.start_mean + self.start_noise_std * rng.standard_normal(2)
        return np.clip(s, self.bounds[:, 0], self.bounds[:, 1])

    def in_wall(self, state) -> bool:
        x, y = state
        lo, hi = self.wall_y_range
        return x == self.wall_x and lo <= y <= hi

    def move(self, state, action) -> np.ndarray:
        x0, y0 = float(state[0]), float(state[1])
        x1 = min(max(x0 + self.action_scale * float(action[0]), self.bounds[0, 0]), self.bounds[0, 1])
        y1 = min(max(y0 + self.action_scale * float(action[1]), self.bounds[1, 0]), self.bounds[1, 1])
        wx = self.wall_x
        if x0 != x1 and (x0 - wx) * (x1 - wx) <= 0 and x0 != wx:
            yc = y0 + (wx - x0) / (x1 - x0) * (y1 - y0)
            lo, hi = self.wall_y_range
            if lo <= yc <= hi or (lo <= y1 <= hi and x1 == wx):
                x1 = np.nextafter(wx, x0)
        return np.array([x1, y1])

    def at_goal(self, state) -> bool:
        return float(np.hypot(*(np.asarray(state) - self.goal))) <= self.goal_radius

    def transition(self, state, action):
        nxt = self.move(state, action)
        done = self.at_goal(nxt)
        return nxt, 1.0 if done else 0.0, done

    def crossing_route(self, trajectory) -> str | None:
        """Classify how a trajectory passed the wall's x coordinate.

        ``"under"`` if any step crosses x = wall_x below the wall, else
        ``"over"`` if any step crosses above it, else None.
        """
        lo, hi = self.wall_y_range
        route = None
        for s, s2 in _state_pairs(trajectory):
            x0, y0 = s
            x1, y1 = s2
            if x0 == x1 or (x0 - self.wall_x) * (x1 - self.wall_x) > 0:
                continue
            yc = y0 + (self.wall_x - x0) / (x1 - x0) * (y1 - y0)
            if yc < lo:
                return "under"
            if yc > hi:
                route = "over"
        return route

    # visitation histograms on a fixed grid aligned with the arena corner

    def bin_shape(self, width: float = 0.05) -> tuple[int, int]:
        span = self.bounds[:, 1] - self.bounds[:, 0]
        return tuple(int(math.ceil(round(s / width, 9))) for s in span)  # type: ignore[return-value]

    def bin_index(self, states, width: float = 0.05) -> np.ndarray:
        pos = np.atleast_2d(np.asarray(states, dtype=np.float64))[:, :2]
        nx, ny = self.bin_shape(width)
        idx = np.floor((pos - self.bounds[:, 0]) / width + 1e-9).astype(np.int64)
        idx[:, 0] = np.clip(idx[:, 0], 0, nx - 1)
        idx[:, 1] = np.clip(idx[:, 1], 0, ny - 1)
        return idx

    def visitation(self, states, width: float = 0.05) -> np.ndarray:
        hist = np.zeros(self.bin_shape(width), dtype=np.int64)
        if len(states):
            idx = self.bin_index(states, width)
            np.add.at(hist, (idx[:, 0], idx[:, 1]), 1)
        return hist

    def corridor_bins(self, width: float = 0.05, x_range=(0.3, 0.7), y_range=(0.0, 0.1)):
        """Bins of the strip directly under the wall."""
        ox, oy = self.bounds[:, 0]
        xs = range(int(round((x_range[0] - ox) / width)), int(round((x_range[1] - ox) / width)))
        ys = range(int(round((y_range[0] - oy) / width)), int(round((y_range[1] - oy) / width)))
        return [(i, j) for i in xs for j in ys]


def _state_pairs(trajectory):
    if isinstance(trajectory, EpisodeResult):
        trajectory = trajectory.trajectory
    for tr in trajectory:
        if isinstance(tr, Transition):
            yield tr.state, tr.next_state
        else:
            yield tr


class GridMazeEnv(Env):
    """Occupancy-grid maze.

    ``layout`` rows use ``#`` for walls, ``.`` for free cells, ``S`` for
    the start and ``G`` for the goal. The state is the agent cell center
    in unit coordinates ``((col + 0.5) / width, (row + 0.5) / height)``.
    The action's dominant axis picks one of four moves (+x right, +y
    down). Moves into walls or off the grid leave the agent in place.
    """

    name = "gridmaze"

    DEFAULT_LAYOUT = (
        "S...#.....",
        ".##.#.###.",
        ".#..#...#.",
        ".#.###..#.",
        ".#...#.##.",
        ".###.#..#G",
        "..........",
    )

    def __init__(self, seed=None, *, layout: Sequence[str] = DEFAULT_LAYOUT, horizon=60,
                 gamma=0.99):
        super().__init__(seed)
        rows = [str(r) for r in layout]
        if not rows or len({len(r) for r in rows}) != 1:
            raise ValueError("layout rows must be non-empty and equally long")
        self.layout = tuple(rows)
        self.height, self.width = len(rows), len(rows[0])
        self.walls = np.array([[c == "#" for c in r] for r in rows])
        starts = [(i, j) for i, r in enumerate(rows) for j, c in enumerate(r) if c == "S"]
        goals = [(i, j) for i, r in enumerate(rows) for j, c in enumerate(r) if c == "G"]
        if len(starts) != 1 or len(goals) != 1:
            raise ValueError("layout needs exactly one S and one G")
        self.start_cell, self.goal_cell = starts[0], goals[0]
        if self.shortest_path_length() is None:
            raise ValueError("goal is not reachable from start")
        self.spec = MdpSpec(2, 2, (-1.0, -1.0), (1.0, 1.0), gamma=gamma, horizon=horizon)
        self._kwargs = dict(layout=layout, horizon=horizon, gamma=gamma)

    def clone(self, seed=None) -> "GridMazeEnv":
        return GridMazeEnv(seed, **self._kwargs)

    def cell_state(self, cell) -> np.ndarray:
        r, c = cell
        return np.array([(c + 0.5) / self.width, (r + 0.5) / self.height])

    def state_cell(self, state) -> tuple[int, int]:
        return (int(math.floor(state[1] * self.height)), int(math.floor(state[0] * self.width)))

    def initial_state(self, rng):
        return self.cell_state(self.start_cell)

    _MOVES = {(0, 1): (0, 1), (0, -1): (0, -1), (1, 1): (1, 0), (1, -1): (-1, 0)}

    def transition(self, state, action):
        r, c = self.state_cell(state)
        axis = int(np.argmax(np.abs(action)))
        sign = 1 if action[axis] >= 0 else -1
        dr, dc = self._MOVES[(axis, sign)]
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.height and 0 <= nc < self.width and not self.walls[nr, nc]:
            r, c = nr, nc
        done = (r, c) == self.goal_cell
        return self.cell_state((r, c)), 1.0 if done else 0.0, done

    def goal_distances(self) -> dict[tuple[int, int], int]:
        """BFS step distance to the goal for every reachable free cell."""
        dist = {self.goal_cell: 0}
        queue = deque([self.goal_cell])
        while queue:
            cell = queue.popleft()
            for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                nxt = (cell[0] + dr, cell[1] + dc)
                if (0 <= nxt[0] < self.height and 0 <= nxt[1] < self.width
                        and not self.walls[nxt] and nxt not in dist):
                    dist[nxt] = dist[cell] + 1
                    queue.append(nxt)
        return dist

    def expert_policy(self) -> Callable:
        """Deterministic shortest-path controller (state -> action)."""
        dist = self.goal_distances()
        actions = {(0, 1): (1.0, 0.0), (0, -1): (-1.0, 0.0), (1, 0): (0.0, 1.0), (-1, 0): (0.0, -1.0)}

        def policy(state):
            r, c = self.state_cell(state)
            best = min(actions, key=lambda d: dist.get((r + d[0], c + d[1]), math.inf))
            return np.array(actions[best])
        return policy

    def shortest_path_length(self) -> int | None:
        dist = {self.start_cell: 0}
        queue = deque([self.start_cell])
        while queue:
            cell = queue.popleft()
            if cell == self.goal_cell:
                return dist[cell]
            for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                nr, nc = cell[0] + dr, cell[1] + dc
                if (0 <= nr < self.height and 0 <= nc < self.width and not self.walls[nr, nc]
                        and (nr, nc) not in dist):
                    dist[(nr, nc)] = dist[cell] + 1
                    queue.append((nr, nc))
        return None


class SingleStateEnv(Env):
    """One state, zero reward, never terminates."""

    name = "single"

    def __init__(self, seed=None, *, horizon=100, gamma=0.99):
        super().__init__(seed)
        self.spec = MdpSpec(1, 1, (-1.0,), (1.0,), gamma=gamma, horizon=horizon)
        self._kwargs = dict(horizon=horizon, gamma=gamma)

    def clone(self, seed=None):
        return SingleStateEnv(seed, **self._kwargs)

    def initial_state(self, rng):
        return np.zeros(1)

    def transition(self, state, action):
        return np.zeros(1), 0.0, False

    def position(self, states):
        return np.asarray(states, dtype=np.float64)[..., :1]


ENVIRONMENTS = {cls.name: cls for cls in (PointMassWallEnv, GridMazeEnv, SingleStateEnv)}


def make_env(name: str, seed=None, **kwargs) -> Env:
    try:
        return ENVIRONMENTS[name](seed, **kwargs)
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None


class WaypointPolicy:
    """Scripted controller heading straight for each waypoint in turn.

    The action is the unit (L2) heading to the current waypoint, shortened
    to land on it; components stay inside the action box so demonstration
    noise is rarely clipped. The next waypoint becomes active
    within ``switch_radius``.
    """

    def __init__(self, env: PointMassWallEnv, waypoints, switch_radius: float = 0.02):
        self.env = env
        self.waypoints = [np.asarray(w, dtype=np.float64) for w in waypoints]
        self.switch_radius = switch_radius
        self.k = 0

    def reset(self):
        self.k = 0

    def __call__(self, state) -> np.ndarray:
        pos = np.asarray(state, dtype=np.float64)[:2]
        while (self.k < len(self.waypoints) - 1
               and np.linalg.norm(self.waypoints[self.k] - pos) < self.switch_radius):
            self.k += 1
        d = self.waypoints[self.k] - pos
        return d / max(float(np.linalg.norm(d)), self.env.action_scale)


def over_wall_policy(env: PointMassWallEnv) -> WaypointPolicy:
    return WaypointPolicy(env, [(env.wall_x, env.wall_y_range[1] + 0.1), env.goal])


def under_wall_policy(env: PointMassWallEnv) -> WaypointPolicy:
    return WaypointPolicy(env, [(env.wall_x, env.wall_y_range[0] - 0.1), env.goal])


def run_episode(env: Env, policy: Callable, rng=None, action_noise_std: float = 0.0,
                noise_rng=None) -> EpisodeResult:
    if hasattr(policy, "reset"):
        policy.reset()
    s = env.reset(rng)
    traj, total = [], 0.0
    while True:
        a = np.asarray(policy(s), dtype=np.float64)
        if action_noise_std:
            a = np.clip(a + action_noise_std * noise_rng.standard_normal(a.shape), -1.0, 1.0)
        else:
            a = np.clip(a, -1.0, 1.0)
        s2, r, term, trunc = env.step(a)
        traj.append(Transition(s, a, r, s2, term))
        total += r
        s = s2
        if term or trunc:
            return EpisodeResult(total, len(traj), bool(term), traj)


def generate_suboptimal_dataset(env: PointMassWallEnv, n_traj: int, action_noise_std: float = 0.1,
                                rng: np.random.Generator | None = None) -> TransitionBuffer:
    """Noisy over-the-wall demonstrations for the point-mass task."""
    rng = np.random.default_rng() if rng is None else rng
    probe = env.clone(0)
    ref = run_episode(_zero_noise_probe(probe), over_wall_policy(probe))
    if not ref.success:
        raise RuntimeError("scripted over-the-wall policy does not reach the goal within the horizon")
    buf = TransitionBuffer(env.spec.state_dim, env.spec.action_dim)
    policy = over_wall_policy(env)
    for _ in range(n_traj):
        ep = run_episode(env, policy, rng=rng, action_noise_std=action_noise_std, noise_rng=rng)
        for tr in ep.trajectory:
            buf.append(tr)
        buf.end_trajectory()
    return buf


def _zero_noise_probe(env: PointMassWallEnv) -> PointMassWallEnv:
    kwargs = dict(env._kwargs, start_noise_std=0.0)
    return PointMassWallEnv(0, **kwargs)


def random_walk_dataset(env: Env, n_traj: int, rng: np.random.Generator) -> TransitionBuffer:
    """Trajectories of uniformly random actions."""
    buf = TransitionBuffer(env.spec.state_dim, env.spec.action_dim)
    dim = env.spec.action_dim
    for _ in range(n_traj):
        ep = run_episode(env, lambda s: rng.uniform(-1.0, 1.0, dim), rng=rng)
        for tr in ep.trajectory:
            buf.append(tr)
        buf.end_trajectory()
    return buf


def sparse_maze_dataset(env: GridMazeEnv, n_random: int, n_expert: int, epsilon: float,
                        rng: np.random.Generator) -> TransitionBuffer:
    """Random walks plus a few epsilon-greedy shortest-path episodes.

    Successful transitions are rare: at most one per episode.
    """
    buf = random_walk_dataset(env, n_random, rng)
    expert = env.expert_policy()
    dim = env.spec.action_dim

    def noisy(s):
        return rng.uniform(-1.0, 1.0, dim) if rng.random() < epsilon else expert(s)
    for _ in range(n_expert):
        for tr in run_episode(env, noisy, rng=rng).trajectory:
            buf.append(tr)
        buf.end_trajectory()
    return buf


def remove_near(buffer: TransitionBuffer, centers, radii, position_dims: int = 2) -> TransitionBuffer:
    """Drop transitions whose state lies within any ball (distance <= radius).

    A zero radius removes nothing.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    radii = np.atleast_1d(np.asarray(radii, dtype=np.float64))
    if len(centers) != len(radii):
        raise ValueError("centers and radii must have the same length")
    if np.any(radii < 0):
        raise ValueError("radii must be non-negative")
    pos = buffer.states[:, :position_dims]
    keep = np.ones(len(buffer), dtype=bool)
    for c, r in zip(centers, radii):
        if r > 0:
            keep &= np.linalg.norm(pos - c[:position_dims], axis=1) > r
    return buffer.select(keep)


def truncate_trajectories(buffer: TransitionBuffer, max_len: int) -> TransitionBuffer:
    if max_len < 0:
        raise ValueError("max_len must be non-negative")
    keep = np.zeros(len(buffer), dtype=bool)
    for start, stop in buffer.trajectories():
        keep[start: min(stop, start + max_len)] = True
    return buffer.select(keep)


def evaluate_policy(env: Env, policy: Callable, n_episodes: int,
                    rng: np.random.Generator | None = None) -> EvalSummary:
    """Roll out ``policy`` (state -> action, deterministic) for ``n_episodes``.

    Start states come from ``rng``, or from the environment's own generator.
    """
    episodes = [run_episode(env, policy, rng=rng) for _ in range(n_episodes)]
    if not episodes:
        return EvalSummary(0, float("nan"), float("nan"), float("nan"), [])
    return EvalSummary(
        n_episodes,
        float(np.mean([e.episode_return for e in episodes])),
        float(np.mean([e.success for e in episodes])),
        float(np.mean([e.length for e in episodes])),
        episodes,
    )
