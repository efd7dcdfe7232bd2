"""Command-line entry point.

    ooorl run --config cfg.json --seed 0 --out runs/a
    ooorl make-dataset --env pointmass --n 100 --out d_off.txt
    ooorl ablate-dataset --in d_off.txt --center 1,0.15 --radius 0.2 --max-len 20 --out d.txt
    ooorl report runs/*
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .data import load_dataset, save_dataset
from .env import (GridMazeEnv, PointMassWallEnv, generate_suboptimal_dataset, make_env,
                  random_walk_dataset, remove_near, sparse_maze_dataset, truncate_trajectories)
from .nn import save_checkpoint
from .orchestrator import OooConfig, run_experiment

METRIC_FIELDS = ("run_id", "phase", "step", "metric", "value")
DONE_MARKER = "DONE"


class ConfigError(ValueError):
    pass


def load_config(path, seed: int | None = None) -> OooConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    unknown = sorted(set(raw) - set(OooConfig.field_names()))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {', '.join(unknown)}")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: config must be flat; nested keys {', '.join(nested)}")
    if seed is not None:
        raw["seed"] = seed
    try:
        return OooConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_hash(config: OooConfig) -> str:
    d = config.to_dict()
    d.pop("seed")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]


class MetricsWriter:
    """Append-only long-format CSV; every value must be finite."""

    def __init__(self, path, run_id: str):
        self.run_id = run_id
        self._fh = open(path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(METRIC_FIELDS)

    def __call__(self, phase: str, step: int, metric: str, value: float):
        value = float(value)
        assert math.isfinite(value), f"non-finite metric {metric}={value} at {phase}:{step}"
        self._csv.writerow((self.run_id, phase, int(step), metric, repr(value)))
        if metric.endswith("_success"):
            self._fh.flush()

    def close(self):
        self._fh.close()


def cmd_run(config_path, seed: int, out_dir) -> int:
    config = load_config(config_path, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / DONE_MARKER).unlink(missing_ok=True)
    run_id = f"{config_hash(config)}-s{config.seed}"
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    writer = MetricsWriter(out / "metrics.csv", run_id)
    try:
        result = run_experiment(config, emit=writer)
    finally:
        writer.close()
    if result.record.visitation is not None:
        with open(out / "visitation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("x_bin", "y_bin", "count"))
            for (i, j), n in np.ndenumerate(result.record.visitation):
                if n:
                    w.writerow((i, j, int(n)))
    save_checkpoint(out / "explorer.ckpt", result.explorer.named_params())
    if result.exploiter is not None:
        save_checkpoint(out / "exploiter.ckpt", result.exploiter.named_params())
    (out / DONE_MARKER).write_text(run_id + "\n")
    return 0


def cmd_make_dataset(env_name: str, n_traj: int, out_path, seed: int = 0,
                     action_noise_std: float = 0.1, n_expert: int = 0, epsilon: float = 0.3) -> int:
    env = make_env(env_name, seed)
    rng = np.random.default_rng(seed)
    if isinstance(env, PointMassWallEnv):
        buffer = generate_suboptimal_dataset(env, n_traj, action_noise_std, rng)
    elif isinstance(env, GridMazeEnv):
        # n_traj random walks plus n_expert epsilon-greedy shortest-path episodes
        buffer = sparse_maze_dataset(env, n_traj, n_expert, epsilon, rng)
    else:
        if n_expert:
            raise ValueError(f"--n-expert is only supported for gridmaze, not {env_name}")
        buffer = random_walk_dataset(env, n_traj, rng)
    save_dataset(buffer, out_path)
    print(f"wrote {len(buffer.trajectories())} trajectories ({len(buffer)} transitions) to {out_path}")
    return 0


def cmd_ablate_dataset(in_path, centers, radii, max_len: int | None, out_path) -> int:
    buffer = load_dataset(in_path)
    n_before = len(buffer)
    if centers:
        buffer = remove_near(buffer, centers, radii)
    if max_len is not None:
        buffer = truncate_trajectories(buffer, max_len)
    save_dataset(buffer, out_path)
    print(f"removed {n_before - len(buffer)} transitions")
    return 0


def _read_run(run_dir: Path):
    if not (run_dir / DONE_MARKER).exists() or not (run_dir / "metrics.csv").exists():
        return None
    config = json.loads((run_dir / "config.json").read_text())
    rows = list(csv.DictReader(open(run_dir / "metrics.csv", newline="")))
    return config, rows


def _final(rows, phase: str, metric: str) -> float:
    hits = [(int(r["step"]), float(r["value"])) for r in rows if r["phase"] == phase and r["metric"] == metric]
    return max(hits)[1] if hits else float("nan")


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(len(v)))


REPORT_METRICS = (("retrain", "exploit_return"), ("retrain", "exploit_success"),
                  ("online", "explore_final_return"), ("online", "explore_final_success"))


def cmd_report(run_dirs, csv_path="report.csv", stream=None) -> int:
    stream = sys.stdout if stream is None else stream
    groups: dict[str, list] = defaultdict(list)
    for d in run_dirs:
        run = _read_run(Path(d))
        if run is None:
            print(f"skipping incomplete run dir {d}", file=sys.stderr)
            continue
        config, rows = run
        groups[config_hash(OooConfig(**config))].append(rows)
    if not groups:
        print("no completed runs", file=sys.stderr)
        return 1
    out_rows = []
    for key in sorted(groups):
        runs = groups[key]
        for phase, metric in REPORT_METRICS:
            vals = [_final(rows, phase, metric) for rows in runs]
            vals = [v for v in vals if math.isfinite(v)]
            if vals:
                m, se = mean_stderr(vals)
                out_rows.append((key, metric, "final", len(vals), m, se))
        by_step = defaultdict(list)
        for rows in runs:
            for r in rows:
                if r["metric"] == "intrinsic_last1000":
                    by_step[int(r["step"])].append(float(r["value"]))
        for step in sorted(by_step):
            m, se = mean_stderr(by_step[step])
            out_rows.append((key, "intrinsic_last1000", step, len(by_step[step]), m, se))
    header = ("config", "metric", "step", "n", "mean", "stderr")
    for row in out_rows:
        if row[2] == "final":
            print(f"{row[0]}  {row[1]:<24} {row[4]:.4f} ± {row[5]:.4f}  (n={row[3]})", file=stream)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(out_rows)
    return 0


def _point(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ooorl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, required=True)
    r.add_argument("--out", required=True)

    m = sub.add_parser("make-dataset", help="write an offline dataset")
    m.add_argument("--env", required=True)
    m.add_argument("--n", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--noise", type=float, default=0.1, help="action noise std for scripted data")
    m.add_argument("--n-expert", type=int, default=0,
                   help="gridmaze only: epsilon-greedy shortest-path episodes to mix in")
    m.add_argument("--epsilon", type=float, default=0.3)

    a = sub.add_parser("ablate-dataset", help="remove transitions near points and/or truncate")
    a.add_argument("--in", dest="in_path", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--center", type=_point, action="append", default=[])
    a.add_argument("--radius", type=float, action="append", default=[])
    a.add_argument("--max-len", type=int, default=None)

    rep = sub.add_parser("report", help="aggregate completed run directories")
    rep.add_argument("run_dirs", nargs="+")
    rep.add_argument("--csv", default="report.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.seed, args.out)
        if args.command == "make-dataset":
            return cmd_make_dataset(args.env, args.n, args.out, args.seed, args.noise, args.n_expert,
                                    args.epsilon)
        if args.command == "ablate-dataset":
            if len(args.center) != len(args.radius):
                raise ValueError("each --center needs a matching --radius")
            return cmd_ablate_dataset(args.in_path, args.center, args.radius, args.max_len, args.out)
        return cmd_report(args.run_dirs, args.csv)
    except (ConfigError, OSError, ValueError, RuntimeError, AssertionError) as exc:
        print(f"ooorl {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
