"""Plain-text trace files (CSV, 12 significant digits)."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import metric as mt

FLOAT_FMT = "%.12g"

NOMINAL_PLAN = "nominal_plan.csv"
PLANNER_TRACE = "planner_trace.csv"
METRIC_TRACE = "metric_trace.csv"
SEGMENTS = "segments.csv"
TIMING = "timing.csv"
ROLLOUTS = "rollouts.csv"
ROLLOUT_STEPS = "rollout_timesteps.csv"
ROLLOUT_SUMMARY = "rollout_summary.csv"


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path: Path) -> tuple:
    """``(header, rows)`` with every field left as a string."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    return rows[0], rows[1:]


def read_columns(path: Path) -> dict:
    """Numeric columns keyed by header name; empty fields become NaN."""
    header, rows = read_csv(path)
    cols = {h: [] for h in header}
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"{path}: row has {len(row)} fields, expected {len(header)}")
        for h, v in zip(header, row):
            cols[h].append(v)
    out = {}
    for h, vals in cols.items():
        try:
            out[h] = np.array([float(v) if v != "" else np.nan for v in vals])
        except ValueError:
            out[h] = np.array(vals, dtype=object)
    return out


def write_nominal_plan(path: Path, plan, robot_ids: Sequence[str]):
    """Long format: one row per (robot, t); inputs blank at the final timestep."""
    N, T1, n = plan.means.shape
    m = plan.inputs.shape[2]
    rows_i, cols_i = np.tril_indices(n)
    header = (["robot", "t"] + [f"u{k}" for k in range(m)] + [f"x{k}" for k in range(n)]
              + [f"cov{r}{c}" for r, c in zip(rows_i, cols_i)])
    rows = []
    for i in range(N):
        for t in range(T1):
            u = list(plan.inputs[i, t]) if t < T1 - 1 else [""] * m
            rows.append([robot_ids[i], t] + u + list(plan.means[i, t]) + list(plan.covs[i, t][rows_i, cols_i]))
    write_csv(path, header, rows)


def read_nominal_inputs(path: Path, robot_ids: Sequence[str]) -> np.ndarray:
    """Recover the ``(N, T, m)`` input array from a nominal-plan file."""
    header, rows = read_csv(path)
    m = sum(1 for h in header if h.startswith("u"))
    if header[:2] != ["robot", "t"] or m == 0:
        raise ValueError(f"{path} is not a nominal-plan file")
    by_robot: dict = {}
    for row in rows:
        by_robot.setdefault(row[0], []).append(row)
    if list(by_robot) != list(robot_ids):
        raise ValueError(f"plan robots {list(by_robot)} do not match the config robots {list(robot_ids)}")
    lengths = {len(v) for v in by_robot.values()}
    if len(lengths) != 1:
        raise ValueError("robots have different plan lengths")
    T = lengths.pop() - 1
    out = np.empty((len(robot_ids), T, m))
    for i, rid in enumerate(robot_ids):
        for row in by_robot[rid][:T]:
            out[i, int(row[1])] = [float(v) for v in row[2:2 + m]]
    return out


def write_metric_trace(path: Path, problem, plan, robot_ids: Sequence[str]):
    ev = problem.metric(plan.means, plan.covs)
    cost = mt.connectivity_cost(ev.lambda2, problem.cfg)
    idx = list(problem.position_indices)
    header = ["t"] + [f"{ax}_{rid}" for rid in robot_ids for ax in ("x", "y")[:len(idx)]] + [
        "lambda2_lb", "barrier_cost"]
    rows = []
    for t in range(plan.means.shape[1]):
        pos = [plan.means[i, t, k] for i in range(len(robot_ids)) for k in idx]
        rows.append([t] + pos + [ev.lambda2[t], cost[t]])
    write_csv(path, header, rows)


# wall-clock dependent values live in the timing file so the other traces stay reproducible
PLANNER_HEADER = ["segment", "iteration", "transformed_cost", "best_cost", "beta", "residual", "min_lambda2_lb",
                  "accepted_steps", "metric_evals"]
TIMING_HEADER = ["segment", "iteration", "sim_time_s", "wall_time_s"]


def planner_rows(segment: int, trace) -> list:
    return [[segment, r.iteration, r.transformed_cost, r.best_cost, r.beta, r.residual, r.min_lambda,
             r.accepted_steps, r.metric_evals] for r in trace]


def timing_rows(segment: int, trace) -> list:
    return [[segment, r.iteration, r.sim_time_s, r.solve_time_s] for r in trace]
