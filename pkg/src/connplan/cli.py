"""Command-line driver: ``connplan plan | rollout | report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import traces as tr
from .config import load_config, preset_names, with_overrides
from .errors import ConfigError, ConnplanError, DomainError, InfeasibleMissionError
from .ilqg import NominalPlan
from .sim import (MissionSpec, mission_tracker, rollout_batch, run_offline_mission, run_online_mission,
                  validate_connectivity, wilson_interval)

log = logging.getLogger("connplan")

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 2, 3
PLAN_INFO = "plan_info.csv"


class UsageError(Exception):
    pass


def _load(args) -> MissionSpec:
    try:
        mission = load_config(args.config)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    overrides = {"workers": args.workers}
    if getattr(args, "stop", None):
        overrides["stop"] = args.stop
    if getattr(args, "time_budget_s", None) is not None:
        overrides["time_budget_s"] = args.time_budget_s
    return with_overrides(mission, **overrides)


def _ids(mission: MissionSpec) -> list:
    return [r.id for r in mission.robots]


def _mission_problem(mission: MissionSpec):
    """Problem covering the whole mission (all segments back to back)."""
    return mission.problem(0, None, horizon=mission.horizon * mission.n_segments)


def cmd_plan(args) -> int:
    mission = _load(args)
    seed = mission.seed if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if mission.mode == "offline":
        seg = run_offline_mission(mission)
        segments = [seg]
        problem, plan = seg.problem, seg.result.plan
    else:
        res = run_online_mission(mission)
        segments = res.segments
        problem, plan = res.problem, res.plan
    ids = _ids(mission)
    tr.write_nominal_plan(out / tr.NOMINAL_PLAN, plan, ids)
    tr.write_metric_trace(out / tr.METRIC_TRACE, problem, plan, ids)
    tr.write_csv(out / tr.PLANNER_TRACE, tr.PLANNER_HEADER,
                 [row for s in segments for row in tr.planner_rows(s.segment, s.result.trace)])
    tr.write_csv(out / tr.TIMING, tr.TIMING_HEADER,
                 [row for s in segments for row in tr.timing_rows(s.segment, s.result.trace)])
    tr.write_csv(out / tr.SEGMENTS, ["segment", "iterations", "stop_reason", "halvings"],
                 [[s.segment, s.result.iterations, s.result.stop_reason, s.halvings] for s in segments])
    tr.write_csv(out / PLAN_INFO, ["key", "value"], [
        ["mission", mission.name], ["mode", mission.mode], ["robots", mission.n_robots],
        ["segments", mission.n_segments], ["horizon", problem.horizon], ["epsilon", mission.epsilon],
        ["delta_conf", mission.delta_conf], ["seed", seed]])
    lam = problem.metric(plan.means, plan.covs).lambda2
    print(f"plan written to {out}: {mission.n_segments} segment(s), min underbar-λ2 = {tr.fmt(lam.min())}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    mission = _load(args)
    count = mission.rollouts if args.rollouts is None else args.rollouts
    seed = mission.seed if args.seed is None else args.seed
    if count < 0:
        raise UsageError("--rollouts must be non-negative")
    plan_dir = Path(args.plan or args.out)
    plan_file = plan_dir / tr.NOMINAL_PLAN
    if not plan_file.is_file():
        raise UsageError(f"no plan found at {plan_file}")
    problem = _mission_problem(mission)
    try:
        inputs = tr.read_nominal_inputs(plan_file, _ids(mission))
        plan = NominalPlan.from_inputs(problem, inputs)
    except (ValueError, DomainError) as exc:
        raise UsageError(f"plan does not match the config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    batch = rollout_batch(plan, problem, count, seed, mission_tracker(mission), workers=args.workers)
    tr.write_csv(out / tr.ROLLOUTS, ["rollout", "seed_root", "seed_index", "min_lambda2", "violated_epsilon",
                                     "violated_metric", "max_input"],
                 [[k, seed, k, batch.lambda2[k].min(), bool(batch.below_epsilon[k].any()),
                   bool(batch.below_metric[k].any()), batch.max_input[k]] for k in range(count)])
    if count == 0:
        tr.write_csv(out / tr.ROLLOUT_STEPS, ["t", "below_epsilon", "below_metric", "success_rate"], [])
        tr.write_csv(out / tr.ROLLOUT_SUMMARY, ["key", "value"], [["n_rollouts", 0], ["verdict", "none"]])
        print("0 rollouts: nothing to validate")
        return EXIT_OK
    summary = validate_connectivity(batch, mission.delta_conf)
    tr.write_csv(out / tr.ROLLOUT_STEPS, ["t", "below_epsilon", "below_metric", "success_rate"],
                 [[t, summary.per_step_below_epsilon[t], summary.per_step_below_metric[t],
                   1.0 - summary.per_step_below_epsilon[t] / count] for t in range(problem.horizon + 1)])
    verdict = "pass" if summary.passed else "fail"
    tr.write_csv(out / tr.ROLLOUT_SUMMARY, ["key", "value"], [
        ["n_rollouts", count], ["seed", seed], ["delta_conf", mission.delta_conf],
        ["rollouts_below_epsilon", summary.rollouts_below_epsilon],
        ["rollouts_below_metric", summary.rollouts_below_metric],
        ["min_success_rate", summary.min_success_rate], ["success_ci_low", summary.success_interval[0]],
        ["success_ci_high", summary.success_interval[1]], ["margin", summary.margin],
        ["passed_epsilon", summary.passed_epsilon], ["passed_metric", summary.passed_metric],
        ["verdict", verdict]])
    print(f"{count} rollouts: {summary.rollouts_below_epsilon} below epsilon, "
          f"{summary.rollouts_below_metric} below the metric; verdict {verdict}")
    return EXIT_OK


def _kv(path: Path) -> dict:
    _, rows = tr.read_csv(path)
    return {k: v for k, v in rows}


def build_report(trace_dir: Path) -> str:
    needed = [tr.METRIC_TRACE, tr.PLANNER_TRACE, tr.SEGMENTS, PLAN_INFO]
    missing = [n for n in needed if not (trace_dir / n).is_file()]
    if missing:
        raise UsageError(f"{trace_dir}: missing trace files {missing}")
    info = _kv(trace_dir / PLAN_INFO)
    eps = float(info["epsilon"])
    metric = tr.read_columns(trace_dir / tr.METRIC_TRACE)
    planner = tr.read_columns(trace_dir / tr.PLANNER_TRACE)
    segs = tr.read_columns(trace_dir / tr.SEGMENTS)
    lines = [f"mission {info['mission']} ({info['mode']}, {info['robots']} robots, {info['segments']} segment(s), "
             f"horizon {info['horizon']})"]
    lam = metric["lambda2_lb"]
    lines.append(f"min underbar-λ2 = {tr.fmt(np.min(lam))} at t = {int(metric['t'][np.argmin(lam)])} "
                 f"(epsilon = {tr.fmt(eps)}, {'above' if np.min(lam) > eps else 'NOT above'} epsilon)")
    timing = tr.read_columns(trace_dir / tr.TIMING) if (trace_dir / tr.TIMING).is_file() else None
    for k, s in enumerate(segs["segment"]):
        sel = planner["segment"] == s
        cost = planner["transformed_cost"][sel]
        line = (f"segment {int(s)}: {int(segs['iterations'][k])} iterations, stop {segs['stop_reason'][k]}, "
                f"final cost {tr.fmt(cost[-1])}, best cost {tr.fmt(planner['best_cost'][sel][-1])}")
        if timing is not None:
            tsel = timing["segment"] == s
            line += (f", simulated time {tr.fmt(timing['sim_time_s'][tsel][-1])} s, "
                     f"wall time {tr.fmt(np.sum(timing['wall_time_s'][tsel]))} s")
        lines.append(line)
    if (trace_dir / tr.ROLLOUTS).is_file():
        ro = tr.read_columns(trace_dir / tr.ROLLOUTS)
        n = len(ro["rollout"])
        if n == 0:
            lines.append("rollouts: none")
        else:
            for name, col in (("epsilon", "violated_epsilon"), ("the metric", "violated_metric")):
                bad = int(np.sum(ro[col]))
                lo, hi = wilson_interval(bad, n)
                lines.append(f"rollouts below {name}: {bad}/{n} = {tr.fmt(bad / n)} "
                             f"(3-sigma interval {tr.fmt(lo)} .. {tr.fmt(hi)})")
            lines.append(f"min rollout λ2 = {tr.fmt(np.min(ro['min_lambda2']))}")
        if (trace_dir / tr.ROLLOUT_SUMMARY).is_file():
            lines.append(f"validation verdict: {_kv(trace_dir / tr.ROLLOUT_SUMMARY)['verdict']}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    d = Path(args.trace_dir or args.out)
    if not d.is_dir():
        raise UsageError(f"{d} is not a directory")
    print(build_report(d))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="connplan", description="Connectivity-aware multi-robot trajectory planning")
    p.add_argument("-v", "--verbose", action="store_true", help="log planner progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True,
                            help=f"config file or preset name ({', '.join(preset_names())})")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--workers", type=int, default=None, help="worker processes (default: $CONNPLAN_WORKERS or 1)")

    sp = sub.add_parser("plan", help="plan the mission and write trace files")
    common(sp)
    sp.add_argument("--seed", type=int, default=None, help="root seed recorded with the plan")
    sp.add_argument("--time-budget-s", type=float, default=None, help="simulated planning budget per segment")
    sp.add_argument("--stop", choices=["converged", "time"], default=None)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("rollout", help="Monte Carlo validation of a written plan")
    common(sp)
    sp.add_argument("--plan", default=None, help="directory holding the plan (default: --out)")
    sp.add_argument("--rollouts", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(func=cmd_rollout)

    sp = sub.add_parser("report", help="summarise a trace directory")
    sp.add_argument("trace_dir", nargs="?", default=None)
    sp.add_argument("--out", default="out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except InfeasibleMissionError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConnplanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
