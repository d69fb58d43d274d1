"""Command line: scenario generation, asynchronous and baseline runs, comparison.

Every failure exits nonzero after printing a single machine-parsable line
``error: <CODE> <human text>`` to stderr.  Codes: CONFIG_INVALID,
INPUT_INVALID, UNSUPPORTED_INPUT, BOOTSTRAP_FAILED, DIVERGED,
RANK_DEFICIENT, NO_OVERLAP, IO_ERROR.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import errors as err
from . import io as cio
from .engine import EngineConfig
from .pipeline import (RunReport, compare_runs, make_initializer, run_async,
                       run_baseline, simulate_to_files)

_ERROR_CODES = [
    (err.ScenarioConfigError, "CONFIG_INVALID"),
    (err.UnsupportedInputError, "UNSUPPORTED_INPUT"),
    (err.BootstrapFailedError, "BOOTSTRAP_FAILED"),
    (err.DivergenceError, "DIVERGED"),
    (err.RankDeficiencyError, "RANK_DEFICIENT"),
    (err.OutOfRangeError, "NO_OVERLAP"),
    (err.InvalidArgumentError, "INPUT_INVALID"),
    (err.EmptyStreamError, "INPUT_INVALID"),
    (err.CtsfmError, "INPUT_INVALID"),
    (OSError, "IO_ERROR"),
]


def _fail(exc) -> int:
    for cls, code in _ERROR_CODES:
        if isinstance(exc, cls):
            print(f"error: {code} {exc}", file=sys.stderr)
            return 2
    print(f"error: INTERNAL {exc}", file=sys.stderr)
    return 3


def _load_scenario(args):
    scenario = cio.load_scenario(args.config)
    if getattr(args, "seed", None) is not None:
        scenario = replace(scenario, seed=args.seed)
    return scenario


def _load_inputs(args):
    """Scenario config plus optional explicit stream/ground-truth overrides."""
    scenario = _load_scenario(args)
    if args.events:
        events = cio.read_events(args.events)
        ground_truth = cio.read_trajectory(args.groundtruth) if args.groundtruth else None
    else:
        from .sim import generate_events
        result = generate_events(scenario)
        events, ground_truth = result.events, result.ground_truth
    return scenario, events, ground_truth


def _engine_config(args) -> EngineConfig:
    cfg = EngineConfig()
    if args.state_period is not None:
        cfg.state_insertion_period = args.state_period
    if args.solve_trigger is not None:
        cfg.solve_trigger = args.solve_trigger
    if args.outlier_px is not None:
        cfg.outlier_avg_reproj_px = args.outlier_px
    if args.qc is not None:
        cfg.qc = args.qc
    EngineConfig.__post_init__(cfg)
    return cfg


def cmd_simulate(args) -> int:
    scenario = _load_scenario(args)
    stats = simulate_to_files(scenario, args.output_dir)
    cio.write_report(os.path.join(args.output_dir, "simulate_report.txt"), stats)
    for key, value in stats.items():
        print(f"{key} = {value}")
    return 0


def cmd_run_async(args) -> int:
    scenario, events, ground_truth = _load_inputs(args)
    initializer = make_initializer(
        args.initializer,
        scenario=scenario if not args.events else None,
        ground_truth=ground_truth, seed=scenario.seed)
    config = _engine_config(args)
    config.pixel_sigma = scenario.pixel_noise_sigma if scenario.pixel_noise_sigma > 0 else 0.5
    report, estimate, _ = run_async(events, scenario.intrinsics, ground_truth,
                                    engine_config=config, initializer=initializer)
    os.makedirs(args.output_dir, exist_ok=True)
    cio.write_trajectory(os.path.join(args.output_dir, "trajectory_async.txt"), estimate)
    cio.write_report(os.path.join(args.output_dir, "report_async.txt"),
                     report.to_fields())
    print(f"ate_m = {report.ate_m:.6g}")
    print(f"rpe_m = {report.rpe_m:.6g}")
    print(f"knot_count = {report.knot_count}")
    print(f"event_count = {report.event_count}")
    return 0


def cmd_run_baseline(args) -> int:
    scenario, events, ground_truth = _load_inputs(args)
    initializer = make_initializer(
        args.initializer,
        scenario=scenario if not args.events else None,
        ground_truth=ground_truth, seed=scenario.seed)
    report, series, _ = run_baseline(
        events, scenario.intrinsics, ground_truth, initializer,
        batch_mode=args.batch_mode, batch_duration=args.batch_duration,
        batch_count=args.batch_count,
        pixel_sigma=scenario.pixel_noise_sigma if scenario.pixel_noise_sigma > 0 else 0.5)
    os.makedirs(args.output_dir, exist_ok=True)
    cio.write_trajectory(os.path.join(args.output_dir, "trajectory_baseline.txt"), series)
    cio.write_report(os.path.join(args.output_dir, "report_baseline.txt"),
                     report.to_fields())
    print(f"ate_m = {report.ate_m:.6g}")
    print(f"rpe_m = {report.rpe_m:.6g}")
    print(f"unusable_frames = {report.extras['unusable_frames']}")
    return 0


def cmd_compare(args) -> int:
    report_a = RunReport.from_fields(cio.read_report(args.report_a))
    report_b = RunReport.from_fields(cio.read_report(args.report_b))
    est_a = cio.read_trajectory(args.trajectory_a)
    est_b = cio.read_trajectory(args.trajectory_b)
    ground_truth = cio.read_trajectory(args.groundtruth)
    table, rows = compare_runs(report_a, report_b, est_a, est_b, ground_truth)
    os.makedirs(args.output_dir, exist_ok=True)
    with open(os.path.join(args.output_dir, "comparison.txt"), "w") as fh:
        fh.write(table)
    csv_path = os.path.join(args.output_dir, "trajectories.csv")
    with open(csv_path, "w") as fh:
        fh.write("t,x_a,y_a,z_a,x_b,y_b,z_b,x_gt,y_gt,z_gt\n")
        for row in rows:
            fh.write(",".join(f"{v:.9f}" for v in row) + "\n")
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctsfm",
        description="Continuous-time event-camera SfM: simulate, run, compare.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate an event stream + ground truth")
    sim.add_argument("--config", required=True, help="scenario YAML")
    sim.add_argument("--seed", type=int, default=None, help="override scenario seed")
    sim.add_argument("--output-dir", required=True)
    sim.set_defaults(func=cmd_simulate)

    def common_run_flags(p):
        p.add_argument("--config", required=True, help="scenario YAML (intrinsics source)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", required=True)
        p.add_argument("--events", default=None, help="event stream file instead of simulating")
        p.add_argument("--groundtruth", default=None, help="trajectory file for metrics")
        p.add_argument("--initializer", choices=["ground_truth", "random_depth"],
                       default="ground_truth")

    ra = sub.add_parser("run-async", help="asynchronous continuous-time estimation")
    common_run_flags(ra)
    ra.add_argument("--state-period", type=float, default=None,
                    help="control state insertion period [s]")
    ra.add_argument("--solve-trigger", choices=["per_event", "per_state", "per_n_events"],
                    default=None)
    ra.add_argument("--outlier-px", type=float, default=None)
    ra.add_argument("--qc", type=float, default=None, help="motion prior PSD")
    ra.set_defaults(func=cmd_run_async)

    rb = sub.add_parser("run-baseline", help="frame batching + bundle adjustment")
    common_run_flags(rb)
    rb.add_argument("--batch-mode", choices=["fixed_duration", "fixed_count"],
                    default="fixed_duration")
    rb.add_argument("--batch-duration", type=float, default=0.1, help="seconds per frame")
    rb.add_argument("--batch-count", type=int, default=1000, help="events per frame")
    rb.set_defaults(func=cmd_run_baseline)

    cp = sub.add_parser("compare", help="side-by-side metrics and plot CSV")
    cp.add_argument("--report-a", required=True)
    cp.add_argument("--report-b", required=True)
    cp.add_argument("--trajectory-a", required=True)
    cp.add_argument("--trajectory-b", required=True)
    cp.add_argument("--groundtruth", required=True)
    cp.add_argument("--output-dir", required=True)
    cp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # uniform machine-parsable failure line
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
