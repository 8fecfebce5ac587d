"""Command-line entry point: ``mcslam <subcommand> ...``.

Exit codes: 0 success, 2 configuration error (including unreadable inputs),
3 runtime failure (a run lost tracking and the scenario does not allow
partial results).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, McSlamError
from .rig import find_stereo_pairs, load_rig, overlap_ratio
from .scenario import (
    SCENARIO_PRESETS,
    aggregate,
    fmt,
    load_scenario,
    run_scenario,
    write_artifacts,
)
from .sim_world import Simulation, export_trajectory_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
OUTPUT_ENV = "MCSLAM_OUTPUT_DIR"

log = logging.getLogger("mcslam")


def _output_dir(args) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else Path(args.output)


def _scenario(args):
    sc = load_scenario(args.config)
    if args.seed is not None:
        sc = dataclasses.replace(sc, seed=args.seed)
    if getattr(args, "runs", None) is not None:
        sc = dataclasses.replace(sc, runs=args.runs)
    return sc


def cmd_check_overlap(args) -> int:
    rig = load_rig(args.rig)
    print(f"{'pair':>8} {'i->j':>8} {'j->i':>8} {'ratio':>8}")
    rows = []
    for i in range(rig.n):
        for j in range(i + 1, rig.n):
            fwd = overlap_ratio(rig.cameras[i], rig.cameras[j], rig.relative(j, i),
                                args.d_min, args.d_max, (args.grid, args.grid), (i, j))
            bwd = overlap_ratio(rig.cameras[j], rig.cameras[i], rig.relative(i, j),
                                args.d_min, args.d_max, (args.grid, args.grid), (j, i))
            ratio = max(fwd.ratio, bwd.ratio)
            rows.append({"pair": [i, j], "names": [rig.names[i], rig.names[j]],
                         "ratio_ij": float(fmt(fwd.ratio)), "ratio_ji": float(fmt(bwd.ratio)),
                         "ratio": float(fmt(ratio))})
            print(f"{i:>3}-{j:<4} {fwd.ratio:8.3f} {bwd.ratio:8.3f} {ratio:8.3f}")
    pairs = find_stereo_pairs(rig, args.threshold, args.d_min, args.d_max,
                              (args.grid, args.grid))
    if pairs:
        listed = ", ".join(f"{p.pair[0]}-{p.pair[1]} ({p.ratio:.3f})" for p in pairs)
        print(f"stereo pairs: {listed}; stereo initialization selected")
    else:
        print("no stereo pairs; monocular initialization selected")
    doc = {"threshold": args.threshold, "pairs": rows,
           "stereo_pairs": [list(p.pair) for p in pairs],
           "initialization": "stereo" if pairs else "monocular"}
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = _output_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    world = dataclasses.replace(sc.world, seed=sc.seed)
    sim = Simulation(world, sc.build_rig())
    path = out / f"{sc.name}_groundtruth.csv"
    export_trajectory_csv(sim.trajectory, path)
    lm = out / f"{sc.name}_landmarks.csv"
    lm.write_text("id,x,y,z\n" + "".join(
        f"{i},{fmt(p[0])},{fmt(p[1])},{fmt(p[2])}\n"
        for i, p in zip(sim.landmark_ids.tolist(), sim.landmark_positions)))
    print(f"wrote {path} and {lm}")
    return EXIT_OK


def _run(args, trace: bool) -> int:
    sc = _scenario(args)
    results = run_scenario(sc)
    paths = write_artifacts(sc, results, _output_dir(args), trace=trace)
    med = aggregate(results)
    for r in results:
        m = r.metrics
        status = "completed" if r.lost_frame is None else f"lost at frame {r.lost_frame}"
        ate = "n/a" if m["ate_rmse"] is None else f"{m['ate_rmse']:.4f} m"
        print(f"seed {r.seed}: {status}, keyframes {m['keyframes']}, ATE {ate}")
    print(f"median keyframes {med['keyframes']}, lost runs {med['lost_runs']}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    if med["lost_runs"] and not sc.allow_partial:
        print("tracking lost; set allow_partial to accept partial runs", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_run(args) -> int:
    return _run(args, trace=False)


def cmd_trace(args) -> int:
    return _run(args, trace=True)


def cmd_eval(args) -> int:
    """Re-score a trajectory CSV written by ``run``."""
    import numpy as np

    from .evaluation import default_segment_lengths, evaluate_ate, evaluate_rel_error
    from .geometry import RigidTransform

    text = Path(args.trajectory).read_text().splitlines()
    header = text[0].split(",")
    rows = [dict(zip(header, line.split(","))) for line in text[1:] if line]
    if not rows:
        raise ConfigError(f"{args.trajectory}: no trajectory rows")
    report = {}
    for run in sorted({int(r["run"]) for r in rows}):
        sel = [r for r in rows if int(r["run"]) == run]

        def poses(prefix):
            return [RigidTransform(
                np.array([float(r[f"{prefix}q{a}"]) for a in "xyzw"]),
                np.array([float(r[f"{prefix}{a}"]) for a in "xyz"])) for r in sel]

        est, gt = poses(""), poses("gt_")
        lengths = default_segment_lengths(gt)
        rel = evaluate_rel_error(est, gt, lengths)
        report[str(run)] = {
            "ate_rmse": float(fmt(evaluate_ate(est, gt, args.alignment))),
            "relative_error": {fmt(k): {kk: float(fmt(vv)) for kk, vv in v.items()}
                               for k, v in rel.items()},
        }
        print(f"run {run}: ATE {report[str(run)]['ate_rmse']} m")
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcslam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", metavar="{check-overlap,simulate,run,eval,trace}")
    sub.required = True

    ov = sub.add_parser("check-overlap", help="report pairwise overlap of a rig file")
    ov.add_argument("rig", help="rig calibration JSON")
    ov.add_argument("--threshold", type=float, default=0.5)
    ov.add_argument("--d-min", type=float, default=0.5)
    ov.add_argument("--d-max", type=float, default=20.0)
    ov.add_argument("--grid", type=int, default=20)
    ov.add_argument("--json", help="also write the report as JSON")
    ov.set_defaults(func=cmd_check_overlap)

    presets = ", ".join(sorted(SCENARIO_PRESETS))
    for name, func, help_ in (
        ("simulate", cmd_simulate, "export ground truth trajectory and landmarks"),
        ("run", cmd_run, "run a scenario; write metrics, events and trajectory"),
        ("trace", cmd_trace, "like run, plus the per-frame entropy trace"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help=f"scenario JSON or a bundled preset ({presets})")
        sp.add_argument("-o", "--output", default="mcslam_out",
                        help=f"output directory (overridden by ${OUTPUT_ENV})")
        sp.add_argument("--seed", type=int, help="override the scenario seed")
        if name != "simulate":
            sp.add_argument("--runs", type=int, help="override the number of seeded runs")
        sp.set_defaults(func=func)

    ev = sub.add_parser("eval", help="score a trajectory CSV written by run")
    ev.add_argument("trajectory")
    ev.add_argument("--alignment", choices=("yaw", "se3", "none"), default="yaw")
    ev.add_argument("--json")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (McSlamError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
