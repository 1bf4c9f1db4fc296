"""Command-line front end for the toolkit.

Subcommands map one-to-one onto the library workflow:

  placement-optimize   grow and refine an anchor constellation for a target set
  heatmap              accuracy lower-bound grid over a horizontal slice
  sim                  synthesize a scenario, run the filter, score the run
  estimate             replay a recorded measurement log through the filter
  eval                 score an estimate log against ground truth

Every command is a pure function of its input files and flags, so
rerunning an invocation reproduces the outputs byte for byte. Input
arguments accept either filesystem paths or "asset:NAME" references
into the bundled assets. Exit codes: 0 success, 1 bad input, 2 target
not met, 3 filter divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .assets import list_assets, resolve_ref
from .eskf import gating_report_to_dict, read_estimates, run_filter, write_estimates
from .geometry import load_environment
from .measurement import (
    GroundTruthRecord,
    TdoaParams,
    load_placement,
    read_log,
    save_placement,
    synth_ground_truth,
    write_log,
)
from .placement import (
    PlacementSearchSpace,
    escalate_anchor_count,
    heatmap,
    load_targets,
    metric_report_to_dict,
    write_heatmap_csv,
)
from .profiles import profile
from .sim import (
    eval_summary_to_dict,
    evaluate_rmse,
    load_scenario,
    run_monte_carlo,
    run_scenario,
    timewise_errors,
    trajectory_bound_rmse,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _vec3(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(
            f"expected three comma-separated numbers, got {text!r}"
        )
    try:
        return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _out_dir(arg: str) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_placement_optimize(args) -> int:
    env = load_environment(resolve_ref(args.env))
    targets = load_targets(resolve_ref(args.targets))
    search = PlacementSearchSpace.boundary_grid(env, resolution=args.resolution)
    result = escalate_anchor_count(
        targets,
        search,
        env,
        TdoaParams(),
        rmse_target=args.rmse_target,
        m_min=args.min_anchors,
        m_max=args.max_anchors,
        pairing=args.pairing,
        seed=args.seed,
    )
    out = _out_dir(args.out)
    save_placement(result.placement, out / "placement.json")
    n_anchors = int(result.placement.anchors.shape[0])
    report = metric_report_to_dict(result.report)
    report.update(
        {
            "success": result.success,
            "rmse_target": args.rmse_target,
            "anchors": n_anchors,
            "pairing": args.pairing,
            "attempts": [
                [int(m), agg if math.isfinite(agg) else "inf"]
                for m, agg in result.attempts
            ],
            "history": [h if math.isfinite(h) else "inf" for h in result.history],
            "sweeps": max(len(result.history) - 1, 0),
        }
    )
    _write_json(report, out / "report.json")
    for m, agg in result.attempts:
        print(f"  {m:3d} anchors: aggregate rmse {agg:.4f} m")
    verdict = "met" if result.success else "NOT met"
    print(
        f"target {args.rmse_target} m {verdict} with {n_anchors} anchors; "
        f"wrote {out / 'placement.json'} and {out / 'report.json'}"
    )
    return 0 if result.success else 2


def cmd_heatmap(args) -> int:
    env = load_environment(resolve_ref(args.env))
    placement = load_placement(resolve_ref(args.placement))
    hm = heatmap(
        env, placement, TdoaParams(), height=args.height, resolution=args.resolution
    )
    write_heatmap_csv(hm, args.out)
    ny, nx = hm.rmse_lb.shape
    n_unobs = int(np.sum(np.isinf(hm.rmse_lb)))
    note = f", {n_unobs} unobservable cells" if n_unobs else ""
    print(f"wrote {args.out}: {ny}x{nx} cells at height {hm.height} m{note}")
    return 0


def cmd_sim(args) -> int:
    scenario = load_scenario(resolve_ref(args.scenario))
    out = _out_dir(args.out)
    if args.trials == 1:
        result = run_scenario(scenario)
        write_log(out / "records.jsonl", result.records)
        write_log(out / "gt.jsonl", result.gt_records)
        write_estimates(out / "estimates.jsonl", result.filter_result.estimates)
        _write_json(
            gating_report_to_dict(result.filter_result.gating), out / "gating.json"
        )
        _write_json(eval_summary_to_dict(result.summary), out / "summary.json")
        s = result.summary
        print(
            f"{scenario.name}: rmse {s.rmse:.3f} m (bound {s.bound_rmse:.3f} m), "
            f"reject rate {s.reject_rate:.3f}, {s.n_samples} scored samples"
        )
        if s.diverged:
            print(f"filter diverged at t = {s.divergence_time:.2f} s", file=sys.stderr)
            return 3
        return 0
    mc = run_monte_carlo(scenario, args.trials)
    _write_json(
        {
            "scenario": scenario.name,
            "trials": args.trials,
            "seeds": list(mc.seeds),
            "mean_rmse": mc.mean_rmse,
            "std_rmse": mc.std_rmse,
            "bound_rmse": mc.bound_rmse,
            "mean_nees_pos": mc.mean_nees_pos,
            "mean_reject_rate": mc.mean_reject_rate,
            "n_diverged": mc.n_diverged,
            "per_trial": [eval_summary_to_dict(t) for t in mc.trials],
        },
        out / "summary.json",
    )
    print(
        f"{scenario.name}: {args.trials} trials, mean rmse {mc.mean_rmse:.3f} m "
        f"(bound {mc.bound_rmse:.3f} m), {mc.n_diverged} diverged"
    )
    return 3 if mc.n_diverged else 0


def cmd_estimate(args) -> int:
    records = read_log(resolve_ref(args.log))
    placement = load_placement(resolve_ref(args.placement))
    cfg, _ = profile(args.profile, lever_arm=args.lever_arm)
    result = run_filter(records, placement, cfg)
    out = _out_dir(args.out)
    write_estimates(out / "estimates.jsonl", result.estimates)
    _write_json(gating_report_to_dict(result.gating), out / "gating.json")
    g = result.gating
    print(
        f"{len(result.estimates)} estimates; {g.accepted} corrections accepted, "
        f"{g.rejected} rejected (reject rate {g.reject_rate:.3f})"
    )
    if result.diverged:
        print(
            f"filter diverged at t = {result.divergence_time:.2f} s", file=sys.stderr
        )
        return 3
    return 0


def _load_reference(path: Path):
    """Classify a reference file as a scenario or a ground-truth log.

    A scenario file is a single JSON object with a trajectory block; a
    ground-truth log is JSONL with one record per line.
    """
    try:
        with open(path) as fh:
            data = json.load(fh)
        is_scenario = isinstance(data, dict) and "trajectory" in data
    except json.JSONDecodeError:
        is_scenario = False
    except OSError as exc:
        raise ValueError(f"{path}: cannot read reference file: {exc}") from exc
    if is_scenario:
        return load_scenario(path), None
    gt = [r for r in read_log(path) if isinstance(r, GroundTruthRecord)]
    if not gt:
        raise ValueError(f"{path}: no ground-truth records in log")
    return None, gt


def cmd_eval(args) -> int:
    estimates = read_estimates(resolve_ref(args.estimates))
    scenario, gt = _load_reference(resolve_ref(args.reference))
    if args.bound and scenario is None:
        raise ValueError(
            "--bound needs a scenario reference (it supplies anchors and environment)"
        )
    if scenario is not None:
        gt = synth_ground_truth(scenario.trajectory, scenario.gt_rate)
    summary = evaluate_rmse(estimates, gt, warmup=args.warmup)
    if scenario is not None:
        bound = trajectory_bound_rmse(
            scenario.trajectory,
            scenario.placement,
            scenario.env,
            scenario.tdoa_params,
        )
        summary = replace(summary, bound_rmse=bound)
    text = json.dumps(eval_summary_to_dict(summary), indent=2)
    print(text)
    out = _out_dir(args.out) if args.out else None
    if out is not None:
        (out / "summary.json").write_text(text + "\n")
    if args.bound:
        ts, errs, bounds = timewise_errors(
            estimates, gt, scenario.placement, scenario.env, scenario.tdoa_params
        )
        dest = (out / "curve.csv") if out is not None else Path("curve.csv")
        with open(dest, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "err", "bound"])
            for t, e, b in zip(ts, errs, bounds):
                writer.writerow(
                    [
                        repr(float(t)),
                        repr(float(e)),
                        "inf" if math.isinf(b) else repr(float(b)),
                    ]
                )
        print(f"wrote {dest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tdoa-forge",
        description=__doc__.split("\n\n")[0],
        epilog=(
            "Input files accept asset:NAME references into the bundled assets "
            f"({', '.join(list_assets())}). Exit codes: 0 success, 1 bad input, "
            "2 target not met, 3 filter divergence. TDOA_FORGE_THREADS caps "
            "internal parallelism (unset = 1, 0 = all cores)."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "placement-optimize",
        help="grow and refine an anchor constellation until a target accuracy is met",
    )
    p.add_argument("env", help="environment JSON file or asset reference")
    p.add_argument("targets", help="target-set JSON file or asset reference")
    p.add_argument(
        "--rmse-target",
        type=float,
        required=True,
        metavar="M",
        help="aggregate rmse lower bound to reach, meters",
    )
    p.add_argument(
        "--min-anchors", type=int, default=8, help="starting anchor count (default 8)"
    )
    p.add_argument(
        "--max-anchors",
        type=int,
        default=22,
        help="anchor count at which escalation gives up (default 22)",
    )
    p.add_argument(
        "--pairing",
        choices=("ring", "disjoint"),
        default="disjoint",
        help="difference schedule: ring (centralized) or disjoint pairs (default)",
    )
    p.add_argument(
        "--resolution",
        type=float,
        default=0.5,
        metavar="M",
        help="candidate grid spacing on the boundary faces, meters (default 0.5)",
    )
    p.add_argument(
        "--seed", type=int, default=0, help="seed for the spread initialization"
    )
    p.add_argument(
        "--out",
        default=".",
        metavar="DIR",
        help="directory for placement.json and report.json (default .)",
    )
    p.set_defaults(func=cmd_placement_optimize)

    p = sub.add_parser(
        "heatmap", help="rmse lower-bound grid over a horizontal slice, as CSV"
    )
    p.add_argument("env", help="environment JSON file or asset reference")
    p.add_argument("placement", help="placement JSON file or asset reference")
    p.add_argument(
        "--height",
        type=float,
        default=1.5,
        metavar="M",
        help="slice height above the floor, meters (default 1.5)",
    )
    p.add_argument(
        "--resolution",
        type=float,
        default=0.25,
        metavar="M",
        help="grid cell size, meters (default 0.25)",
    )
    p.add_argument("--out", required=True, metavar="CSV", help="output CSV path")
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser(
        "sim", help="synthesize a scenario, run the filter, write logs and summary"
    )
    p.add_argument("scenario", help="scenario JSON file or asset reference")
    p.add_argument(
        "--out", required=True, metavar="DIR", help="directory for all run artifacts"
    )
    p.add_argument(
        "--trials",
        type=int,
        default=1,
        help="Monte-Carlo trials; 1 writes full logs, more writes an aggregate summary",
    )
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser(
        "estimate", help="replay a recorded measurement log through the filter"
    )
    p.add_argument("log", help="measurement JSONL log (e.g. records.jsonl from sim)")
    p.add_argument("placement", help="placement JSON file or asset reference")
    p.add_argument(
        "--profile",
        choices=("arena", "staircase", "multiroom"),
        default="arena",
        help="filter preset (default arena)",
    )
    p.add_argument(
        "--lever-arm",
        type=_vec3,
        default=(0.0, 0.0, 0.0),
        metavar="X,Y,Z",
        help="antenna offset in the body frame, meters (default 0,0,0)",
    )
    p.add_argument(
        "--out",
        required=True,
        metavar="DIR",
        help="directory for estimates.jsonl and gating.json",
    )
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser(
        "eval", help="score an estimate log against ground truth or a scenario"
    )
    p.add_argument("estimates", help="estimate JSONL log")
    p.add_argument(
        "reference", help="ground-truth JSONL log, or the scenario JSON that made it"
    )
    p.add_argument(
        "--bound",
        action="store_true",
        help="also write a per-timestep t,err,bound CSV (needs a scenario reference)",
    )
    p.add_argument(
        "--warmup",
        type=float,
        default=0.0,
        metavar="S",
        help="seconds to drop from the start before scoring (default 0)",
    )
    p.add_argument(
        "--out",
        metavar="DIR",
        help="directory for summary.json (and curve.csv with --bound); "
        "default prints the summary only",
    )
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
