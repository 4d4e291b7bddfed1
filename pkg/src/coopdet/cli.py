"""Command-line driver: ``generate`` scenes, ``run`` sweeps, ``compare`` reports.

Exit codes: 0 success, 2 usage error, 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ComparisonError, ContractViolation, GenerationError, ScenarioFormatError
from .runner import MetricsReport, RunConfig, compare, compare_csv_text, run
from .scenario import generate_scenario, preset_params, save_scenario

USAGE_ERROR = 2
IO_ERROR = 3


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopdet",
        description="Cooperative 3D detection over object-level sparse features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a scenario file from a preset")
    gen.add_argument("--preset", required=True, choices=["open", "walled"])
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--objects", type=int, default=6)
    gen.add_argument("--frames", type=int, default=8)
    gen.add_argument("--speed", type=_parse_floats, default=(0.0, 0.0),
                     help="min,max object speed in m/s")
    gen.add_argument("--noise", type=int, default=0, help="clutter points per agent")
    gen.add_argument("--out", required=True)

    runp = sub.add_parser("run", help="run a latency sweep and write CSV + JSON")
    src = runp.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario file")
    src.add_argument("--gen-preset", choices=["open", "walled"],
                     help="generate the scene inline instead")
    runp.add_argument("--seed", type=int, required=True)
    runp.add_argument("--gen-seed", type=int, default=None)
    runp.add_argument("--gen-objects", type=int, default=6)
    runp.add_argument("--gen-frames", type=int, default=8)
    runp.add_argument("--gen-speed", type=_parse_floats, default=(0.0, 0.0))
    runp.add_argument("--gen-noise", type=int, default=0)
    runp.add_argument("--ego", type=int, default=None)
    runp.add_argument("--p", type=int, default=2, help="historical frames fused")
    runp.add_argument("--latencies", type=_parse_ints, default=(0, 100, 200, 300, 400))
    runp.add_argument("--head-mode", choices=["heuristic", "seeded"], default="heuristic")
    runp.add_argument("--channels", type=int, default=32)
    runp.add_argument("--voxel-size", type=_parse_floats, default=(0.4, 0.4))
    runp.add_argument("--conf-threshold", type=float, default=0.3)
    for flag in ("rte", "shuffle-ego", "reweight", "revoxelize", "temporal-fusion", "fusion"):
        dest = flag.replace("-", "_")
        default = dest != "shuffle_ego"
        runp.add_argument(f"--{flag}", dest=dest, action=argparse.BooleanOptionalAction,
                          default=default)
    runp.add_argument("--out", required=True, help="output prefix (writes .csv and .json)")

    cmp_ = sub.add_parser("compare", help="delta table between report JSON files")
    cmp_.add_argument("reports", nargs="+", help="two or more <prefix>.json files")
    cmp_.add_argument("--out", default=None, help="write the delta CSV here (default stdout)")
    return parser


def _cmd_generate(args) -> int:
    params = preset_params(
        args.preset,
        n_objects=args.objects,
        n_frames=args.frames,
        speed_range=tuple(args.speed),
        n_noise_points=args.noise,
    )
    scenario = generate_scenario(args.seed, params)
    try:
        save_scenario(scenario, args.out)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return IO_ERROR
    print(f"wrote {args.out}: {len(scenario.frames)} frames, "
          f"{len(scenario.objects0)} objects, {len(scenario.agents)} agents")
    return 0


def _cmd_run(args) -> int:
    config = RunConfig(
        seed=args.seed,
        scenario_path=args.scenario,
        gen_preset=args.gen_preset,
        gen_seed=args.gen_seed,
        gen_objects=args.gen_objects,
        gen_frames=args.gen_frames,
        gen_speed=tuple(args.gen_speed),
        gen_noise=args.gen_noise,
        ego_id=args.ego,
        p=args.p,
        latencies_ms=tuple(args.latencies),
        head_mode=args.head_mode,
        channels=args.channels,
        voxel_size=tuple(args.voxel_size),
        conf_threshold=args.conf_threshold,
        rte=args.rte,
        shuffle_ego=args.shuffle_ego,
        reweight=args.reweight,
        revoxelize=args.revoxelize,
        temporal_fusion=args.temporal_fusion,
        fusion=args.fusion,
    )
    report = run(config)
    try:
        csv_path, json_path = report.write(args.out)
    except OSError as exc:
        print(f"cannot write {args.out}: {exc}", file=sys.stderr)
        return IO_ERROR
    print(f"wrote {csv_path} and {json_path}", file=sys.stderr)
    print(f"runtime: {report.runtime_ms:.0f} ms", file=sys.stderr)
    print(report.to_csv_text(), end="")
    return 0


def _cmd_compare(args) -> int:
    try:
        reports = [MetricsReport.from_json_file(p) for p in args.reports]
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot load reports: {exc}", file=sys.stderr)
        return IO_ERROR
    deltas = compare(reports)
    text = compare_csv_text(deltas)
    if args.out:
        try:
            with open(args.out, "w") as fh:
                fh.write(text)
        except OSError as exc:
            print(f"cannot write {args.out}: {exc}", file=sys.stderr)
            return IO_ERROR
    else:
        print(text, end="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            return _cmd_generate(args)
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except (ContractViolation, GenerationError, ComparisonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (ScenarioFormatError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
