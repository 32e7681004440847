"""Command-line entry point: every toolchain stage behind one program.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All stages are
reproducible from (config, seed): re-running a command with the same inputs
produces byte-identical data artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, write_default_config
from .engine import (
    generate_scenario,
    load_sequence,
    load_specs,
    save_sequence,
    save_specs,
    synthesize_sequence,
)
from .fitting import (
    fit_sequence,
    load_fit_result,
    predicted_keypoints,
    save_fit_result,
)
from .metrics import dataset_stats, mpjpe, pa_mpjpe
from .pipeline import PipelineConfig, run_pipeline, scenario_seed
from .quality import quality_gate


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the contract says 1
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="synthpose",
                     description="Synthetic parametric-human sequence toolchain.")
    parser.add_argument("--version", action="version", version=f"synthpose {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    scenario = sub.add_parser("scenario", help="scenario spec generation")
    scenario_sub = scenario.add_subparsers(dest="scenario_command", required=True)
    gen = scenario_sub.add_parser("gen", help="sample randomized scenario specs")
    gen.add_argument("--count", type=int, default=10)
    gen.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    gen.add_argument("--out", required=True, help="output spec file (one JSON per line)")
    gen.add_argument("--config", default=None)

    synth = sub.add_parser("synth", help="synthesize labeled sequences from specs")
    synth.add_argument("--specs", required=True)
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--config", default=None)
    synth.add_argument("--noise-sigma", type=float, default=0.0,
                       help="optional Gaussian keypoint noise, meters")

    analyse = sub.add_parser("analyse", help="quality-gate sequences")
    analyse.add_argument("--input", required=True, help="sequence file or directory")
    analyse.add_argument("--config", default=None)
    analyse.add_argument("--out", default=None, help="optional report JSON")

    fit = sub.add_parser("fit", help="annotate sequences with body parameters")
    fit.add_argument("--input", required=True, help="sequence file or directory")
    fit.add_argument("--out", required=True, help="output directory")
    fit.add_argument("--config", default=None)

    pipeline = sub.add_parser("pipeline", help="distributed toolchain")
    pipeline_sub = pipeline.add_subparsers(dest="pipeline_command", required=True)
    run = pipeline_sub.add_parser("run", help="run generation + analysis + annotation")
    run.add_argument("--sequences", type=int, default=None)
    run.add_argument("--gen-workers", type=int, default=None)
    run.add_argument("--fit-workers", type=int, default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", required=True)
    run.add_argument("--config", default=None)

    stats = sub.add_parser("stats", help="dataset distribution summary")
    stats.add_argument("--data", required=True, help="directory of sequence files")
    stats.add_argument("--out", default=None, help="optional export directory")

    eval_cmd = sub.add_parser("eval", help="MPJPE / PA-MPJPE between two files")
    eval_cmd.add_argument("--pred", required=True)
    eval_cmd.add_argument("--gt", required=True)
    eval_cmd.add_argument("--config", default=None)

    init = sub.add_parser("init-config", help="write a template config file")
    init.add_argument("--out", required=True)

    return parser


def _sequence_inputs(path_str: str) -> list[Path]:
    path = Path(path_str)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        if not files:
            raise FileNotFoundError(f"no sequence files in {path}")
        return files
    return [path]


def _keypoints_from_file(path: Path, config: Config) -> np.ndarray:
    doc = json.loads(path.read_text())
    kind = doc.get("format")
    if kind == "synthpose-sequence":
        return load_sequence(path).x3d
    if kind == "synthpose-annotation":
        return predicted_keypoints(load_fit_result(path), config.tree())
    raise ValueError(f"{path}: unsupported file format {kind!r}")


def cmd_scenario_gen(args) -> int:
    config = Config.load(args.config)
    seed = args.seed if args.seed is not None else config.seed
    subjects = config.subjects()
    tree = config.tree()
    actions = config.actions(tree.joint_count)
    specs = [
        generate_scenario(scenario_seed(seed, i), subjects, actions,
                          sequence_id=f"seq_{i:06d}")
        for i in range(args.count)
    ]
    save_specs(specs, args.out)
    print(f"wrote {len(specs)} scenario specs to {args.out} (seed {seed})")
    return 0


def cmd_synth(args) -> int:
    config = Config.load(args.config)
    tree = config.tree()
    scene = config.scene()
    subjects = config.subjects()
    actions = config.actions(tree.joint_count)
    camera_dist = config.camera_distribution()
    specs = load_specs(args.specs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for spec in specs:
        seq = synthesize_sequence(spec, tree, scene, subjects, actions, camera_dist)
        if args.noise_sigma > 0:
            from .engine import add_noise

            seq = add_noise(seq, args.noise_sigma, seed=spec.seed)
        save_sequence(seq, out_dir / f"{spec.sequence_id}.json")
    print(f"synthesized {len(specs)} sequences into {out_dir}")
    return 0


def cmd_analyse(args) -> int:
    config = Config.load(args.config)
    reports = {}
    for path in _sequence_inputs(args.input):
        seq = load_sequence(path)
        report = quality_gate(seq, config.thresholds)
        reports[seq.spec.sequence_id] = report.to_dict()
        verdict = "pass" if report.passed else "FAIL " + ",".join(sorted(
            r.value for r in report.reasons))
        print(f"{seq.spec.sequence_id}: {verdict} "
              f"(speed {report.mean_speed * 1000:.1f} mm/frame, "
              f"occluded {report.occluded_fraction:.0%}, "
              f"out-of-frame {report.out_of_frame_fraction:.0%})")
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"format": "synthpose-quality-report", "version": 1, "reports": reports},
            indent=1, sort_keys=True))
    return 0


def cmd_fit(args) -> int:
    config = Config.load(args.config)
    tree = config.tree()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in _sequence_inputs(args.input):
        seq = load_sequence(path)
        result = fit_sequence(seq, tree, config.fit)
        save_fit_result(result, out_dir / f"{seq.spec.sequence_id}.json", config.fit)
        print(f"{seq.spec.sequence_id}: rms {result.frame_rms.mean() * 1000:.2f} mm "
              f"({result.seconds_per_frame * 1000:.0f} ms/frame, "
              f"{'converged' if result.converged else 'iteration cap'})")
    return 0


def cmd_pipeline_run(args) -> int:
    config = Config.load(args.config)
    tree = config.tree()
    options = config.pipeline
    pipe = PipelineConfig(
        sequences=args.sequences if args.sequences is not None
        else int(options.get("sequences", 10)),
        out_dir=args.out,
        gen_workers=args.gen_workers if args.gen_workers is not None
        else int(options.get("gen_workers", 1)),
        fit_workers=args.fit_workers if args.fit_workers is not None
        else int(options.get("fit_workers", 1)),
        seed=args.seed if args.seed is not None else config.seed,
        max_attempts=int(options.get("max_attempts", 3)),
        lease_seconds=float(options.get("lease_seconds", 30.0)),
        nack_probability=float(options.get("nack_probability", 0.0)),
        thresholds=config.thresholds,
        fit=config.fit,
        tree=tree,
        scene=config.scene(),
        subjects=config.subjects(),
        actions=config.actions(tree.joint_count),
        camera_dist=config.camera_distribution(),
    )
    summary = run_pipeline(pipe)
    for status, count in sorted(summary.counts.items()):
        if count:
            print(f"{status}: {count}")
    print(f"total {summary.total} jobs in {summary.wall_seconds:.1f}s -> {summary.out_dir}")
    return 0 if summary.all_terminal else 2


def cmd_stats(args) -> int:
    stats = dataset_stats(args.data, args.out)
    print(f"sequences: {stats.sequences}, frames: {stats.frames}")
    if stats.sequences:
        rates = ", ".join(f"{k} {v:.0%}" for k, v in stats.occlusion_rates.items())
        print(f"occlusion: {rates}")
        print(f"pose spread: {stats.pose_spread * 1000:.1f} mm")
    if args.out:
        print(f"tables and plots in {args.out}")
    return 0


def cmd_eval(args) -> int:
    config = Config.load(args.config)
    pred = _keypoints_from_file(Path(args.pred), config)
    gt = _keypoints_from_file(Path(args.gt), config)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} and gt {gt.shape} do not align")
    frames = pred.shape[0]
    raw = float(np.mean([mpjpe(pred[t], gt[t]) for t in range(frames)]))
    aligned = float(np.mean([pa_mpjpe(pred[t], gt[t]) for t in range(frames)]))
    print(f"MPJPE: {raw:.3f} mm")
    print(f"PA-MPJPE: {aligned:.3f} mm")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "scenario":
            return cmd_scenario_gen(args)
        if args.command == "synth":
            return cmd_synth(args)
        if args.command == "analyse":
            return cmd_analyse(args)
        if args.command == "fit":
            return cmd_fit(args)
        if args.command == "pipeline":
            return cmd_pipeline_run(args)
        if args.command == "stats":
            return cmd_stats(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "init-config":
            write_default_config(args.out)
            print(f"wrote template config to {args.out}")
            return 0
        raise _UsageError(f"unknown command {args.command}")
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
