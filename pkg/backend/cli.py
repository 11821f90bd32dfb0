"""
Batch command line: simulate, train, eval, gradcheck, experiment.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure (including a failed gradient check), 3 I/O error.
"""

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from datetime import UTC, datetime
from pathlib import Path
from typing import NoReturn

from annotations import read_predictions, write_predictions
from config import ABLATIONS, LOG_LEVEL_ENV_VAR, Config, apply_ablation, load_config
from evaluation import (
    ClipwiseResult,
    clipwise_scores,
    evaluate,
    format_report,
    report_json_lines,
    wilcoxon_signed_rank,
)
from exceptions import (
    AnnotationFormatError,
    CheckpointError,
    ITIDError,
    NumericalError,
    UsageError,
)
from experiments import (
    EXPERIMENT_KINDS,
    format_summary,
    run_ablation,
    run_frame_sweep,
    summarize,
)
from gradcheck import DEFAULT_TOLERANCE, default_manager
from models import AnnotatedSnippet, FrameAnnotation, RunManifest
from pipeline import ITIDNet
from simdata import CONFIG_FILE, SPLITS, SnippetDataset, dataset_hash, load_dataset, write_dataset
from training import Trainer

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

RUN_MANIFEST_FILE = "run_manifest.json"
METRICS_FILE = "metrics.log"
PREDICTIONS_FILE = "predictions.txt"
REPORT_FILE = "report.txt"
REPORT_JSONL_FILE = "report.jsonl"
CLIPWISE_FILE = "clipwise.txt"
COMPARISON_FILE = "comparison.json"
EXPERIMENT_RESULTS_FILE = "results.jsonl"
EXPERIMENT_SUMMARY_FILE = "summary.txt"


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so exit codes stay ours"""

    def error(self, message: str) -> NoReturn:
        raise UsageError(message)


def create_parser() -> argparse.ArgumentParser:
    """Build the parser for every subcommand"""
    parser = _Parser(prog="itid", description="Instrument-tissue interaction detection")
    parser.add_argument("--log-level", default=None, help="overrides ITID_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="generate a synthetic dataset")
    simulate.add_argument("--config", type=Path)
    simulate.add_argument("--out", type=Path, required=True)
    simulate.add_argument("--count", type=int, default=250)
    simulate.add_argument("--force", action="store_true", help="write into a non-empty --out")

    train = commands.add_parser("train", help="train stage 1 or stage 2")
    train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    train.add_argument("--config", type=Path, help="defaults to the dataset's config.ini")
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--stage1-ckpt", type=Path)
    train.add_argument("--ablate", choices=sorted(ABLATIONS))
    train.add_argument("--r", type=int, help="reference frames per snippet")
    train.add_argument("--epochs", type=int)
    train.add_argument("--max-steps", type=int)
    train.add_argument("--train-split", choices=(*SPLITS, "all"), default="train")
    train.add_argument("--force", action="store_true")

    evaluate_cmd = commands.add_parser("eval", help="score checkpoints or a predictions file")
    evaluate_cmd.add_argument("--config", type=Path)
    evaluate_cmd.add_argument("--data", type=Path, required=True)
    evaluate_cmd.add_argument("--out", type=Path, required=True)
    evaluate_cmd.add_argument("--stage1-ckpt", type=Path)
    evaluate_cmd.add_argument("--stage2-ckpt", type=Path)
    evaluate_cmd.add_argument("--predictions", type=Path, help="evaluate this file instead")
    evaluate_cmd.add_argument("--compare", type=Path, help="second predictions file to test against")
    evaluate_cmd.add_argument("--ablate", choices=sorted(ABLATIONS))
    evaluate_cmd.add_argument("--r", type=int)
    evaluate_cmd.add_argument("--split", choices=(*SPLITS, "all"), default="test")
    evaluate_cmd.add_argument("--json-lines", action="store_true")
    evaluate_cmd.add_argument("--force", action="store_true")

    gradcheck = commands.add_parser("gradcheck", help="finite-difference gradient suites")
    gradcheck.add_argument("--module", default="all", choices=("all", *default_manager().names()))
    gradcheck.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    experiment = commands.add_parser("experiment", help="ablation grid or reference-frame sweep")
    experiment.add_argument("--kind", choices=EXPERIMENT_KINDS, required=True)
    experiment.add_argument("--config", type=Path)
    experiment.add_argument("--data", type=Path, required=True)
    experiment.add_argument("--out", type=Path, required=True)
    experiment.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    experiment.add_argument("--force", action="store_true")
    return parser


def configure_logging(level: str | None) -> None:
    name = (level or os.getenv(LOG_LEVEL_ENV_VAR) or "INFO").upper()
    if not isinstance(logging.getLevelName(name), int):
        msg = f"unknown log level '{name}'"
        raise UsageError(msg)
    logging.basicConfig(
        level=name, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True
    )


# ----------------------------------------------------------------------
# Shared plumbing
# ----------------------------------------------------------------------


def prepare_output(out: Path, force: bool) -> None:
    """Create ``out``; refuse a non-empty directory unless forced"""
    if out.exists() and any(out.iterdir()) and not force:
        msg = f"output directory {out} is not empty (use --force to write into it)"
        raise UsageError(msg)
    out.mkdir(parents=True, exist_ok=True)


def resolve_config(args: argparse.Namespace) -> tuple[Config, Path | None]:
    """--config, else the dataset's saved config, with --ablate and --r applied"""
    path = getattr(args, "config", None)
    data = getattr(args, "data", None)
    if path is None and data is not None and (data / CONFIG_FILE).exists():
        path = data / CONFIG_FILE
    config = load_config(path)
    if getattr(args, "ablate", None):
        config = apply_ablation(config, args.ablate)
    if getattr(args, "r", None) is not None:
        config = config.with_overrides(scenario={"reference_frames": args.r})
        config.validate()
    return config, path


def start_manifest(
    args: argparse.Namespace, config: Config, config_path: Path | None
) -> RunManifest:
    arguments = {
        key: str(value) if isinstance(value, Path) else value
        for key, value in vars(args).items()
    }
    manifest = RunManifest(
        command=args.command,
        config_path=None if config_path is None else str(config_path),
        seed=config.seed,
        config_hash=config.content_hash(),
        output_dir=str(args.out),
        started_at=datetime.now(UTC),
        arguments=arguments,
    )
    _write_manifest(args.out, manifest)
    (args.out / CONFIG_FILE).write_text(config.to_ini(), encoding="utf-8")
    return manifest


def finish_manifest(out: Path, manifest: RunManifest) -> None:
    manifest.finished_at = datetime.now(UTC)
    _write_manifest(out, manifest)


def _write_manifest(out: Path, manifest: RunManifest) -> None:
    (out / RUN_MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")


def load_split(args: argparse.Namespace, config: Config, split: str) -> tuple[SnippetDataset, list[AnnotatedSnippet]]:
    dataset = load_dataset(args.data)
    if config.reference_frames > dataset.manifest.reference_frames:
        msg = (
            f"r={config.reference_frames} exceeds the dataset's "
            f"r={dataset.manifest.reference_frames}"
        )
        raise UsageError(msg)
    snippets = dataset.snippets if split == "all" else dataset.split(split)
    return dataset, snippets


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.count <= 0:
        msg = "--count must be positive"
        raise UsageError(msg)
    config, config_path = resolve_config(args)
    prepare_output(args.out, args.force)
    manifest = start_manifest(args, config, config_path)

    dataset = write_dataset(config, args.out, args.count)
    per_split = {name: 0 for name in SPLITS}
    for record in dataset.snippets:
        per_split[record.split] += 1
    interactions = sum(record.interactions for record in dataset.snippets)
    empty = sum(1 for record in dataset.snippets if record.interactions == 0)
    clamped = sum(1 for record in dataset.snippets if record.clamped)
    print(f"snippets: {len(dataset.snippets)} ({', '.join(f'{k}={v}' for k, v in per_split.items())})")
    print(f"interactions: {interactions}, non-interaction key frames: {empty}, clamped: {clamped}")
    print(f"dataset hash: {dataset_hash(args.out)}")
    finish_manifest(args.out, manifest)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    if args.stage == 2 and args.stage1_ckpt is None:
        msg = "stage 2 training requires --stage1-ckpt"
        raise UsageError(msg)
    config, config_path = resolve_config(args)
    section = "stage1" if args.stage == 1 else "stage2"
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if overrides:
        config = config.with_overrides(**{section: overrides})
        config.validate()
    settings = getattr(config, section)

    prepare_output(args.out, args.force)
    manifest = start_manifest(args, config, config_path)
    dataset, train = load_split(args, config, args.train_split)
    if not train:
        msg = f"split '{args.train_split}' has no snippets"
        raise UsageError(msg)
    val = dataset.split("val") if args.train_split == "train" else []

    milestones = ",".join(str(m) for m in settings.milestones) or "-"
    print(
        f"stage {args.stage}: lr={settings.learning_rate:g} epochs={settings.epochs} "
        f"milestones={milestones} r={config.reference_frames} snippets={len(train)}"
    )
    metrics_path = args.out / METRICS_FILE
    metrics_path.unlink(missing_ok=True)
    model = ITIDNet(config, dataset.prior)
    trainer = Trainer(model, config, metrics_path)
    if args.stage == 1:
        result = trainer.train_stage1(train, val)
        bin_path, _ = model.save_stage1(args.out / "stage1")
    else:
        model.load_stage1(args.stage1_ckpt)
        result = trainer.train_stage2(train, val)
        bin_path, _ = model.save_stage2(args.out / "stage2")
    final = result.epoch_losses()[-1] if result.epoch_losses() else 0.0
    print(f"steps: {result.steps}, final epoch loss: {final:.6f}, checkpoint: {bin_path}")
    finish_manifest(args.out, manifest)
    return EXIT_OK


def _write_clipwise(path: Path, clips: ClipwiseResult) -> None:
    lines = ["# video clip mAP_ITI num_gt"]
    lines.extend(
        f"{clip.video_id} {clip.clip_index} {clip.map_iti:.6f} {clip.num_gt}" for clip in clips.scores
    )
    lines.extend(f"# skipped {video} {clip}" for video, clip in clips.skipped)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(args: argparse.Namespace) -> int:
    config, config_path = resolve_config(args)
    prepare_output(args.out, args.force)
    manifest = start_manifest(args, config, config_path)
    dataset, snippets = load_split(args, config, args.split)
    ground_truth: list[FrameAnnotation] = dataset.frame_annotations(snippets)

    if args.predictions is not None:
        wanted = {frame.key for frame in ground_truth}
        predictions = [p for p in read_predictions(args.predictions) if p.key in wanted]
    else:
        if args.stage1_ckpt is None or args.stage2_ckpt is None:
            msg = "eval needs --stage1-ckpt and --stage2-ckpt, or --predictions"
            raise UsageError(msg)
        model = ITIDNet(config, dataset.prior)
        model.load_stage1(args.stage1_ckpt)
        model.load_stage2(args.stage2_ckpt)
        predictions = model.predict_all(snippets)
    write_predictions(predictions, args.out / PREDICTIONS_FILE)

    iou_threshold = config.evaluation.iou_threshold
    report = evaluate(predictions, ground_truth, iou_threshold)
    (args.out / REPORT_FILE).write_text(format_report(report), encoding="utf-8")
    clips = clipwise_scores(predictions, ground_truth, config.evaluation.clip_len, iou_threshold)
    _write_clipwise(args.out / CLIPWISE_FILE, clips)

    if args.json_lines:
        lines = report_json_lines(report)
        (args.out / REPORT_JSONL_FILE).write_text(lines, encoding="utf-8")
        sys.stdout.write(lines)
    else:
        sys.stdout.write(format_report(report))

    if args.compare is not None:
        wanted = {frame.key for frame in ground_truth}
        other = [p for p in read_predictions(args.compare) if p.key in wanted]
        other_clips = clipwise_scores(other, ground_truth, config.evaluation.clip_len, iou_threshold)
        paired = {(c.video_id, c.clip_index): c.map_iti for c in other_clips.scores}
        ours = [c for c in clips.scores if (c.video_id, c.clip_index) in paired]
        first = [c.map_iti for c in ours]
        second = [paired[(c.video_id, c.clip_index)] for c in ours]
        test = wilcoxon_signed_rank(first, second)
        comparison = {
            "wilcoxon": test.model_dump(),
            "pairs": [
                {"video_id": c.video_id, "clip": c.clip_index, "first": a, "second": b}
                for c, a, b in zip(ours, first, second, strict=True)
            ],
        }
        (args.out / COMPARISON_FILE).write_text(json.dumps(comparison, indent=2), encoding="utf-8")
        print(
            f"wilcoxon: n={test.n} W+={test.w_plus:g} W-={test.w_minus:g} "
            f"p={test.p_value:.4g}{' (all differences zero)' if test.degenerate else ''}"
        )
    finish_manifest(args.out, manifest)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = default_manager().run(args.module, tolerance=args.tolerance)
    sys.stdout.write(report.format_table())
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def cmd_experiment(args: argparse.Namespace) -> int:
    try:
        seeds = [int(seed) for seed in args.seeds.split(",") if seed.strip()]
    except ValueError as e:
        msg = f"--seeds must be comma-separated integers, got {args.seeds!r}"
        raise UsageError(msg) from e
    if not seeds:
        msg = "--seeds is empty"
        raise UsageError(msg)
    config, config_path = resolve_config(args)
    prepare_output(args.out, args.force)
    manifest = start_manifest(args, config, config_path)
    dataset = load_dataset(args.data)

    if args.kind == "ablation":
        results = run_ablation(config, dataset, seeds)
    else:
        results = run_frame_sweep(config, dataset, seeds)
    (args.out / EXPERIMENT_RESULTS_FILE).write_text(
        "".join(f"{result.model_dump_json()}\n" for result in results), encoding="utf-8"
    )
    summary = format_summary(summarize(results))
    (args.out / EXPERIMENT_SUMMARY_FILE).write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    finish_manifest(args.out, manifest)
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "experiment": cmd_experiment,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Parse, dispatch, and map failures onto exit codes"""
    try:
        args = create_parser().parse_args(argv)
        configure_logging(args.log_level)
        return COMMANDS[args.command](args)
    except NumericalError as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL
    except (OSError, AnnotationFormatError, CheckpointError) as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except (ITIDError, ValueError) as e:
        logger.error("%s", e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
