"""Ablation grid and reference-frame sweep over several seeds."""

import logging
import time
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from config import Config, apply_ablation
from evaluation import evaluate
from exceptions import ConfigError
from pipeline import ITIDNet
from pydantic import BaseModel
from simdata import SnippetDataset
from training import Trainer

logger = logging.getLogger(__name__)

ABLATION_GRID = (
    "full",
    "no-scf",
    "no-sca",
    "ca-layer",
    "no-tg",
    "intra",
    "intra-concat",
    "inter",
    "inter-concat",
)
FRAME_SWEEP = (1, 3, 5, 7)
EXPERIMENT_KINDS = ("ablation", "frames")


class VariantResult(BaseModel):
    variant: str
    seed: int
    map_it: float
    map_iti: float
    seconds_per_key_frame: float


@dataclass
class VariantSummary:
    variant: str
    runs: int
    map_it: float
    map_iti: float
    map_iti_std: float
    seconds_per_key_frame: float


def run_variant(config: Config, dataset: SnippetDataset, variant: str) -> VariantResult:
    """Train both stages on the train split and score the test split"""
    model = ITIDNet(config, dataset.prior)
    trainer = Trainer(model, config)
    train, val, test = dataset.split("train"), dataset.split("val"), dataset.split("test")
    if not train or not test:
        msg = f"dataset needs train and test snippets, got {len(train)} and {len(test)}"
        raise ConfigError(msg)
    trainer.train_stage1(train, val)
    trainer.train_stage2(train, val)

    start = time.perf_counter()
    predictions = model.predict_all(test)
    elapsed = time.perf_counter() - start
    report = evaluate(
        predictions, dataset.frame_annotations(test), config.evaluation.iou_threshold
    )
    logger.info("%s (seed %d): %s", variant, config.seed, report.summary())
    return VariantResult(
        variant=variant,
        seed=config.seed,
        map_it=report.map_it,
        map_iti=report.map_iti,
        seconds_per_key_frame=elapsed / len(test),
    )


def run_ablation(
    config: Config,
    dataset: SnippetDataset,
    seeds: Sequence[int],
    variants: Sequence[str] = ABLATION_GRID,
) -> list[VariantResult]:
    results = []
    for variant in variants:
        for seed in seeds:
            seeded = apply_ablation(config, variant).with_overrides(run={"seed": seed})
            results.append(run_variant(seeded, dataset, variant))
    return results


def run_frame_sweep(
    config: Config,
    dataset: SnippetDataset,
    seeds: Sequence[int],
    frame_counts: Sequence[int] = FRAME_SWEEP,
) -> list[VariantResult]:
    available = dataset.manifest.reference_frames
    if max(frame_counts) > available:
        msg = (
            f"frame sweep needs r={max(frame_counts)} but the dataset was generated "
            f"with r={available}; regenerate with scenario.reference_frames={max(frame_counts)}"
        )
        raise ConfigError(msg)
    results = []
    for r in frame_counts:
        for seed in seeds:
            swept = config.with_overrides(
                run={"seed": seed}, scenario={"reference_frames": r}
            )
            results.append(run_variant(swept, dataset, f"r={r}"))
    return results


def summarize(results: Sequence[VariantResult]) -> list[VariantSummary]:
    """Seed-averaged metrics per variant, in first-seen order"""
    grouped: dict[str, list[VariantResult]] = {}
    for result in results:
        grouped.setdefault(result.variant, []).append(result)
    return [
        VariantSummary(
            variant=variant,
            runs=len(runs),
            map_it=float(np.mean([r.map_it for r in runs])),
            map_iti=float(np.mean([r.map_iti for r in runs])),
            map_iti_std=float(np.std([r.map_iti for r in runs])),
            seconds_per_key_frame=float(np.mean([r.seconds_per_key_frame for r in runs])),
        )
        for variant, runs in grouped.items()
    ]


def format_summary(summaries: Sequence[VariantSummary]) -> str:
    lines = [f"{'variant':<14} {'runs':>4} {'mAP_IT':>8} {'mAP_ITI':>8} {'±':>7} {'s/frame':>9}"]
    lines.extend(
        f"{s.variant:<14} {s.runs:>4} {s.map_it:>8.4f} {s.map_iti:>8.4f} "
        f"{s.map_iti_std:>7.4f} {s.seconds_per_key_frame:>9.4f}"
        for s in summaries
    )
    return "\n".join(lines) + "\n"
