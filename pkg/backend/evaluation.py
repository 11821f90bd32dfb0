"""
Detection and interaction mAP, clip-wise scores and the signed-rank test.

A prediction is a true positive when its class is right and its overlap
with a not-yet-matched ground truth of the same frame is strictly above
the IoU threshold. For quintuples the overlap is min(IoU_instrument,
IoU_tissue), so both boxes must pass.
"""

import logging
from collections import defaultdict
from collections.abc import Callable, Hashable, Sequence
from dataclasses import dataclass, field
from typing import Any, TypeVar

import numpy as np
from geometry import iou
from models import (
    BoundingBox,
    FrameAnnotation,
    FramePredictions,
    Quintuple,
)
from pydantic import BaseModel
from scipy import stats

logger = logging.getLogger(__name__)

Item = TypeVar("Item")
FrameKey = tuple[str, int]


@dataclass
class MatchResult:
    """Greedy matching outcome for one class, predictions by descending score"""

    scores: list[float]
    true_positive: list[bool]
    matched_gt: list[tuple[FrameKey, int] | None]
    num_gt: int

    @classmethod
    def empty(cls, num_gt: int) -> "MatchResult":
        return cls(scores=[], true_positive=[], matched_gt=[], num_gt=num_gt)

    @classmethod
    def from_matching(
        cls,
        predictions: Sequence[tuple[FrameKey, float, Item]],
        ground_truth: dict[FrameKey, list[Item]],
        overlap: Callable[[Item, Item], float],
        threshold: float,
    ) -> "MatchResult":
        num_gt = sum(len(items) for items in ground_truth.values())
        result = cls.empty(num_gt)
        order = sorted(range(len(predictions)), key=lambda i: -predictions[i][1])
        taken: set[tuple[FrameKey, int]] = set()
        for idx in order:
            frame, score, item = predictions[idx]
            best, best_overlap = None, threshold
            for gt_idx, gt_item in enumerate(ground_truth.get(frame, [])):
                if (frame, gt_idx) in taken:
                    continue
                value = overlap(item, gt_item)
                if value > best_overlap:
                    best, best_overlap = gt_idx, value
            result.scores.append(score)
            result.true_positive.append(best is not None)
            result.matched_gt.append(None if best is None else (frame, best))
            if best is not None:
                taken.add((frame, best))
        return result

    def precision_recall(self) -> tuple[np.ndarray, np.ndarray]:
        tp = np.cumsum(np.asarray(self.true_positive, dtype=float))
        fp = np.cumsum(1.0 - np.asarray(self.true_positive, dtype=float))
        recall = tp / max(self.num_gt, 1)
        precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
        return precision, recall

    def average_precision(self) -> float:
        if self.num_gt == 0 or not self.scores:
            return 0.0
        precision, recall = self.precision_recall()
        return interpolated_ap(recall, precision)


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolation: area under the monotone precision envelope"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def ap_single_class(
    predictions: Sequence[tuple[FrameKey, float, Item]],
    ground_truth: dict[FrameKey, list[Item]],
    overlap: Callable[[Item, Item], float],
    threshold: float = 0.5,
) -> float | None:
    """AP for one class; None when the class has no ground truth"""
    if sum(len(items) for items in ground_truth.values()) == 0:
        return None
    return MatchResult.from_matching(predictions, ground_truth, overlap, threshold).average_precision()


def quintuple_overlap(a: Quintuple, b: Quintuple) -> float:
    return min(iou(a.instrument_box, b.instrument_box), iou(a.tissue_box, b.tissue_box))


class ClassAP(BaseModel):
    metric: str  # IT or ITI
    label: str
    ap: float | None  # None: no ground truth, left out of the mean
    num_gt: int
    num_predictions: int


class EvaluationReport(BaseModel):
    map_it: float
    map_iti: float
    classes: list[ClassAP] = []

    def summary(self) -> str:
        return f"mAP_IT={self.map_it:.4f}, mAP_ITI={self.map_iti:.4f}"


def _mean_ap(classes: Sequence[ClassAP], metric: str) -> float:
    scored = [c.ap for c in classes if c.ap is not None]
    if not scored:
        logger.warning("No %s classes with ground truth; reporting 0", metric)
        return 0.0
    return float(np.mean(scored))


def _per_class(
    metric: str,
    predictions: dict[Hashable, list[tuple[FrameKey, float, Any]]],
    ground_truth: dict[Hashable, dict[FrameKey, list[Any]]],
    overlap: Callable[[Any, Any], float],
    threshold: float,
    label: Callable[[Any], str],
) -> list[ClassAP]:
    classes = []
    for key in sorted(set(predictions) | set(ground_truth)):
        gts = ground_truth.get(key, {})
        preds = predictions.get(key, [])
        num_gt = sum(len(items) for items in gts.values())
        if num_gt == 0:
            logger.info("%s class %s has predictions but no ground truth; skipped", metric, label(key))
        classes.append(
            ClassAP(
                metric=metric,
                label=label(key),
                ap=ap_single_class(preds, gts, overlap, threshold),
                num_gt=num_gt,
                num_predictions=len(preds),
            )
        )
    return classes


def detection_classes(
    predictions: Sequence[FramePredictions],
    ground_truth: Sequence[FrameAnnotation],
    iou_threshold: float = 0.5,
) -> list[ClassAP]:
    preds: dict[Hashable, list[tuple[FrameKey, float, BoundingBox]]] = defaultdict(list)
    for frame in predictions:
        for det in frame.detections:
            preds[(det.role.value, det.category)].append((frame.key, det.score, det.box))
    gts: dict[Hashable, dict[FrameKey, list[BoundingBox]]] = defaultdict(lambda: defaultdict(list))
    for annotation in ground_truth:
        for inst in annotation.instances:
            gts[(inst.role.value, inst.category)][annotation.key].append(inst.box)
    return _per_class(
        "IT", preds, gts, iou, iou_threshold, lambda key: f"{key[0]}:{key[1]}"
    )


def interaction_classes(
    predictions: Sequence[FramePredictions],
    ground_truth: Sequence[FrameAnnotation],
    iou_threshold: float = 0.5,
) -> list[ClassAP]:
    preds: dict[Hashable, list[tuple[FrameKey, float, Quintuple]]] = defaultdict(list)
    for frame in predictions:
        for q in frame.quintuples:
            preds[q.class_key].append((frame.key, q.score, q))
    gts: dict[Hashable, dict[FrameKey, list[Quintuple]]] = defaultdict(lambda: defaultdict(list))
    for annotation in ground_truth:
        for q in annotation.quintuples:
            gts[q.class_key][annotation.key].append(q)
    return _per_class(
        "ITI",
        preds,
        gts,
        quintuple_overlap,
        iou_threshold,
        lambda key: "-".join(str(part) for part in key),
    )


def map_it(
    predictions: Sequence[FramePredictions],
    ground_truth: Sequence[FrameAnnotation],
    iou_threshold: float = 0.5,
) -> float:
    """Mean AP over instrument and tissue categories present in the ground truth"""
    return _mean_ap(detection_classes(predictions, ground_truth, iou_threshold), "IT")


def map_iti(
    predictions: Sequence[FramePredictions],
    ground_truth: Sequence[FrameAnnotation],
    iou_threshold: float = 0.5,
) -> float:
    """Mean AP over (instrument, tissue, action) triples present in the ground truth"""
    return _mean_ap(interaction_classes(predictions, ground_truth, iou_threshold), "ITI")


def evaluate(
    predictions: Sequence[FramePredictions],
    ground_truth: Sequence[FrameAnnotation],
    iou_threshold: float = 0.5,
) -> EvaluationReport:
    it_classes = detection_classes(predictions, ground_truth, iou_threshold)
    iti_classes = interaction_classes(predictions, ground_truth, iou_threshold)
    return EvaluationReport(
        map_it=_mean_ap(it_classes, "IT"),
        map_iti=_mean_ap(iti_classes, "ITI"),
        classes=it_classes + iti_classes,
    )


def format_report(report: EvaluationReport) -> str:
    """Per-class AP table followed by the summary line"""
    lines = [f"{'metric':<6} {'class':<16} {'AP':>8} {'gt':>6} {'pred':>6}"]
    for entry in report.classes:
        ap = "skipped" if entry.ap is None else f"{entry.ap:.4f}"
        lines.append(
            f"{entry.metric:<6} {entry.label:<16} {ap:>8} {entry.num_gt:>6} {entry.num_predictions:>6}"
        )
    lines.append(report.summary())
    return "\n".join(lines) + "\n"


def report_json_lines(report: EvaluationReport) -> str:
    """One JSON record per class"""
    return "".join(f"{entry.model_dump_json()}\n" for entry in report.classes)


# ----------------------------------------------------------------------
# Clip-wise scores and significance
# ----------------------------------------------------------------------


class ClipScore(BaseModel):
    video_id: str
    clip_index: int
    map_iti: float
    num_gt: int


@dataclass
class ClipwiseResult:
    scores: list[ClipScore] = field(default_factory=list)
    skipped: list[tuple[str, int]] = field(default_factory=list)  # clips without interactions

    def values(self) -> list[float]:
        return [clip.map_iti for clip in self.scores]


def clip_of(frame_index: int, clip_len: int) -> int:
    return frame_index // clip_len


def clipwise_scores(
    predictions: Sequence[FramePredictions],
    ground_truth: Sequence[FrameAnnotation],
    clip_len: int = 300,
    iou_threshold: float = 0.5,
) -> ClipwiseResult:
    """mAP_ITI per (video, clip of ``clip_len`` frames), in video/clip order"""
    gt_clips: dict[tuple[str, int], list[FrameAnnotation]] = defaultdict(list)
    for annotation in ground_truth:
        gt_clips[(annotation.video_id, clip_of(annotation.frame_index, clip_len))].append(annotation)
    pred_clips: dict[tuple[str, int], list[FramePredictions]] = defaultdict(list)
    for frame in predictions:
        pred_clips[(frame.video_id, clip_of(frame.frame_index, clip_len))].append(frame)

    result = ClipwiseResult()
    for clip in sorted(gt_clips):
        annotations = gt_clips[clip]
        num_gt = sum(len(a.quintuples) for a in annotations)
        if num_gt == 0:
            result.skipped.append(clip)
            continue
        score = map_iti(pred_clips.get(clip, []), annotations, iou_threshold)
        result.scores.append(
            ClipScore(video_id=clip[0], clip_index=clip[1], map_iti=score, num_gt=num_gt)
        )
    if result.skipped:
        logger.info("Skipped %d clips without ground-truth interactions", len(result.skipped))
    return result


class WilcoxonResult(BaseModel):
    w_plus: float
    w_minus: float
    statistic: float  # min(W+, W-)
    n: int  # pairs with a non-zero difference
    p_value: float
    degenerate: bool  # every difference is zero


def wilcoxon_signed_rank(first: Sequence[float], second: Sequence[float]) -> WilcoxonResult:
    """Paired two-sided signed-rank test; zero differences are dropped"""
    a, b = np.asarray(first, dtype=float), np.asarray(second, dtype=float)
    if a.shape != b.shape:
        msg = f"paired scores need equal lengths, got {len(a)} and {len(b)}"
        raise ValueError(msg)
    differences = a - b
    nonzero = differences[differences != 0]
    if len(nonzero) == 0:
        return WilcoxonResult(
            w_plus=0.0, w_minus=0.0, statistic=0.0, n=0, p_value=1.0, degenerate=True
        )
    ranks = stats.rankdata(np.abs(nonzero))
    w_plus = float(ranks[nonzero > 0].sum())
    w_minus = float(ranks[nonzero < 0].sum())
    p_value = float(stats.wilcoxon(a, b, zero_method="wilcox").pvalue)
    return WilcoxonResult(
        w_plus=w_plus,
        w_minus=w_minus,
        statistic=min(w_plus, w_minus),
        n=len(nonzero),
        p_value=p_value,
        degenerate=False,
    )
