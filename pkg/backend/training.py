"""
Label assignment, stage losses and the two training loops.

Stage 1 trains the detector on GT-jitter proposals of the key frame.
Stage 2 trains the interaction predictor on the frozen detector's output
for every frame of the snippet; the stage-1 detections are computed once
per snippet and cached.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np
from config import Config, TrainSettings
from detector import class_index
from exceptions import NumericalError
from geometry import boxes_to_array, encode_deltas, iou, iou_matrix
from interaction import InteractionGraph
from layers import Parameter
from losses import cross_entropy, focal_loss, smooth_l1_loss
from models import AnnotatedSnippet, Detection, Quintuple
from optim import SGD, MultiStepSchedule
from pipeline import (
    SHUFFLE_STREAM,
    STAGE1_STREAM,
    STAGE2_STREAM,
    ITIDNet,
    stream_rng,
)
from tensor import Tensor, add, no_grad

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch, split, loss, mAP_IT, mAP_ITI"


# ----------------------------------------------------------------------
# Stage 1
# ----------------------------------------------------------------------


@dataclass
class Stage1Targets:
    labels: np.ndarray  # class column per proposal, 0 = background
    deltas: np.ndarray  # N_p×4, zero rows for background
    matched: np.ndarray  # GT index per proposal, -1 for background

    @property
    def positives(self) -> np.ndarray:
        return self.labels > 0


def assign_stage1_targets(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: Sequence[int],
    threshold: float = 0.5,
) -> Stage1Targets:
    """
    Match each proposal to its highest-IoU ground truth.

    A proposal is positive when that IoU is at least ``threshold``; it then
    takes the GT's class column and the deltas onto the GT box.
    """
    boxes = boxes_to_array(proposals)
    gt = boxes_to_array(gt_boxes)
    count = len(boxes)
    labels = np.zeros(count, dtype=int)
    deltas = np.zeros((count, 4))
    matched = np.full(count, -1, dtype=int)
    if len(gt) == 0 or count == 0:
        return Stage1Targets(labels, deltas, matched)

    overlaps = iou_matrix(boxes, gt)
    best = np.argmax(overlaps, axis=1)
    positive = overlaps[np.arange(count), best] >= threshold
    matched[positive] = best[positive]
    labels[positive] = np.asarray(gt_labels, dtype=int)[best[positive]]
    if positive.any():
        deltas[positive] = encode_deltas(boxes[positive], gt[best[positive]])
    return Stage1Targets(labels, deltas, matched)


def stage1_loss(
    class_logits: Tensor,
    box_deltas: Tensor,
    targets: Stage1Targets,
    beta: float = 1.0,
) -> Tensor:
    """
    Cross-entropy over [background, classes] plus smooth-L1 on the
    class-specific deltas of positive proposals, normalized by N_p.
    """
    count = class_logits.shape[0]
    classification = cross_entropy(class_logits, targets.labels)

    mask = np.zeros(box_deltas.shape)
    target = np.zeros(box_deltas.shape)
    for row in np.flatnonzero(targets.positives):
        columns = slice(4 * (targets.labels[row] - 1), 4 * targets.labels[row])
        mask[row, columns] = 1.0
        target[row, columns] = targets.deltas[row]
    regression = smooth_l1_loss(box_deltas * mask, target, float(count), beta)
    return classification + regression


# ----------------------------------------------------------------------
# Stage 2
# ----------------------------------------------------------------------


def assign_stage2_targets(
    instrument: Detection,
    tissue: Detection,
    quintuples: Sequence[Quintuple],
    num_actions: int,
    threshold: float = 0.5,
) -> np.ndarray:
    """
    Multi-hot action target for one predicted pair.

    Every GT quintuple with the pair's categories and min(IoU_i, IoU_t) at
    least ``threshold`` sets its action bit; no match gives a negative pair.
    """
    target = np.zeros(num_actions)
    for quintuple in quintuples:
        if (
            quintuple.instrument_category != instrument.category
            or quintuple.tissue_category != tissue.category
            or quintuple.action >= num_actions
        ):
            continue
        overlap = min(
            iou(instrument.box, quintuple.instrument_box), iou(tissue.box, quintuple.tissue_box)
        )
        if overlap >= threshold:
            target[quintuple.action] = 1.0
    return target


def pair_targets(
    instruments: Sequence[Detection],
    tissues: Sequence[Detection],
    quintuples: Sequence[Quintuple],
    num_actions: int,
    threshold: float = 0.5,
) -> np.ndarray:
    """N_i×N_t×A targets in the predictor's pair order"""
    targets = np.zeros((len(instruments), len(tissues), num_actions))
    for i, instrument in enumerate(instruments):
        for t, tissue in enumerate(tissues):
            targets[i, t] = assign_stage2_targets(
                instrument, tissue, quintuples, num_actions, threshold
            )
    return targets


def stage2_loss(
    action_probs: Tensor,
    targets: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    return focal_loss(action_probs, targets, alpha, gamma)


def temporal_weight_loss(graph: InteractionGraph) -> Tensor | None:
    """
    Mean cross-entropy of the TW weights against the candidate that
    overlaps the key node most; None when no link had several candidates.
    """
    terms = []
    for link in graph.links:
        if link.weights is None:
            continue
        key_box = graph.key_nodes[link.key_position].detection.box
        frame = graph.frames[link.frame_position]
        overlaps = [iou(key_box, frame[c].detection.box) for c in link.candidates]
        terms.append(cross_entropy(link.weights, np.array([int(np.argmax(overlaps))])))
    if not terms:
        return None
    return reduce(add, terms) * (1.0 / len(terms))


# ----------------------------------------------------------------------
# Loops
# ----------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    map_it: float | None = None
    map_iti: float | None = None

    def line(self) -> str:
        def metric(value: float | None) -> str:
            return "-" if value is None else f"{value:.4f}"

        return (
            f"{self.epoch}, {self.split}, {self.loss:.6f}, "
            f"{metric(self.map_it)}, {metric(self.map_iti)}"
        )


@dataclass
class TrainingResult:
    stage: int
    steps: int = 0
    records: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)

    def epoch_losses(self, split: str = "train") -> list[float]:
        return [record.loss for record in self.records if record.split == split]


StepFn = Callable[[AnnotatedSnippet, int], Tensor | None]


class Trainer:
    """
    Runs both training stages of an ITIDNet.

    One snippet is one step. Every random draw comes from a stream keyed
    by (seed, purpose, epoch, snippet), so two runs with the same config
    produce the same parameters bit for bit.
    """

    def __init__(
        self, model: ITIDNet, config: Config, metrics_path: str | Path | None = None
    ) -> None:
        self.model = model
        self.config = config
        self.metrics_path = Path(metrics_path) if metrics_path is not None else None
        self._stage1_cache: dict[str, list[list[Detection]]] = {}

    # -- stage 1 -------------------------------------------------------

    def stage1_step(self, snippet: AnnotatedSnippet, epoch: int) -> Tensor:
        prepared, _ = self.model.prepare(snippet)
        detector = self.model.detector
        proposals = self.model.proposals(prepared, STAGE1_STREAM, epoch)
        output = detector(list(prepared.frames), proposals)

        key = prepared.key_annotation
        gt_boxes = np.array([inst.box.as_list() for inst in key.instances])
        gt_labels = [
            class_index(inst.role, inst.category, detector.num_instrument_classes)
            for inst in key.instances
        ]
        targets = assign_stage1_targets(
            proposals[-1].boxes, gt_boxes, gt_labels, self.config.stage1.iou_assign_threshold
        )
        return stage1_loss(
            output.class_logits,
            output.box_deltas,
            targets,
            self.config.detector.smooth_l1_beta,
        )

    def train_stage1(
        self,
        train: Sequence[AnnotatedSnippet],
        val: Sequence[AnnotatedSnippet] = (),
    ) -> TrainingResult:
        params = self.model.detector.named_parameters()
        return self._fit(1, self.config.stage1, params, train, val, self.stage1_step)

    # -- stage 2 -------------------------------------------------------

    def cached_detections(self, snippet: AnnotatedSnippet) -> list[list[Detection]]:
        """Frozen stage-1 detections for every frame of a prepared snippet"""
        cached = self._stage1_cache.get(snippet.snippet_id)
        if cached is None:
            proposals = self.model.proposals(snippet, STAGE2_STREAM)
            with no_grad():
                feature_maps = self.model.detector.feature_maps(list(snippet.frames))
                cached = self.model.frame_detections(snippet, proposals, feature_maps)
            self._stage1_cache[snippet.snippet_id] = cached
        return cached

    def stage2_step(self, snippet: AnnotatedSnippet, epoch: int) -> Tensor | None:
        prepared, _ = self.model.prepare(snippet)
        settings = self.config.stage2
        detections = self.cached_detections(prepared)
        frames = list(prepared.frames)
        if self.config.interaction.freeze_backbone:
            with no_grad():
                feature_maps = self.model.detector.feature_maps(frames)
        else:
            feature_maps = self.model.detector.feature_maps(frames)

        output = self.model.predictor(
            feature_maps, detections, self.model.detector.stride, prepared.frame_size
        )
        if output.action_probs is None:
            logger.debug("Snippet %s: no instrument/tissue pair to train on", snippet.snippet_id)
            return None
        targets = pair_targets(
            output.instruments,
            output.tissues,
            prepared.key_annotation.quintuples,
            self.model.predictor.num_actions,
            settings.iou_assign_threshold,
        )
        loss = stage2_loss(output.action_probs, targets, settings.focal_alpha, settings.focal_gamma)
        tw_term = temporal_weight_loss(output.graph)
        if tw_term is not None and settings.tw_loss_weight > 0:
            loss = loss + tw_term * settings.tw_loss_weight
        return loss

    def train_stage2(
        self,
        train: Sequence[AnnotatedSnippet],
        val: Sequence[AnnotatedSnippet] = (),
    ) -> TrainingResult:
        params = dict(self.model.predictor.named_parameters())
        if not self.config.interaction.freeze_backbone:
            backbone = self.model.detector.backbone.named_parameters("detector.backbone.")
            params.update(backbone)
        return self._fit(2, self.config.stage2, params, train, val, self.stage2_step)

    # -- shared loop -----------------------------------------------------

    def _fit(
        self,
        stage: int,
        settings: TrainSettings,
        params: dict[str, Parameter],
        train: Sequence[AnnotatedSnippet],
        val: Sequence[AnnotatedSnippet],
        step_fn: StepFn,
    ) -> TrainingResult:
        schedule = MultiStepSchedule(settings.learning_rate, settings.milestones, settings.gamma)
        optimizer = SGD(params, settings.learning_rate, settings.momentum, settings.weight_decay)
        result = TrainingResult(stage)
        self._log_line(f"# stage {stage}")

        for epoch in range(1, settings.epochs + 1):
            if settings.max_steps and result.steps >= settings.max_steps:
                break
            optimizer.set_learning_rate(schedule.lr_for_epoch(epoch))
            order = stream_rng(self.config.seed, SHUFFLE_STREAM, stage, epoch).permutation(
                len(train)
            )
            losses = []
            for position in order:
                if settings.max_steps and result.steps >= settings.max_steps:
                    break
                snippet = train[int(position)]
                value = self._train_step(optimizer, step_fn, snippet, stage, epoch, result.steps)
                if value is None:
                    continue
                losses.append(value)
                result.step_losses.append(value)
                result.steps += 1

            record = EpochRecord(epoch, "train", float(np.mean(losses)) if losses else 0.0)
            self._record(result, record, optimizer.learning_rate)
            if settings.validate and val:
                self._record(result, self._validate(epoch, val, step_fn), optimizer.learning_rate)
        return result

    def _train_step(
        self,
        optimizer: SGD,
        step_fn: StepFn,
        snippet: AnnotatedSnippet,
        stage: int,
        epoch: int,
        step: int,
    ) -> float | None:
        optimizer.zero_grad()
        try:
            loss = step_fn(snippet, epoch)
            if loss is None:
                return None
            value = loss.item()
            if not math.isfinite(value):
                msg = f"loss is {value}"
                raise NumericalError(msg)
            loss.backward()
        except NumericalError as e:
            msg = f"stage {stage}, epoch {epoch}, step {step} (snippet {snippet.snippet_id}): {e}"
            raise NumericalError(msg) from e
        optimizer.step()
        return value

    def _validate(
        self, epoch: int, val: Sequence[AnnotatedSnippet], step_fn: StepFn
    ) -> EpochRecord:
        with no_grad():
            losses = [loss.item() for loss in (step_fn(s, epoch) for s in val) if loss is not None]
        _, report = self.model.evaluate(val)
        return EpochRecord(
            epoch,
            "val",
            float(np.mean(losses)) if losses else 0.0,
            report.map_it,
            report.map_iti,
        )

    def _record(self, result: TrainingResult, record: EpochRecord, learning_rate: float) -> None:
        result.records.append(record)
        logger.info("stage %d: %s (lr=%g)", result.stage, record.line(), learning_rate)
        self._log_line(record.line())

    def _log_line(self, line: str) -> None:
        if self.metrics_path is None:
            return
        self.metrics_path.parent.mkdir(parents=True, exist_ok=True)
        new_file = not self.metrics_path.exists()
        with open(self.metrics_path, "a", encoding="utf-8") as file:
            if new_file:
                file.write(f"# {METRICS_HEADER}\n")
            file.write(f"{line}\n")
