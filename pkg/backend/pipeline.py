import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from checkpoint import CheckpointInfo, load_checkpoint, save_checkpoint
from config import Config
from detector import InstanceDetector, ProposalSet, propose
from evaluation import EvaluationReport, evaluate
from interaction import InteractionOutput, InteractionPredictor, predict_interactions
from models import AnnotatedSnippet, Detection, FramePredictions, PriorTable, Quintuple
from simdata import build_prior_table, rescale_snippet, stable_hash, trim_snippet
from tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

# Independent random streams, all derived from the run seed
INIT_STREAM = 0
STAGE1_STREAM = 1
STAGE2_STREAM = 2
EVAL_STREAM = 3
SHUFFLE_STREAM = 4


def stream_rng(seed: int, stream: int, *keys: int) -> np.random.Generator:
    """Generator for one (seed, stream, keys...) tuple; identical tuples replay exactly"""
    return np.random.default_rng([seed, stream, *keys])


class ITIDNet:
    """Main orchestrator: stage-1 detector, stage-2 predictor and the prior table"""

    def __init__(self, config: Config, prior: PriorTable | None = None) -> None:
        self.config = config
        scenario = config.scenario
        rng = stream_rng(config.seed, INIT_STREAM)

        self.detector = InstanceDetector(
            config.detector,
            scenario.num_instrument_classes,
            scenario.num_tissue_classes,
            rng,
        )
        self.predictor = InteractionPredictor(
            config.interaction,
            self.detector.channels,
            config.detector.roi_size,
            scenario.num_actions,
            rng,
        )
        self.prior = prior if prior is not None else build_prior_table(scenario)

    @property
    def reference_frames(self) -> int:
        return self.config.reference_frames

    def prepare(self, snippet: AnnotatedSnippet) -> tuple[AnnotatedSnippet, float]:
        """Trim to r reference frames and rescale to the detector's input height"""
        trimmed = trim_snippet(snippet, self.reference_frames)
        return rescale_snippet(trimmed, self.config.detector.input_height)

    def proposals(
        self, snippet: AnnotatedSnippet, stream: int, *keys: int
    ) -> list[ProposalSet]:
        """One GT-jitter proposal set per frame, seeded by snippet id and ``keys``"""
        rng = stream_rng(self.config.seed, stream, stable_hash(snippet.snippet_id), *keys)
        settings = self.config.detector
        return [
            propose(
                np.array([inst.box.as_list() for inst in annotation.instances]),
                snippet.frame_size,
                settings.num_proposals,
                rng,
                settings,
            )
            for annotation in snippet.annotations
        ]

    def frame_detections(
        self,
        snippet: AnnotatedSnippet,
        proposals: Sequence[ProposalSet],
        feature_maps: Sequence[Tensor],
    ) -> list[list[Detection]]:
        """
        Stage-1 output for every frame of a prepared snippet.

        Frame j is detected with frames max(0, j - r)..j of the same
        snippet as its own reference frames.
        """
        r = self.reference_frames
        frames = list(snippet.frames)
        detections = []
        for j, annotation in enumerate(snippet.annotations):
            start = max(0, j - r)
            selected, _ = self.detector.detect(
                frames[start : j + 1],
                proposals[start : j + 1],
                frame_index=annotation.frame_index,
                feature_maps=feature_maps[start : j + 1],
            )
            detections.append(selected)
        return detections

    def run(self, snippet: AnnotatedSnippet) -> tuple[list[list[Detection]], InteractionOutput]:
        """Both stages, without gradient, on a prepared snippet"""
        proposals = self.proposals(snippet, EVAL_STREAM)
        with no_grad():
            feature_maps = self.detector.feature_maps(list(snippet.frames))
            detections = self.frame_detections(snippet, proposals, feature_maps)
            output = self.predictor(
                feature_maps, detections, self.detector.stride, snippet.frame_size
            )
        return detections, output

    def predict(self, snippet: AnnotatedSnippet) -> FramePredictions:
        """Detections and scored quintuples for the snippet's key frame"""
        prepared, factor = self.prepare(snippet)
        detections, output = self.run(prepared)
        quintuples = predict_interactions(
            output, self.prior, self.config.interaction.emission_threshold
        )
        key_detections = detections[-1]
        if factor != 1.0:
            key_detections = [
                det.model_copy(update={"box": det.box.scale(1.0 / factor)})
                for det in key_detections
            ]
            quintuples = [_unscale_quintuple(q, factor) for q in quintuples]
        return FramePredictions(
            video_id=snippet.video_id,
            frame_index=snippet.key_frame_index,
            detections=key_detections,
            quintuples=quintuples,
        )

    def predict_all(self, snippets: Sequence[AnnotatedSnippet]) -> list[FramePredictions]:
        return [self.predict(snippet) for snippet in snippets]

    def evaluate(
        self, snippets: Sequence[AnnotatedSnippet]
    ) -> tuple[list[FramePredictions], EvaluationReport]:
        """Predict every key frame and score it against the key-frame ground truth"""
        predictions = self.predict_all(snippets)
        report = evaluate(
            predictions,
            [snippet.key_annotation for snippet in snippets],
            self.config.evaluation.iou_threshold,
        )
        return predictions, report

    def checkpoint_metadata(self, stage: int) -> dict[str, str]:
        return {
            "stage": str(stage),
            "seed": str(self.config.seed),
            "config_hash": self.config.content_hash(),
        }

    def save_stage1(self, path: str | Path) -> tuple[Path, Path]:
        return save_checkpoint(self.detector, path, self.checkpoint_metadata(1))

    def save_stage2(self, path: str | Path) -> tuple[Path, Path]:
        return save_checkpoint(self.predictor, path, self.checkpoint_metadata(2))

    def load_stage1(self, path: str | Path) -> CheckpointInfo:
        info = load_checkpoint(self.detector, path)
        logger.info("Loaded stage-1 checkpoint %s", path)
        return info

    def load_stage2(self, path: str | Path) -> CheckpointInfo:
        info = load_checkpoint(self.predictor, path)
        logger.info("Loaded stage-2 checkpoint %s", path)
        return info


def _unscale_quintuple(quintuple: Quintuple, factor: float) -> Quintuple:
    return quintuple.model_copy(
        update={
            "instrument_box": quintuple.instrument_box.scale(1.0 / factor),
            "tissue_box": quintuple.tissue_box.scale(1.0 / factor),
        }
    )
