"""
Stage 1: instance detection over a snippet.

The key frame's proposals are pooled from a small convolutional backbone,
refined by the snippet-context layer (SCF) and the cross-frame aggregation
layer (SCA), then classified over [background, instruments, tissues] and
regressed with class-specific box deltas.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from config import DetectorSettings
from exceptions import DimensionError
from geometry import clip_boxes, decode_deltas, encode_pairs, nms
from layers import LSTM, MLP, Conv2d, Linear, Module
from models import BoundingBox, Detection, Role
from tensor import (
    Tensor,
    as_tensor,
    concat,
    global_average_pool,
    no_grad,
    relu,
    reshape,
    roi_align_boxes,
    scaled_dot_product,
    softmax_rows,
)

logger = logging.getLogger(__name__)

BACKGROUND = 0


def class_index(role: Role, category: int, num_instrument_classes: int) -> int:
    """Column of the class head for a role-local category (0 is background)"""
    if role == Role.INSTRUMENT:
        return 1 + category
    return 1 + num_instrument_classes + category


def class_role(index: int, num_instrument_classes: int) -> tuple[Role, int]:
    """Inverse of class_index for foreground columns"""
    if index <= BACKGROUND:
        msg = f"class column {index} is background"
        raise ValueError(msg)
    if index <= num_instrument_classes:
        return Role.INSTRUMENT, index - 1
    return Role.TISSUE, index - 1 - num_instrument_classes


# ----------------------------------------------------------------------
# Proposals
# ----------------------------------------------------------------------


@dataclass
class ProposalSet:
    """Exactly ``num_proposals`` boxes for one frame"""

    boxes: np.ndarray  # N_p×4
    objectness: np.ndarray  # N_p
    source: np.ndarray  # index of the jittered GT box, -1 for background
    padded: bool = False  # provider fell short and rows were replicated

    def __len__(self) -> int:
        return len(self.boxes)


def pad_proposals(
    boxes: np.ndarray,
    objectness: np.ndarray,
    source: np.ndarray,
    num_proposals: int,
) -> ProposalSet:
    """Truncate or pad by replication to exactly ``num_proposals`` rows"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) >= num_proposals:
        return ProposalSet(
            boxes[:num_proposals].copy(),
            np.asarray(objectness[:num_proposals], dtype=np.float64),
            np.asarray(source[:num_proposals], dtype=int),
        )
    if len(boxes) == 0:
        msg = "cannot pad an empty proposal set"
        raise DimensionError(msg)
    logger.warning(
        "Proposal provider yielded %d of %d boxes; padding by replication",
        len(boxes),
        num_proposals,
    )
    rows = np.arange(num_proposals) % len(boxes)
    return ProposalSet(
        boxes[rows].copy(),
        np.asarray(objectness, dtype=np.float64)[rows],
        np.asarray(source, dtype=int)[rows],
        padded=True,
    )


def propose(
    gt_boxes: np.ndarray,
    frame_size: tuple[int, int],
    num_proposals: int,
    rng: np.random.Generator,
    settings: DetectorSettings,
    background: bool = True,
    jitter: bool = True,
) -> ProposalSet:
    """
    Ground-truth jitter proposal provider.

    Each GT box yields one proposal with its centre shifted by up to
    ``jitter_center`` of the box size and each side scaled by a factor in
    [jitter_scale_min, jitter_scale_max]; random background boxes fill the
    remaining slots. Everything is clipped to the frame.

    Args:
        gt_boxes: |GT|×4 boxes of the frame (may be empty)
        frame_size: (width, height)
        num_proposals: N_p
        rng: Source of all randomness; same state gives the same proposals
        settings: Jitter ranges
        background: Fill with random boxes (otherwise pad by replication)
        jitter: False reproduces the GT boxes exactly

    Returns:
        ProposalSet with N_p rows
    """
    frame_w, frame_h = frame_size
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    count = len(gt)

    widths, heights = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    cx, cy = (gt[:, 0] + gt[:, 2]) / 2.0, (gt[:, 1] + gt[:, 3]) / 2.0
    if jitter and count:
        shift = settings.jitter_center
        cx = cx + rng.uniform(-shift, shift, count) * widths
        cy = cy + rng.uniform(-shift, shift, count) * heights
        widths = widths * rng.uniform(settings.jitter_scale_min, settings.jitter_scale_max, count)
        heights = heights * rng.uniform(
            settings.jitter_scale_min, settings.jitter_scale_max, count
        )
    jittered = np.stack(
        [cx - widths / 2, cy - heights / 2, cx + widths / 2, cy + heights / 2], axis=1
    )
    jittered = clip_boxes(jittered, frame_w, frame_h)

    extra = max(num_proposals - count, 0) if background else 0
    bg_w = rng.uniform(0.1, 0.4, extra) * frame_w
    bg_h = rng.uniform(0.1, 0.4, extra) * frame_h
    bg_x = rng.uniform(0.0, 1.0, extra) * (frame_w - bg_w)
    bg_y = rng.uniform(0.0, 1.0, extra) * (frame_h - bg_h)
    background_boxes = np.stack([bg_x, bg_y, bg_x + bg_w, bg_y + bg_h], axis=1)

    boxes = np.concatenate([jittered, background_boxes], axis=0)
    objectness = np.concatenate([np.ones(count), np.zeros(extra)])
    source = np.concatenate([np.arange(count), np.full(extra, -1)]).astype(int)
    return pad_proposals(boxes, objectness, source, num_proposals)


# ----------------------------------------------------------------------
# Network pieces
# ----------------------------------------------------------------------


class Backbone(Module):
    """
    Stride-2 3×3 convolutions with ReLU.

    Padding 1 on every layer gives ceil(H/2) per layer, so odd sizes are
    padded and cropped consistently; overall output is ceil(H/s)×ceil(W/s)
    with s = 2^layers.
    """

    def __init__(self, channels: Sequence[int], rng: np.random.Generator) -> None:
        sizes = [3, *channels]
        self.convs = [
            Conv2d(a, b, 3, rng, stride=2, padding=1)
            for a, b in zip(sizes[:-1], sizes[1:], strict=True)
        ]
        self.out_channels = sizes[-1]
        self.stride = 2 ** len(self.convs)

    def forward(self, image: np.ndarray | Tensor) -> Tensor:
        x = as_tensor(image)
        if x.ndim != 3 or x.shape[0] != 3:
            msg = f"backbone expects a 3×H×W image, got {x.shape}"
            raise DimensionError(msg)
        for conv in self.convs:
            x = relu(conv(x))
        return x


class BoxHead(Module):
    """RoI align, flatten, one Linear + ReLU down to c features"""

    def __init__(self, channels: int, roi_size: int, rng: np.random.Generator) -> None:
        self.channels = channels
        self.roi_size = roi_size
        self.fc = Linear(channels * roi_size * roi_size, channels, rng)

    def pool(self, feature_map: Tensor, boxes: np.ndarray, stride: int) -> Tensor:
        """Flattened RoI samples, N×(c·P·P), before the head"""
        pooled = roi_align_boxes(feature_map, boxes, self.roi_size, stride)
        return reshape(pooled, (pooled.shape[0], -1))

    def forward(self, feature_map: Tensor, boxes: np.ndarray, stride: int) -> Tensor:
        return relu(self.fc(self.pool(feature_map, boxes, stride)))


class SCFLayer(Module):
    """
    Snippet context attention over the key frame's proposals.

    G = W_g · LSTM(GAP(f_m^{k-r}), ..., GAP(f_m^k)); scores are
    (Q ⊙ G)(K ⊙ G)ᵀ/√c with ⊙ broadcast over rows; the attended values are
    added back to the input.
    """

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        self.lstm = LSTM(channels, channels, rng)
        self.context_fc = Linear(channels, channels, rng)
        self.query = Linear(channels, channels, rng)
        self.key = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng)

    def context(self, feature_maps: Sequence[Tensor]) -> Tensor:
        pooled = [global_average_pool(fm) for fm in feature_maps]
        return self.context_fc(self.lstm(pooled))

    def attend(self, features: Tensor, context: Tensor) -> Tensor:
        scores = scaled_dot_product(self.query(features) * context, self.key(features) * context)
        return features + softmax_rows(scores) @ self.value(features)

    def forward(self, feature_maps: Sequence[Tensor], features: Tensor) -> Tensor:
        return self.attend(features, self.context(feature_maps))


class SCALayer(Module):
    """Aggregates reference-frame proposals into the key frame's proposals"""

    def __init__(
        self,
        channels: int,
        spatial_hidden: int,
        rng: np.random.Generator,
        use_spatial: bool = True,
    ) -> None:
        self.use_spatial = use_spatial
        self.spatial = MLP([16, spatial_hidden, 1], rng)
        self.query = Linear(channels, channels, rng)
        self.key = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng)

    def spatial_weight(self, encoding: Tensor | np.ndarray) -> Tensor:
        """w_s, N_p×M, from the N_p×M×16 pair encoding"""
        n, m = encoding.shape[:2]
        return reshape(self.spatial(as_tensor(encoding)), (n, m))

    def attention(
        self, features: Tensor, reference: Tensor, encoding: Tensor | np.ndarray
    ) -> Tensor:
        logits = scaled_dot_product(self.query(features), self.key(reference))
        if self.use_spatial:
            logits = logits + self.spatial_weight(encoding)
        return softmax_rows(logits)

    def forward(
        self, features: Tensor, reference: Tensor | None, encoding: Tensor | np.ndarray
    ) -> Tensor:
        if reference is None or reference.shape[0] == 0:
            logger.warning("SCA layer has no reference proposals (r=0); passing features through")
            return features
        if encoding.shape[:2] != (features.shape[0], reference.shape[0]):
            msg = (
                f"SCA encoding {encoding.shape} does not pair {features.shape[0]} "
                f"key with {reference.shape[0]} reference proposals"
            )
            raise DimensionError(msg)
        weights = self.attention(features, reference, encoding)
        return features + weights @ self.value(reference)


class DetectionHeads(Module):
    """Class logits over background + C_i + C_t and class-specific deltas"""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator) -> None:
        self.num_classes = num_classes  # foreground only
        self.classifier = Linear(channels, num_classes + 1, rng)
        self.regressor = Linear(channels, 4 * num_classes, rng)

    def forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        return self.classifier(features), self.regressor(features)


# ----------------------------------------------------------------------
# Detector
# ----------------------------------------------------------------------


@dataclass
class DetectorOutput:
    class_logits: Tensor  # N_p×(K+1)
    box_deltas: Tensor  # N_p×4K
    proposals: ProposalSet
    feature_maps: list[Tensor] = field(default_factory=list)


def select_outputs(
    detections: Sequence[Detection],
    score_threshold: float,
    nms_threshold: float,
    max_per_role: int,
) -> list[Detection]:
    """
    Drop scores below the threshold, run per-category NMS, keep the top
    ``max_per_role`` per role. Result is sorted by descending score.
    """
    confident = [det for det in detections if det.score >= score_threshold]
    kept = nms(confident, nms_threshold)
    selected: list[Detection] = []
    for role in Role:
        selected.extend([det for det in kept if det.role == role][:max_per_role])
    return sorted(selected, key=lambda det: -det.score)


class InstanceDetector(Module):
    """
    Backbone, box head, SCF, SCA and heads for one snippet.

    ``forward`` takes frames oldest to key and one ProposalSet per frame;
    the last frame is the key frame.
    """

    def __init__(
        self,
        settings: DetectorSettings,
        num_instrument_classes: int,
        num_tissue_classes: int,
        rng: np.random.Generator,
    ) -> None:
        self.settings = settings
        self.num_instrument_classes = num_instrument_classes
        self.num_tissue_classes = num_tissue_classes
        self.backbone = Backbone(settings.backbone_channels, rng)
        channels = self.backbone.out_channels
        self.box_head = BoxHead(channels, settings.roi_size, rng)
        self.scf = SCFLayer(channels, rng)
        self.sca = SCALayer(channels, settings.spatial_hidden, rng, settings.sca_spatial)
        self.heads = DetectionHeads(
            channels, num_instrument_classes + num_tissue_classes, rng
        )

    @property
    def channels(self) -> int:
        return self.backbone.out_channels

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def feature_maps(self, frames: Sequence[np.ndarray]) -> list[Tensor]:
        return [self.backbone(frame) for frame in frames]

    def refine(
        self,
        feature_maps: Sequence[Tensor],
        proposals: Sequence[ProposalSet],
        frame_size: tuple[int, int],
    ) -> Tensor:
        """Key-frame proposal features after the enabled refinement layers"""
        if len(feature_maps) != len(proposals):
            msg = f"{len(feature_maps)} frames but {len(proposals)} proposal sets"
            raise DimensionError(msg)
        key_boxes = proposals[-1].boxes
        features = self.box_head(feature_maps[-1], key_boxes, self.stride)
        if self.settings.use_scf:
            features = self.scf(feature_maps, features)
        if self.settings.use_sca:
            reference: Tensor | None = None
            encoding: Tensor | np.ndarray = np.zeros((len(key_boxes), 0, 16))
            if len(feature_maps) > 1:
                reference = concat(
                    [
                        self.box_head(fm, props.boxes, self.stride)
                        for fm, props in zip(feature_maps[:-1], proposals[:-1], strict=True)
                    ],
                    axis=0,
                )
                encoding = concat(
                    [
                        encode_pairs(key_boxes, props.boxes, *frame_size)
                        for props in proposals[:-1]
                    ],
                    axis=1,
                )
            features = self.sca(features, reference, encoding)
        return features

    def forward(
        self,
        frames: Sequence[np.ndarray],
        proposals: Sequence[ProposalSet],
        feature_maps: Sequence[Tensor] | None = None,
    ) -> DetectorOutput:
        frame_size = (int(frames[-1].shape[2]), int(frames[-1].shape[1]))
        maps = list(feature_maps) if feature_maps is not None else self.feature_maps(frames)
        features = self.refine(maps, proposals, frame_size)
        class_logits, box_deltas = self.heads(features)
        return DetectorOutput(class_logits, box_deltas, proposals[-1], maps)

    def decode(
        self, output: DetectorOutput, frame_size: tuple[int, int], frame_index: int = 0
    ) -> list[Detection]:
        """Every (proposal, foreground class) as a scored, clipped Detection"""
        probs = softmax_rows(output.class_logits).data
        num_fg = self.heads.num_classes
        deltas = output.box_deltas.data.reshape(len(output.proposals), num_fg, 4)
        detections: list[Detection] = []
        for column in range(1, num_fg + 1):
            boxes = decode_deltas(output.proposals.boxes, deltas[:, column - 1])
            boxes = clip_boxes(boxes, *frame_size)
            role, category = class_role(column, self.num_instrument_classes)
            for row, box in enumerate(boxes):
                if box[2] - box[0] <= 0 or box[3] - box[1] <= 0:
                    continue
                detections.append(
                    Detection(
                        role=role,
                        category=category,
                        box=BoundingBox.from_list(box),
                        score=float(min(max(probs[row, column], 0.0), 1.0)),
                        frame_index=frame_index,
                    )
                )
        return detections

    def detect(
        self,
        frames: Sequence[np.ndarray],
        proposals: Sequence[ProposalSet],
        frame_index: int = 0,
        feature_maps: Sequence[Tensor] | None = None,
    ) -> tuple[list[Detection], list[Tensor]]:
        """Inference: selected key-frame detections plus the frames' feature maps"""
        with no_grad():
            output = self.forward(frames, proposals, feature_maps)
        frame_size = (int(frames[-1].shape[2]), int(frames[-1].shape[1]))
        candidates = self.decode(output, frame_size, frame_index)
        selected = select_outputs(
            candidates,
            self.settings.score_threshold,
            self.settings.nms_threshold,
            self.settings.max_per_role,
        )
        return selected, output.feature_maps


def feature_map_size(frame_size: tuple[int, int], stride: int) -> tuple[int, int]:
    """(h, w) of the backbone output for a (width, height) frame"""
    width, height = frame_size
    return math.ceil(height / stride), math.ceil(width / stride)
