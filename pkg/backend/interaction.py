"""
Stage 2: interaction prediction over a temporal graph.

Nodes are stage-1 detections in the key frame and its reference frames.
Every key-frame node is linked to at most one same-category node per
reference frame (temporal weight head + argmax), features are passed
along those chains by an LSTM, then across instrument/tissue pairs of the
key frame, and finally read out as per-action sigmoid scores.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from config import InteractionSettings
from detector import BoxHead
from exceptions import DimensionError
from geometry import encode_pair_array
from layers import LSTM, LayerNorm, Linear, Module
from models import Detection, PriorTable, Quintuple, Role
from tensor import (
    Tensor,
    concat,
    global_average_pool,
    relu,
    reshape,
    sigmoid,
)

logger = logging.getLogger(__name__)

RELATION_MODES = ("spatial", "concat")


@dataclass
class GraphNode:
    detection: Detection
    feature: Tensor  # 1×c
    frame_position: int  # 0 is the oldest frame of the snippet, r the key frame


@dataclass
class TemporalLink:
    """Resolution of one key node against one reference frame"""

    key_position: int  # index into InteractionGraph.key_nodes
    frame_position: int
    candidates: list[int]  # same-category node indices in that frame
    weights: Tensor | None  # 1×N_r, only when N_r > 1
    chosen: int | None  # node index in that frame


@dataclass
class InteractionGraph:
    """
    Nodes per frame plus resolved edges.

    Intra-frame edges are implicit: every (instrument, tissue) pair of the
    key frame. Inter-frame edges come from ``links``.
    """

    frames: list[list[GraphNode]]
    links: list[TemporalLink] = field(default_factory=list)

    @property
    def key_nodes(self) -> list[GraphNode]:
        return self.frames[-1]

    def nodes_of(self, role: Role) -> list[int]:
        return [i for i, node in enumerate(self.key_nodes) if node.detection.role == role]

    def chain(self, key_position: int) -> list[GraphNode]:
        """Matched nodes oldest to newest, ending with the key node itself"""
        matched = sorted(
            (link.frame_position, link.chosen)
            for link in self.links
            if link.key_position == key_position and link.chosen is not None
        )
        return [self.frames[pos][idx] for pos, idx in matched] + [
            self.key_nodes[key_position]
        ]

    def inter_edges(self) -> list[tuple[int, int, int]]:
        """(key node, frame position, node index) for every resolved edge"""
        return [
            (link.key_position, link.frame_position, link.chosen)
            for link in self.links
            if link.chosen is not None
        ]


class RelationWeightHead(Module):
    """
    Scalar weight for every (a, b) pair of nodes.

    spatial: FC(ReLU(FC(FC(f_a) ⊙ FC(f_b) + FC(SE_ab))))
    concat:  FC(ReLU(FC([f_a, f_b])))
    """

    def __init__(self, channels: int, rng: np.random.Generator, mode: str = "spatial") -> None:
        if mode not in RELATION_MODES:
            msg = f"relation mode must be one of {RELATION_MODES}, got '{mode}'"
            raise ValueError(msg)
        self.mode = mode
        self.channels = channels
        if mode == "spatial":
            self.fc_a = Linear(channels, channels, rng)
            self.fc_b = Linear(channels, channels, rng)
            self.fc_spatial = Linear(16, channels, rng)
            self.fc_hidden = Linear(channels, channels, rng)
        else:
            self.fc_hidden = Linear(2 * channels, channels, rng)
        self.fc_out = Linear(channels, 1, rng)

    def forward(self, f_a: Tensor, f_b: Tensor, encoding: np.ndarray | None = None) -> Tensor:
        n, m, c = f_a.shape[0], f_b.shape[0], self.channels
        if n == 0 or m == 0:
            return Tensor(np.zeros((n, m)))
        if self.mode == "spatial":
            if encoding is None or encoding.shape != (n, m, 16):
                msg = f"relation head needs a {n}×{m}×16 encoding"
                raise DimensionError(msg)
            joint = reshape(self.fc_a(f_a), (n, 1, c)) * reshape(self.fc_b(f_b), (1, m, c))
            joint = joint + self.fc_spatial(Tensor(encoding))
        else:
            grid = np.zeros((n, m, c))
            joint = concat(
                [reshape(f_a, (n, 1, c)) + grid, reshape(f_b, (1, m, c)) + grid], axis=2
            )
        hidden = relu(self.fc_hidden(joint))
        return reshape(self.fc_out(hidden), (n, m))


def resolve_inter_frame(
    key_node: GraphNode,
    candidates: Sequence[GraphNode],
    tw_head: RelationWeightHead,
    frame_size: tuple[int, int],
) -> tuple[int | None, Tensor | None]:
    """
    Pick the same instance of ``key_node`` among same-category candidates.

    No candidate means no edge, a single candidate is the same instance
    without consulting the head, and otherwise the highest temporal weight
    wins (lowest index on ties).

    Returns:
        (chosen candidate index or None, 1×N_r weights when they were computed)
    """
    if not candidates:
        return None, None
    if len(candidates) == 1:
        return 0, None
    reference = concat([node.feature for node in candidates], axis=0)
    encoding = encode_pair_array(
        [key_node.detection.box],
        [node.detection.box for node in candidates],
        *frame_size,
    )
    weights = tw_head(key_node.feature, reference, encoding)
    return int(np.argmax(weights.data[0])), weights


def build_graph(
    frames: list[list[GraphNode]],
    tw_head: RelationWeightHead,
    frame_size: tuple[int, int],
) -> InteractionGraph:
    """Resolve every key node against every reference frame"""
    graph = InteractionGraph(frames)
    for key_position, key_node in enumerate(graph.key_nodes):
        det = key_node.detection
        for frame_position, nodes in enumerate(frames[:-1]):
            candidates = [
                i
                for i, node in enumerate(nodes)
                if node.detection.role == det.role and node.detection.category == det.category
            ]
            chosen, weights = resolve_inter_frame(
                key_node, [nodes[i] for i in candidates], tw_head, frame_size
            )
            graph.links.append(
                TemporalLink(
                    key_position,
                    frame_position,
                    candidates,
                    weights,
                    None if chosen is None else candidates[chosen],
                )
            )
    return graph


class Readout(Module):
    """
    Action probabilities for every instrument/tissue pair.

    Four parallel maps (instrument, tissue, pair encoding, pooled key-frame
    map) are summed, passed through FC, LayerNorm and ReLU, and mapped to
    A sigmoid outputs.
    """

    def __init__(self, channels: int, num_actions: int, rng: np.random.Generator) -> None:
        self.channels = channels
        self.fc_instrument = Linear(channels, channels, rng)
        self.fc_tissue = Linear(channels, channels, rng)
        self.fc_spatial = Linear(16, channels, rng)
        self.fc_frame = Linear(channels, channels, rng)
        self.fc_joint = Linear(channels, channels, rng)
        self.norm = LayerNorm(channels)
        self.fc_action = Linear(channels, num_actions, rng)

    def forward(
        self,
        f_instrument: Tensor,
        f_tissue: Tensor,
        encoding: np.ndarray,
        key_feature_map: Tensor,
    ) -> Tensor:
        n, m, c = f_instrument.shape[0], f_tissue.shape[0], self.channels
        summed = (
            reshape(self.fc_instrument(f_instrument), (n, 1, c))
            + reshape(self.fc_tissue(f_tissue), (1, m, c))
            + self.fc_spatial(Tensor(encoding))
            + self.fc_frame(global_average_pool(key_feature_map))
        )
        hidden = relu(self.norm(self.fc_joint(summed)))
        return sigmoid(self.fc_action(hidden))


def intra_frame_message_passing(
    f_instrument: Tensor,
    f_tissue: Tensor,
    weights: Tensor,
    norm_instrument: LayerNorm,
    norm_tissue: LayerNorm,
) -> tuple[Tensor, Tensor]:
    """Norm(f_i + w·f_t) and Norm(f_t + wᵀ·f_i)"""
    return (
        norm_instrument(f_instrument + weights @ f_tissue),
        norm_tissue(f_tissue + weights.T @ f_instrument),
    )


@dataclass
class InteractionOutput:
    instruments: list[Detection]
    tissues: list[Detection]
    action_probs: Tensor | None  # N_i×N_t×A; None without a pair
    graph: InteractionGraph


class InteractionPredictor(Module):
    """The TG layer: feature box head, graph, message passing and readout"""

    def __init__(
        self,
        settings: InteractionSettings,
        channels: int,
        roi_size: int,
        num_actions: int,
        rng: np.random.Generator,
    ) -> None:
        self.settings = settings
        self.num_actions = num_actions
        self.box_head = BoxHead(channels, roi_size, rng)
        self.tw_head = RelationWeightHead(channels, rng, settings.tw_mode)
        self.inter_lstm = LSTM(channels, channels, rng)
        self.intra_head = RelationWeightHead(channels, rng, settings.intra_mode)
        self.norm_instrument = LayerNorm(channels)
        self.norm_tissue = LayerNorm(channels)
        self.readout = Readout(channels, num_actions, rng)

    def extract_nodes(
        self,
        feature_maps: Sequence[Tensor],
        detections: Sequence[Sequence[Detection]],
        stride: int,
    ) -> list[list[GraphNode]]:
        """Box-head features for every detection of every frame"""
        frames: list[list[GraphNode]] = []
        for position, (fm, dets) in enumerate(zip(feature_maps, detections, strict=True)):
            if not dets:
                frames.append([])
                continue
            boxes = np.array([det.box.as_list() for det in dets])
            features = self.box_head(fm, boxes, stride)
            frames.append(
                [
                    GraphNode(det, features[row : row + 1], position)
                    for row, det in enumerate(dets)
                ]
            )
        return frames

    def inter_frame_message_passing(self, chain: Sequence[GraphNode]) -> Tensor:
        """f_key + LSTM over the chain features, oldest first"""
        return chain[-1].feature + self.inter_lstm([node.feature for node in chain])

    def intra_weights(
        self, f_instrument: Tensor, f_tissue: Tensor, encoding: np.ndarray
    ) -> Tensor:
        return self.intra_head(f_instrument, f_tissue, encoding)

    def forward(
        self,
        feature_maps: Sequence[Tensor],
        detections: Sequence[Sequence[Detection]],
        stride: int,
        frame_size: tuple[int, int],
    ) -> InteractionOutput:
        if len(feature_maps) != len(detections):
            msg = f"{len(feature_maps)} feature maps but {len(detections)} detection lists"
            raise DimensionError(msg)
        frames = self.extract_nodes(feature_maps, detections, stride)
        if self.settings.use_inter:
            graph = build_graph(frames, self.tw_head, frame_size)
        else:
            graph = InteractionGraph(frames)

        instrument_idx = graph.nodes_of(Role.INSTRUMENT)
        tissue_idx = graph.nodes_of(Role.TISSUE)
        instruments = [graph.key_nodes[i].detection for i in instrument_idx]
        tissues = [graph.key_nodes[i].detection for i in tissue_idx]
        if not instruments or not tissues:
            return InteractionOutput(instruments, tissues, None, graph)

        def node_feature(position: int) -> Tensor:
            if self.settings.use_inter:
                return self.inter_frame_message_passing(graph.chain(position))
            return graph.key_nodes[position].feature

        f_instrument = concat([node_feature(i) for i in instrument_idx], axis=0)
        f_tissue = concat([node_feature(t) for t in tissue_idx], axis=0)
        encoding = encode_pair_array(
            [det.box for det in instruments], [det.box for det in tissues], *frame_size
        )
        if self.settings.use_intra:
            weights = self.intra_weights(f_instrument, f_tissue, encoding)
            f_instrument, f_tissue = intra_frame_message_passing(
                f_instrument, f_tissue, weights, self.norm_instrument, self.norm_tissue
            )
        probs = self.readout(f_instrument, f_tissue, encoding, feature_maps[-1])
        return InteractionOutput(instruments, tissues, probs, graph)


def admissible_actions(
    instrument: Detection, tissue: Detection, prior: PriorTable, num_actions: int
) -> np.ndarray:
    """0/1 mask over actions allowed by both categories"""
    mask = np.ones(num_actions)
    for det in (instrument, tissue):
        allowed = prior.actions_for(det.role, det.category)
        if allowed is None:
            logger.warning(
                "No prior entry for %s category %d; all actions admissible",
                det.role.value,
                det.category,
            )
            continue
        role_mask = np.zeros(num_actions)
        role_mask[np.array([a for a in allowed if a < num_actions], dtype=int)] = 1.0
        mask *= role_mask
    return mask


def apply_prior_and_score(
    action_scores: np.ndarray,
    instrument: Detection,
    tissue: Detection,
    prior: PriorTable,
) -> np.ndarray:
    """s = s_a·s_i·s_t on admissible actions, 0 elsewhere"""
    action_scores = np.asarray(action_scores, dtype=np.float64)
    mask = admissible_actions(instrument, tissue, prior, len(action_scores))
    scores = action_scores * instrument.score * tissue.score
    return np.where(mask > 0, scores, 0.0)


def predict_interactions(
    output: InteractionOutput,
    prior: PriorTable,
    emission_threshold: float,
) -> list[Quintuple]:
    """Scored quintuples above the emission threshold, best first"""
    if output.action_probs is None:
        return []
    probs = output.action_probs.data
    quintuples: list[Quintuple] = []
    for i, instrument in enumerate(output.instruments):
        for t, tissue in enumerate(output.tissues):
            scores = apply_prior_and_score(probs[i, t], instrument, tissue, prior)
            for action, score in enumerate(scores):
                if score > emission_threshold:
                    quintuples.append(
                        Quintuple(
                            instrument_category=instrument.category,
                            instrument_box=instrument.box,
                            tissue_category=tissue.category,
                            tissue_box=tissue.box,
                            action=action,
                            score=float(score),
                        )
                    )
    return sorted(quintuples, key=lambda q: -q.score)
