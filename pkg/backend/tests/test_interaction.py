"""
Tests for stage 2: temporal graph resolution, message passing, readout and prior masking
"""

import numpy as np
import pytest
from config import InteractionSettings
from exceptions import DimensionError
from interaction import (
    GraphNode,
    InteractionPredictor,
    RelationWeightHead,
    admissible_actions,
    apply_prior_and_score,
    build_graph,
    predict_interactions,
    resolve_inter_frame,
)
from models import BoundingBox, Detection, Role
from tensor import Tensor

CHANNELS = 6
FRAME = (64, 48)


def _node(rng, role, category, position, x=None, score=0.9):
    x1 = rng.uniform(0, 40) if x is None else x
    y1 = rng.uniform(0, 30)
    box = BoundingBox(x1=x1, y1=y1, x2=x1 + rng.uniform(4, 20), y2=y1 + rng.uniform(4, 16))
    det = Detection(role=role, category=category, box=box, score=score, frame_index=position)
    return GraphNode(det, Tensor(rng.normal(size=(1, CHANNELS))), position)


def _random_frames(rng, num_frames=3, max_nodes=4):
    frames = []
    for position in range(num_frames):
        count = int(rng.integers(0, max_nodes + 1))
        frames.append(
            [
                _node(rng, Role.INSTRUMENT if rng.random() < 0.5 else Role.TISSUE, int(rng.integers(2)), position)
                for _ in range(count)
            ]
        )
    if not frames[-1]:
        frames[-1].append(_node(rng, Role.INSTRUMENT, 0, num_frames - 1))
    return frames


def test_relation_head_rejects_unknown_mode(rng):
    with pytest.raises(ValueError):
        RelationWeightHead(CHANNELS, rng, "dot")


def test_relation_head_output_shape_both_modes(rng):
    f_a, f_b = Tensor(rng.normal(size=(2, CHANNELS))), Tensor(rng.normal(size=(3, CHANNELS)))
    encoding = rng.uniform(size=(2, 3, 16))
    for mode in ("spatial", "concat"):
        head = RelationWeightHead(CHANNELS, rng, mode)
        assert head(f_a, f_b, encoding).shape == (2, 3)
    with pytest.raises(DimensionError):
        RelationWeightHead(CHANNELS, rng, "spatial")(f_a, f_b, encoding[:, :1])


def test_relation_head_with_empty_side(rng):
    head = RelationWeightHead(CHANNELS, rng)
    out = head(Tensor(np.zeros((0, CHANNELS))), Tensor(np.ones((2, CHANNELS))))
    assert out.shape == (0, 2)


def test_resolve_no_candidate_means_no_edge(rng):
    key = _node(rng, Role.INSTRUMENT, 0, 2)
    assert resolve_inter_frame(key, [], RelationWeightHead(CHANNELS, rng), FRAME) == (None, None)


def test_resolve_single_candidate_ignores_head(rng):
    """One candidate is linked whatever the TW head's parameters are"""
    key, only = _node(rng, Role.INSTRUMENT, 0, 2), _node(rng, Role.INSTRUMENT, 0, 1)
    head = RelationWeightHead(CHANNELS, rng)
    for param in head.parameters():
        param.data = rng.normal(size=param.shape) * 100.0
    assert resolve_inter_frame(key, [only], head, FRAME) == (0, None)


def test_resolve_many_candidates_takes_argmax(rng):
    key = _node(rng, Role.TISSUE, 1, 2)
    candidates = [_node(rng, Role.TISSUE, 1, 0) for _ in range(4)]
    head = RelationWeightHead(CHANNELS, rng)
    chosen, weights = resolve_inter_frame(key, candidates, head, FRAME)
    assert weights.shape == (1, 4)
    assert chosen == int(np.argmax(weights.data[0]))


def test_resolve_ties_take_lowest_index(rng, mocker):
    key = _node(rng, Role.TISSUE, 1, 2)
    candidates = [_node(rng, Role.TISSUE, 1, 0) for _ in range(3)]
    head = mocker.Mock(return_value=Tensor(np.array([[0.2, 0.7, 0.7]])))
    chosen, _ = resolve_inter_frame(key, candidates, head, FRAME)
    assert chosen == 1
    head.assert_called_once()


def test_build_graph_resolution_cases_on_random_frames():
    """
    For every key node and reference frame: no same-category node gives no
    edge, one gives an edge without weights, several give an argmax edge.
    """
    rng = np.random.default_rng(7)
    head = RelationWeightHead(CHANNELS, np.random.default_rng(0))
    for _ in range(200):
        frames = _random_frames(rng)
        graph = build_graph(frames, head, FRAME)
        assert len(graph.links) == len(graph.key_nodes) * (len(frames) - 1)
        for link in graph.links:
            key = graph.key_nodes[link.key_position].detection
            same = [
                i
                for i, node in enumerate(frames[link.frame_position])
                if (node.detection.role, node.detection.category) == (key.role, key.category)
            ]
            assert link.candidates == same
            if not same:
                assert link.chosen is None and link.weights is None
            elif len(same) == 1:
                assert link.chosen == same[0] and link.weights is None
            else:
                assert link.weights.shape == (1, len(same))
                assert link.chosen == same[int(np.argmax(link.weights.data[0]))]


def test_build_graph_single_candidate_links_survive_head_perturbation():
    rng = np.random.default_rng(11)
    frames = _random_frames(rng, num_frames=4)
    first = build_graph(frames, RelationWeightHead(CHANNELS, np.random.default_rng(1)), FRAME)
    second = build_graph(frames, RelationWeightHead(CHANNELS, np.random.default_rng(2)), FRAME)
    single_first = [(link.key_position, link.frame_position, link.chosen) for link in first.links if len(link.candidates) == 1]
    single_second = [(link.key_position, link.frame_position, link.chosen) for link in second.links if len(link.candidates) == 1]
    assert single_first == single_second


def test_chain_is_ordered_oldest_first(rng):
    frames = [
        [_node(rng, Role.INSTRUMENT, 0, 0)],
        [_node(rng, Role.INSTRUMENT, 0, 1)],
        [_node(rng, Role.INSTRUMENT, 0, 2)],
    ]
    graph = build_graph(frames, RelationWeightHead(CHANNELS, rng), FRAME)
    chain = graph.chain(0)
    assert [node.frame_position for node in chain] == [0, 1, 2]
    assert graph.inter_edges() == [(0, 0, 0), (0, 1, 0)]


def _predictor(settings=None, seed=0, num_actions=5):
    return InteractionPredictor(
        settings or InteractionSettings(), CHANNELS, 3, num_actions, np.random.default_rng(seed)
    )


def _frame_detections(num_frames=3):
    instrument = Detection(
        role=Role.INSTRUMENT, category=0, box=BoundingBox(x1=4.0, y1=10.0, x2=24.0, y2=16.0), score=0.9
    )
    tissue = Detection(
        role=Role.TISSUE, category=1, box=BoundingBox(x1=24.0, y1=4.0, x2=44.0, y2=30.0), score=0.8
    )
    second_tissue = tissue.model_copy(
        update={"category": 0, "box": BoundingBox(x1=46.0, y1=20.0, x2=60.0, y2=40.0)}
    )
    return [[instrument, tissue, second_tissue] for _ in range(num_frames)]


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"use_inter": False},
        {"use_intra": False},
        {"use_inter": False, "use_intra": False},
        {"tw_mode": "concat", "intra_mode": "concat"},
    ],
)
def test_predictor_outputs_probabilities_for_every_pair(rng, overrides):
    settings = InteractionSettings(**overrides)
    predictor = _predictor(settings)
    maps = [Tensor(rng.normal(size=(CHANNELS, 12, 16))) for _ in range(3)]
    output = predictor(maps, _frame_detections(), 4, FRAME)
    assert output.action_probs.shape == (1, 2, 5)
    assert np.all((output.action_probs.data > 0) & (output.action_probs.data < 1))
    assert [d.role for d in output.instruments] == [Role.INSTRUMENT]
    assert len(output.tissues) == 2
    if settings.use_inter:
        assert len(output.graph.links) == 3 * 2
    else:
        assert output.graph.links == []


def test_predictor_without_pair_has_no_probabilities(rng):
    predictor = _predictor()
    maps = [Tensor(rng.normal(size=(CHANNELS, 12, 16))) for _ in range(2)]
    tissues_only = [[d for d in frame if d.role == Role.TISSUE] for frame in _frame_detections(2)]
    output = predictor(maps, tissues_only, 4, FRAME)
    assert output.action_probs is None
    assert predict_interactions(output, None, 0.0) == []


def test_predictor_with_empty_reference_frames(rng):
    """Reference frames without detections leave the key nodes unlinked"""
    predictor = _predictor()
    maps = [Tensor(rng.normal(size=(CHANNELS, 12, 16))) for _ in range(3)]
    detections = [[], [], _frame_detections(1)[0]]
    output = predictor(maps, detections, 4, FRAME)
    assert output.action_probs.shape == (1, 2, 5)
    assert all(link.chosen is None for link in output.graph.links)


def test_predictor_rejects_frame_count_mismatch(rng):
    with pytest.raises(DimensionError):
        _predictor()([Tensor(np.zeros((CHANNELS, 4, 4)))], _frame_detections(2), 4, FRAME)


# ----------------------------------------------------------------------
# Prior masking and scoring
# ----------------------------------------------------------------------


def test_admissible_actions_intersect_both_roles(sample_prior):
    instrument = _frame_detections(1)[0][0]  # category 0: actions 0, 1, 4
    tissue = _frame_detections(1)[0][1]  # category 1: actions 0, 2, 4
    mask = admissible_actions(instrument, tissue, sample_prior, 5)
    np.testing.assert_array_equal(mask, [1, 0, 0, 0, 1])


def test_admissible_actions_unknown_category_is_unmasked(sample_prior, caplog):
    instrument = _frame_detections(1)[0][0].model_copy(update={"category": 3})
    tissue = _frame_detections(1)[0][1]
    mask = admissible_actions(instrument, tissue, sample_prior, 5)
    np.testing.assert_array_equal(mask, [1, 0, 1, 0, 1])
    assert "No prior entry" in caplog.text


def test_apply_prior_and_score_is_exact_product(sample_prior):
    """s = s_a·s_i·s_t bitwise on admissible actions, 0 elsewhere"""
    instrument, tissue = _frame_detections(1)[0][:2]
    action_scores = np.array([0.3, 0.9, 0.5, 0.7, 0.11])
    scores = apply_prior_and_score(action_scores, instrument, tissue, sample_prior)
    assert scores[0] == action_scores[0] * instrument.score * tissue.score
    assert scores[4] == action_scores[4] * instrument.score * tissue.score
    assert scores[1] == scores[2] == scores[3] == 0.0


def test_predict_interactions_thresholds_and_sorts(rng, sample_prior):
    predictor = _predictor()
    maps = [Tensor(rng.normal(size=(CHANNELS, 12, 16))) for _ in range(3)]
    output = predictor(maps, _frame_detections(), 4, FRAME)
    quintuples = predict_interactions(output, sample_prior, 0.0)
    scores = [q.score for q in quintuples]
    assert scores == sorted(scores, reverse=True)
    assert all(s > 0.0 for s in scores)
    for q in quintuples:
        assert q.action in sample_prior.instrument_actions[q.instrument_category]
        assert q.action in sample_prior.tissue_actions[q.tissue_category]
    assert predict_interactions(output, sample_prior, 1.0) == []
