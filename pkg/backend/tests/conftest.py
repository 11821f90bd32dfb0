import os
import sys

import numpy as np
import pytest

# Add backend to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from config import Config
from models import (
    BoundingBox,
    Detection,
    FrameAnnotation,
    FramePredictions,
    InstanceAnnotation,
    PriorTable,
    Quintuple,
    Role,
)
from simdata import SnippetGenerator, write_dataset


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    """A stray ITID_SEED in the environment must not leak into tests"""
    monkeypatch.delenv("ITID_SEED", raising=False)


@pytest.fixture
def test_config():
    """Small frames and a narrow backbone so every stage runs in seconds"""
    config = Config()
    config.scenario.frame_width = 64
    config.scenario.frame_height = 48
    config.scenario.reference_frames = 2
    config.scenario.script_length = 6
    config.scenario.snippets_per_video = 4
    config.scenario.noise_level = 0.0
    config.scenario.occlusion_rate = 0.0
    config.detector.backbone_channels = (4, 8)
    config.detector.num_proposals = 6
    config.detector.roi_size = 3
    config.detector.spatial_hidden = 8
    config.stage1.epochs = 2
    config.stage1.milestones = (1,)
    config.stage1.validate = False
    config.stage2.epochs = 2
    config.stage2.validate = False
    config.validate()
    return config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def generator(test_config):
    return SnippetGenerator(test_config.scenario, test_config.seed)


@pytest.fixture
def sample_snippet(generator):
    """First snippet of video v000"""
    video_id, key = next(generator.snippet_keys(1))
    return generator.generate_snippet(video_id, key)


@pytest.fixture
def interaction_snippet(generator):
    """A generated snippet whose key frame carries at least one quintuple"""
    for video_id, key in generator.snippet_keys(40):
        snippet = generator.generate_snippet(video_id, key)
        if snippet.key_annotation.quintuples:
            return snippet
    pytest.fail("no interaction snippet among the first 40")


@pytest.fixture
def dataset_dir(tmp_path, test_config):
    """A written 12-snippet dataset directory"""
    root = tmp_path / "data"
    root.mkdir()
    write_dataset(test_config, root, 12)
    return root


@pytest.fixture
def sample_prior():
    return PriorTable(
        instrument_actions={0: [0, 1, 4], 1: [0, 2, 3]},
        tissue_actions={0: [0, 1, 2, 3, 4], 1: [0, 2, 4]},
    )


@pytest.fixture
def sample_annotation():
    """Key frame with one instrument, one tissue and one touch interaction"""
    instrument_box = BoundingBox.from_list([10.0, 20.0, 30.0, 26.0])
    tissue_box = BoundingBox.from_list([30.0, 12.0, 50.0, 36.0])
    return FrameAnnotation(
        video_id="v000",
        frame_index=2,
        instances=[
            InstanceAnnotation(role=Role.TISSUE, category=1, box=tissue_box),
            InstanceAnnotation(role=Role.INSTRUMENT, category=0, box=instrument_box),
        ],
        quintuples=[
            Quintuple(
                instrument_category=0,
                instrument_box=instrument_box,
                tissue_category=1,
                tissue_box=tissue_box,
                action=0,
            )
        ],
    )


@pytest.fixture
def perfect_predictions(sample_annotation):
    """The sample annotation echoed back as predictions"""
    return FramePredictions(
        video_id=sample_annotation.video_id,
        frame_index=sample_annotation.frame_index,
        detections=[
            Detection(role=inst.role, category=inst.category, box=inst.box, score=0.9)
            for inst in sample_annotation.instances
        ],
        quintuples=[q.model_copy(update={"score": 0.8}) for q in sample_annotation.quintuples],
    )
