"""
Tests for named-parameter checkpoints
"""

import numpy as np
import pytest
from checkpoint import checkpoint_paths, load_checkpoint, read_manifest, save_checkpoint
from exceptions import CheckpointError, DimensionError
from pipeline import ITIDNet


def test_checkpoint_paths_accept_stem_or_file(tmp_path):
    expected = (tmp_path / "stage1.bin", tmp_path / "stage1.manifest")
    assert checkpoint_paths(tmp_path / "stage1") == expected
    assert checkpoint_paths(tmp_path / "stage1.bin") == expected
    assert checkpoint_paths(tmp_path / "stage1.manifest") == expected


def test_save_then_load_restores_every_tensor(tmp_path, test_config):
    # Setup
    source = ITIDNet(test_config).detector
    for param in source.parameters():
        param.data = param.data + 1.5
    target = ITIDNet(test_config).detector

    # Execute
    bin_path, manifest_path = save_checkpoint(source, tmp_path / "stage1", {"stage": "1"})
    info = load_checkpoint(target, tmp_path / "stage1")

    # Verify
    assert bin_path.stat().st_size == 8 * sum(p.data.size for p in source.parameters())
    assert manifest_path.read_text().splitlines()[0] == "# format=1"
    assert info.metadata == {"format": "1", "stage": "1"}
    for name, param in target.named_parameters().items():
        np.testing.assert_array_equal(param.data, source.named_parameters()[name].data)


def test_manifest_lists_names_shapes_and_offsets(tmp_path, test_config):
    detector = ITIDNet(test_config).detector
    save_checkpoint(detector, tmp_path / "ckpt")
    entries = read_manifest(tmp_path / "ckpt").entries
    assert [e.name for e in entries] == list(detector.named_parameters())
    assert entries[0].offset == 0
    for previous, current in zip(entries, entries[1:], strict=False):
        assert current.offset == previous.offset + previous.size


def test_loading_into_a_different_module_names_the_mismatch(tmp_path, test_config):
    model = ITIDNet(test_config)
    save_checkpoint(model.detector, tmp_path / "stage1")
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(model.predictor, tmp_path / "stage1")


def test_shape_mismatch_names_the_tensor(tmp_path, test_config):
    save_checkpoint(ITIDNet(test_config).detector, tmp_path / "stage1")
    narrower = test_config.with_overrides(detector={"backbone_channels": (4, 6)})
    with pytest.raises(DimensionError, match=r"tensor 'backbone\..*checkpoint shape"):
        load_checkpoint(ITIDNet(narrower).detector, tmp_path / "stage1")


def test_missing_files_raise_checkpoint_error(tmp_path, test_config):
    detector = ITIDNet(test_config).detector
    with pytest.raises(CheckpointError, match="manifest not found"):
        load_checkpoint(detector, tmp_path / "absent")

    bin_path, _ = save_checkpoint(detector, tmp_path / "stage1")
    bin_path.unlink()
    with pytest.raises(CheckpointError, match="data not found"):
        load_checkpoint(detector, tmp_path / "stage1")


def test_truncated_data_is_detected(tmp_path, test_config):
    detector = ITIDNet(test_config).detector
    bin_path, _ = save_checkpoint(detector, tmp_path / "stage1")
    bin_path.write_bytes(bin_path.read_bytes()[:16])
    with pytest.raises(CheckpointError, match="runs past the end"):
        load_checkpoint(detector, tmp_path / "stage1")


def test_malformed_manifest_line(tmp_path, test_config):
    _, manifest_path = save_checkpoint(ITIDNet(test_config).detector, tmp_path / "stage1")
    manifest_path.write_text("# format=1\nweights 3,3\n", encoding="utf-8")
    with pytest.raises(CheckpointError, match=":2: malformed"):
        read_manifest(tmp_path / "stage1")
