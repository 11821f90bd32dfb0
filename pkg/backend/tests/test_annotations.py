"""
Tests for the annotation, prediction and prior-table file formats
"""

import pytest
from annotations import (
    parse_annotations,
    parse_predictions,
    parse_prior_table,
    read_annotations,
    read_predictions,
    read_prior_table,
    write_annotations,
    write_predictions,
    write_prior_table,
)
from exceptions import AnnotationFormatError
from models import FrameAnnotation, PriorTable, Role


def test_annotations_survive_write_and_read(tmp_path, sample_annotation):
    path = tmp_path / "annotations.txt"
    count = write_annotations([sample_annotation], path)
    assert count == 3  # two instances and one quintuple
    assert read_annotations(path) == [sample_annotation]


def test_awkward_floats_are_written_losslessly(tmp_path, sample_annotation):
    """repr keeps every bit of a coordinate like 0.1 + 0.2"""
    odd = sample_annotation.instances[0].box.model_copy(update={"x1": 0.1 + 0.2})
    frame = sample_annotation.model_copy(
        update={"instances": [sample_annotation.instances[0].model_copy(update={"box": odd})]}
    )
    path = tmp_path / "annotations.txt"
    write_annotations([frame], path)
    assert read_annotations(path)[0].instances[0].box.x1 == 0.1 + 0.2


def test_empty_frame_writes_no_records(tmp_path):
    path = tmp_path / "annotations.txt"
    assert write_annotations([FrameAnnotation(video_id="v", frame_index=0)], path) == 0
    assert read_annotations(path) == []


def test_predictions_survive_write_and_read(tmp_path, perfect_predictions):
    path = tmp_path / "predictions.txt"
    write_predictions([perfect_predictions], path)
    loaded = read_predictions(path)[0]
    assert [d.score for d in loaded.detections] == [0.9, 0.9]
    assert [d.frame_index for d in loaded.detections] == [2, 2]
    assert loaded.quintuples == perfect_predictions.quintuples


def test_comments_and_blank_lines_are_ignored():
    lines = [
        "# ground truth",
        "",
        "v000 4 tissue 1 0.0 0.0 10.0 10.0  # trailing comment",
    ]
    frames = parse_annotations(lines)
    assert len(frames) == 1
    assert frames[0].instances[0].role == Role.TISSUE


def test_records_group_by_frame_in_first_appearance_order():
    lines = [
        "v001 7 instrument 0 0.0 0.0 4.0 4.0",
        "v000 3 tissue 0 0.0 0.0 4.0 4.0",
        "v001 7 tissue 2 4.0 0.0 9.0 4.0",
    ]
    frames = parse_annotations(lines)
    assert [f.key for f in frames] == [("v001", 7), ("v000", 3)]
    assert len(frames[0].instances) == 2


@pytest.mark.parametrize(
    ("line", "message"),
    [
        ("v000 1 instrument 0 0.0 0.0 4.0", "needs 8 fields"),
        ("v000 1 INT 0 0 0 4 4 1 4 0 9 4", "needs 14 fields"),
        ("v000 x instrument 0 0.0 0.0 4.0 4.0", "frame index must be an integer"),
        ("v000 -1 instrument 0 0.0 0.0 4.0 4.0", "non-negative"),
        ("v000 1 scalpel 0 0.0 0.0 4.0 4.0", "unknown role"),
        ("v000 1 tissue 0 0.0 0.0 nan 4.0", "invalid box"),
        ("v000 1 tissue 0 4.0 0.0 1.0 4.0", "invalid box"),
        ("v000 1", "at least 3 fields"),
    ],
)
def test_malformed_lines_name_the_line(line, message):
    """Errors carry the 1-based line number of the offending record"""
    with pytest.raises(AnnotationFormatError, match=f"line 2: .*{message}") as excinfo:
        parse_annotations(["# header", line])
    assert excinfo.value.line_number == 2


def test_detection_score_outside_unit_interval_is_rejected():
    with pytest.raises(AnnotationFormatError, match="outside"):
        parse_predictions(["v000 1 tissue 0 0.0 0.0 4.0 4.0 1.5"])


def test_predictions_need_a_score_column():
    with pytest.raises(AnnotationFormatError, match="needs 9 fields"):
        parse_predictions(["v000 1 tissue 0 0.0 0.0 4.0 4.0"])


def test_video_id_with_whitespace_cannot_be_written(tmp_path, sample_annotation):
    frame = sample_annotation.model_copy(update={"video_id": "my video"})
    with pytest.raises(ValueError, match="single field"):
        write_annotations([frame], tmp_path / "annotations.txt")


def test_prior_table_survives_write_and_read(tmp_path, sample_prior):
    table = sample_prior.model_copy(
        update={"tissue_actions": {**sample_prior.tissue_actions, 2: []}}
    )
    path = tmp_path / "priors.txt"
    write_prior_table(table, path)
    assert "tissue 2 -" in path.read_text()
    assert read_prior_table(path) == table


def test_prior_table_sorts_and_deduplicates():
    table = parse_prior_table(["instrument 0 4,1,1"])
    assert table == PriorTable(instrument_actions={0: [1, 4]})


@pytest.mark.parametrize(
    ("line", "message"),
    [
        ("instrument 0", "needs 3 fields"),
        ("robot 0 1,2", "malformed"),
        ("tissue 0 1,x", "malformed"),
    ],
)
def test_malformed_prior_lines(line, message):
    with pytest.raises(AnnotationFormatError, match=f"line 1: .*{message}"):
        parse_prior_table([line])


def test_duplicate_prior_entry_is_rejected():
    with pytest.raises(AnnotationFormatError, match="line 2: duplicate"):
        parse_prior_table(["tissue 1 0", "tissue 1 2"])
