"""
Line-oriented annotation, prediction and prior-table files.

Instance record::

    video_id frame_idx role category x1 y1 x2 y2 [score]

Interaction record::

    video_id frame_idx INT ins_cat ix1 iy1 ix2 iy2 tis_cat tx1 ty1 tx2 ty2 action [score]

Prior-table record::

    role category action,action,...      ("-" for an empty set)

Fields are whitespace separated, one record per line; blank lines and
``#`` comments are ignored. Floats are written with ``repr`` so a
write/read round trip is lossless.
"""

from collections.abc import Iterable
from pathlib import Path

from exceptions import AnnotationFormatError
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

INTERACTION_TAG = "INT"
INSTANCE_FIELDS = 8
INTERACTION_FIELDS = 14
EMPTY_ACTIONS = "-"


def read_file(file_path: str | Path) -> list[str]:
    """Read lines with UTF-8 encoding"""
    with open(file_path, encoding="utf-8") as file:
        return file.read().splitlines()


def _num(value: float) -> str:
    return repr(float(value))


def _box_fields(box: BoundingBox) -> str:
    return " ".join(_num(v) for v in box.as_list())


def format_instance(
    video_id: str, frame_index: int, role: Role, category: int, box: BoundingBox
) -> str:
    _check_video_id(video_id)
    return f"{video_id} {frame_index} {role.value} {category} {_box_fields(box)}"


def format_quintuple(video_id: str, frame_index: int, quintuple: Quintuple) -> str:
    _check_video_id(video_id)
    return (
        f"{video_id} {frame_index} {INTERACTION_TAG} "
        f"{quintuple.instrument_category} {_box_fields(quintuple.instrument_box)} "
        f"{quintuple.tissue_category} {_box_fields(quintuple.tissue_box)} "
        f"{quintuple.action}"
    )


def _check_video_id(video_id: str) -> None:
    if not video_id or any(ch.isspace() for ch in video_id) or video_id.startswith("#"):
        msg = f"video id {video_id!r} cannot be written as a single field"
        raise ValueError(msg)


class _Record:
    """One parsed non-comment line"""

    def __init__(self, fields: list[str], line_number: int, scored: bool) -> None:
        self.line_number = line_number
        self.video_id = fields[0]
        self.frame_index = self._int(fields[1], "frame index")
        self.is_interaction = fields[2] == INTERACTION_TAG
        expected = INTERACTION_FIELDS if self.is_interaction else INSTANCE_FIELDS
        expected += 1 if scored else 0
        if len(fields) != expected:
            kind = "interaction" if self.is_interaction else "instance"
            msg = f"{kind} record needs {expected} fields, got {len(fields)}"
            raise AnnotationFormatError(msg, line_number)
        self.fields = fields
        self.score = self._float(fields[-1], "score") if scored else 1.0

    def _int(self, value: str, what: str) -> int:
        try:
            parsed = int(value)
        except ValueError as e:
            msg = f"{what} must be an integer, got {value!r}"
            raise AnnotationFormatError(msg, self.line_number) from e
        if parsed < 0:
            msg = f"{what} must be non-negative, got {parsed}"
            raise AnnotationFormatError(msg, self.line_number)
        return parsed

    def _float(self, value: str, what: str) -> float:
        try:
            return float(value)
        except ValueError as e:
            msg = f"{what} must be a number, got {value!r}"
            raise AnnotationFormatError(msg, self.line_number) from e

    def _box(self, start: int) -> BoundingBox:
        coords = [self._float(v, "box coordinate") for v in self.fields[start : start + 4]]
        try:
            return BoundingBox.from_list(coords)
        except ValueError as e:
            msg = f"invalid box {coords}"
            raise AnnotationFormatError(msg, self.line_number) from e

    def role(self) -> Role:
        try:
            return Role(self.fields[2])
        except ValueError as e:
            msg = f"unknown role {self.fields[2]!r}"
            raise AnnotationFormatError(msg, self.line_number) from e

    def instance(self) -> InstanceAnnotation:
        return InstanceAnnotation(
            role=self.role(), category=self._int(self.fields[3], "category"), box=self._box(4)
        )

    def quintuple(self) -> Quintuple:
        return Quintuple(
            instrument_category=self._int(self.fields[3], "instrument category"),
            instrument_box=self._box(4),
            tissue_category=self._int(self.fields[8], "tissue category"),
            tissue_box=self._box(9),
            action=self._int(self.fields[13], "action"),
            score=self.score,
        )


def _records(lines: Iterable[str], scored: bool) -> Iterable[_Record]:
    for line_number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 3:
            msg = f"expected at least 3 fields, got {len(fields)}"
            raise AnnotationFormatError(msg, line_number)
        yield _Record(fields, line_number, scored)


def write_annotations(frames: Iterable[FrameAnnotation], path: str | Path) -> int:
    """
    Write ground truth, one record per instance and per quintuple.

    Returns:
        Number of records written; an empty frame contributes none
    """
    lines: list[str] = []
    for frame in frames:
        lines.extend(
            format_instance(frame.video_id, frame.frame_index, inst.role, inst.category, inst.box)
            for inst in frame.instances
        )
        lines.extend(format_quintuple(frame.video_id, frame.frame_index, q) for q in frame.quintuples)
    with open(path, "w", encoding="utf-8") as file:
        file.write("".join(f"{line}\n" for line in lines))
    return len(lines)


def parse_annotations(lines: Iterable[str]) -> list[FrameAnnotation]:
    """Group records by (video, frame) in order of first appearance"""
    frames: dict[tuple[str, int], FrameAnnotation] = {}
    for record in _records(lines, scored=False):
        key = (record.video_id, record.frame_index)
        frame = frames.setdefault(
            key, FrameAnnotation(video_id=record.video_id, frame_index=record.frame_index)
        )
        if record.is_interaction:
            frame.quintuples.append(record.quintuple())
        else:
            frame.instances.append(record.instance())
    return list(frames.values())


def read_annotations(path: str | Path) -> list[FrameAnnotation]:
    return parse_annotations(read_file(path))


def write_predictions(predictions: Iterable[FramePredictions], path: str | Path) -> int:
    """Like write_annotations with a trailing score column"""
    lines: list[str] = []
    for frame in predictions:
        lines.extend(
            f"{format_instance(frame.video_id, frame.frame_index, det.role, det.category, det.box)}"
            f" {_num(det.score)}"
            for det in frame.detections
        )
        lines.extend(
            f"{format_quintuple(frame.video_id, frame.frame_index, q)} {_num(q.score)}"
            for q in frame.quintuples
        )
    with open(path, "w", encoding="utf-8") as file:
        file.write("".join(f"{line}\n" for line in lines))
    return len(lines)


def parse_predictions(lines: Iterable[str]) -> list[FramePredictions]:
    frames: dict[tuple[str, int], FramePredictions] = {}
    for record in _records(lines, scored=True):
        key = (record.video_id, record.frame_index)
        frame = frames.setdefault(
            key, FramePredictions(video_id=record.video_id, frame_index=record.frame_index)
        )
        if record.is_interaction:
            frame.quintuples.append(record.quintuple())
            continue
        instance = record.instance()
        if not 0.0 <= record.score <= 1.0:
            msg = f"detection score {record.score} outside [0, 1]"
            raise AnnotationFormatError(msg, record.line_number)
        frame.detections.append(
            Detection(
                role=instance.role,
                category=instance.category,
                box=instance.box,
                score=record.score,
                frame_index=record.frame_index,
            )
        )
    return list(frames.values())


def read_predictions(path: str | Path) -> list[FramePredictions]:
    return parse_predictions(read_file(path))


def write_prior_table(prior: PriorTable, path: str | Path) -> None:
    lines = []
    for role, table in ((Role.INSTRUMENT, prior.instrument_actions), (Role.TISSUE, prior.tissue_actions)):
        for category in sorted(table):
            actions = ",".join(str(a) for a in table[category]) or EMPTY_ACTIONS
            lines.append(f"{role.value} {category} {actions}")
    with open(path, "w", encoding="utf-8") as file:
        file.write("".join(f"{line}\n" for line in lines))


def parse_prior_table(lines: Iterable[str]) -> PriorTable:
    tables: dict[Role, dict[int, list[int]]] = {Role.INSTRUMENT: {}, Role.TISSUE: {}}
    for line_number, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            msg = f"prior record needs 3 fields (role category actions), got {len(fields)}"
            raise AnnotationFormatError(msg, line_number)
        try:
            role = Role(fields[0])
            category = int(fields[1])
            actions = (
                [] if fields[2] == EMPTY_ACTIONS else [int(a) for a in fields[2].split(",")]
            )
        except ValueError as e:
            msg = f"malformed prior record {line!r}"
            raise AnnotationFormatError(msg, line_number) from e
        if category in tables[role]:
            msg = f"duplicate prior entry for {role.value} {category}"
            raise AnnotationFormatError(msg, line_number)
        tables[role][category] = actions
    return PriorTable(
        instrument_actions=tables[Role.INSTRUMENT], tissue_actions=tables[Role.TISSUE]
    )


def read_prior_table(path: str | Path) -> PriorTable:
    return parse_prior_table(read_file(path))
