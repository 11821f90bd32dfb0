import math
from datetime import datetime
from enum import StrEnum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Role(StrEnum):
    """Which half of an interaction an instance plays"""

    INSTRUMENT = "instrument"
    TISSUE = "tissue"


class BoundingBox(BaseModel):
    """Axis-aligned pixel box, serialized as [x1, y1, x2, y2]"""

    model_config = ConfigDict(frozen=True)

    x1: float
    y1: float
    x2: float  # exclusive edge
    y2: float  # exclusive edge

    @model_validator(mode="after")
    def _check_corners(self) -> "BoundingBox":
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            msg = f"box coordinates must be finite, got {coords}"
            raise ValueError(msg)
        if self.x2 < self.x1 or self.y2 < self.y1:
            msg = f"inverted box {coords}"
            raise ValueError(msg)
        return self

    @classmethod
    def from_list(cls, values: Any) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clip(self, width: float, height: float) -> "BoundingBox":
        """Clamp into the frame; a box entirely outside collapses to zero area"""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, x1), width)
        y2 = min(max(self.y2, y1), height)
        return BoundingBox(x1=x1, y1=y1, x2=x2, y2=y2)

    def scale(self, factor: float) -> "BoundingBox":
        return BoundingBox(
            x1=self.x1 * factor, y1=self.y1 * factor, x2=self.x2 * factor, y2=self.y2 * factor
        )


class Detection(BaseModel):
    """A scored instance from stage 1; also a node of the interaction graph"""

    model_config = ConfigDict(frozen=True)

    role: Role
    category: int = Field(ge=0)  # role-local category id
    box: BoundingBox
    score: float = Field(ge=0.0, le=1.0)
    frame_index: int = 0


class InstanceAnnotation(BaseModel):
    """Ground-truth instrument or tissue box in one frame"""

    model_config = ConfigDict(frozen=True)

    role: Role
    category: int = Field(ge=0)
    box: BoundingBox


class Quintuple(BaseModel):
    """<instrument class, instrument box, tissue class, tissue box, action class> with a score"""

    model_config = ConfigDict(frozen=True)

    instrument_category: int = Field(ge=0)
    instrument_box: BoundingBox
    tissue_category: int = Field(ge=0)
    tissue_box: BoundingBox
    action: int = Field(ge=0)
    score: float = 1.0

    @property
    def class_key(self) -> tuple[int, int, int]:
        return self.instrument_category, self.tissue_category, self.action


class FrameAnnotation(BaseModel):
    """Everything annotated for one frame of one video"""

    video_id: str
    frame_index: int
    instances: list[InstanceAnnotation] = []
    quintuples: list[Quintuple] = []

    @property
    def key(self) -> tuple[str, int]:
        return self.video_id, self.frame_index


class FramePredictions(BaseModel):
    """Scored model output for one frame, the prediction-side twin of FrameAnnotation"""

    video_id: str
    frame_index: int
    detections: list[Detection] = []
    quintuples: list[Quintuple] = []

    @property
    def key(self) -> tuple[str, int]:
        return self.video_id, self.frame_index


class AnnotatedSnippet(BaseModel):
    """
    A key frame with its r reference frames, ordered oldest to key.

    ``frames`` is (r+1)×3×H×W in [0, 1]; ``annotations`` has one entry per
    frame and only the last (key) entry carries quintuples.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    snippet_id: str
    video_id: str
    frames: np.ndarray
    annotations: list[FrameAnnotation]
    clamped: bool = False  # generator had to clamp the motion script

    @property
    def key_annotation(self) -> FrameAnnotation:
        return self.annotations[-1]

    @property
    def key_frame_index(self) -> int:
        return self.annotations[-1].frame_index

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def frame_size(self) -> tuple[int, int]:
        """(width, height) in pixels"""
        return int(self.frames.shape[3]), int(self.frames.shape[2])


class PriorTable(BaseModel):
    """Admissible action ids per instrument category and per tissue category"""

    instrument_actions: dict[int, list[int]] = {}
    tissue_actions: dict[int, list[int]] = {}

    @field_validator("instrument_actions", "tissue_actions")
    @classmethod
    def _sorted_unique(cls, value: dict[int, list[int]]) -> dict[int, list[int]]:
        return {category: sorted(set(actions)) for category, actions in value.items()}

    def actions_for(self, role: Role, category: int) -> list[int] | None:
        table = self.instrument_actions if role == Role.INSTRUMENT else self.tissue_actions
        return table.get(category)


class RunManifest(BaseModel):
    """Provenance record written before a command does any work"""

    command: str
    config_path: str | None = None
    seed: int
    config_hash: str
    output_dir: str
    started_at: datetime
    finished_at: datetime | None = None
    arguments: dict[str, Any] = {}
