"""
Deterministic synthetic surgical snippets.

Tissues are static ellipses, instruments are horizontal bars that move
towards or away from a target tissue. The action of an instrument is a
function of its scripted motion only:

    gap  g_t  horizontal distance from the bar tip to the tissue boundary
              (negative once the tip is inside the tissue)
    dy_t      vertical offset of the bar

    last gap open, first gap closed         release
    last gap open, first gap open           no interaction
    last gap deeper than PUSH_DEPTH         push
    contact at the end, open at the start   touch
    contact throughout, bar moving          manipulate
    contact throughout, bar still           hold

``label_action`` is that rule and is the only source of labels.
"""

import hashlib
import json
import logging
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from annotations import read_annotations, read_prior_table, write_annotations, write_prior_table
from config import Config, ScenarioSettings
from exceptions import ConfigError
from models import (
    AnnotatedSnippet,
    BoundingBox,
    FrameAnnotation,
    InstanceAnnotation,
    PriorTable,
    Quintuple,
    Role,
)
from pydantic import BaseModel
from scipy import ndimage

logger = logging.getLogger(__name__)

TOUCH, MANIPULATE, RELEASE, PUSH, HOLD = range(5)
ACTION_NAMES = ("touch", "manipulate", "release", "push", "hold")

CONTACT_TOLERANCE = 1.0
PUSH_DEPTH = 3.0
MOTION_TOLERANCE = 1.0
MIN_VISIBLE = 8.0  # pixels of bar kept inside the frame
MAX_LAYOUT_ATTEMPTS = 50
SPLITS = ("train", "val", "test")

MANIFEST_FILE = "manifest.json"
ANNOTATION_FILE = "annotations.txt"
PRIOR_FILE = "priors.txt"
CONFIG_FILE = "config.ini"
FRAMES_DIR = "frames"

BACKGROUND_COLOR = np.array([0.35, 0.12, 0.10])
OCCLUDER_COLOR = np.array([0.55, 0.50, 0.45])
TISSUE_PALETTE = np.array(
    [[0.85, 0.45, 0.40], [0.95, 0.80, 0.55], [0.60, 0.25, 0.45], [0.45, 0.65, 0.35]]
)
INSTRUMENT_PALETTE = np.array(
    [[0.80, 0.85, 0.90], [0.30, 0.45, 0.85], [0.20, 0.75, 0.80], [0.95, 0.95, 0.30]]
)


@dataclass(frozen=True)
class TissueSpec:
    category: int
    center: tuple[float, float]
    semi_axes: tuple[float, float]

    def box(self) -> BoundingBox:
        (cx, cy), (a, b) = self.center, self.semi_axes
        return BoundingBox(x1=cx - a, y1=cy - b, x2=cx + a, y2=cy + b)

    def boundary_x(self, y: float, side: int) -> float:
        """Ellipse boundary at height y on the left (side=-1) or right (+1)"""
        (cx, cy), (a, b) = self.center, self.semi_axes
        half_width = a * math.sqrt(max(0.0, 1.0 - ((y - cy) / b) ** 2))
        return cx + side * half_width


@dataclass(frozen=True)
class InstrumentScript:
    """Motion of one bar over the whole script, oldest frame first"""

    category: int
    target: int  # index of the tissue the bar moves against
    side: int  # -1: bar left of the tissue, +1: right
    gaps: tuple[float, ...]
    offsets: tuple[float, ...]  # dy_t relative to base_y
    base_y: float
    length: float
    thickness: float
    intended: int | None  # action the script was sampled for


@dataclass(frozen=True)
class SceneScript:
    tissues: tuple[TissueSpec, ...]
    instruments: tuple[InstrumentScript, ...]
    clamped: bool = False

    @property
    def is_interaction(self) -> bool:
        return any(label_action(inst) is not None for inst in self.instruments)


def label_action(script: InstrumentScript) -> int | None:
    """Rule oracle: the action implied by a motion script, None if idle"""
    first, last = script.gaps[0], script.gaps[-1]
    if last > CONTACT_TOLERANCE:
        return RELEASE if first <= CONTACT_TOLERANCE else None
    if last < -PUSH_DEPTH:
        return PUSH
    if first > CONTACT_TOLERANCE:
        return TOUCH
    moves = np.abs(np.diff(script.offsets)) if len(script.offsets) > 1 else np.zeros(1)
    return MANIPULATE if float(np.max(moves)) > MOTION_TOLERANCE else HOLD


def stable_hash(text: str) -> int:
    """32-bit SHA-1 prefix, stable across processes"""
    return int(hashlib.sha1(text.encode("utf-8")).hexdigest()[:8], 16)  # noqa: S324


def split_of(snippet_id: str, fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> str:
    """train / val / test by a hash of the snippet id"""
    position = stable_hash(f"split:{snippet_id}") / 2**32
    cumulative = np.cumsum(fractions) / float(np.sum(fractions))
    for name, bound in zip(SPLITS, cumulative, strict=True):
        if position < bound:
            return name
    return SPLITS[-1]


def parse_scripts(entries: Sequence[str], num_actions: int) -> dict[int, list[int]]:
    """'0 1 4' style entries -> {category: admissible actions}"""
    table: dict[int, list[int]] = {}
    for category, entry in enumerate(entries):
        try:
            actions = sorted({int(a) for a in entry.split()})
        except ValueError as e:
            msg = f"scenario script entry {entry!r} must list action ids"
            raise ConfigError(msg) from e
        if any(a < 0 or a >= num_actions for a in actions):
            msg = f"scenario script entry {entry!r} names an action outside 0..{num_actions - 1}"
            raise ConfigError(msg)
        table[category] = actions
    return table


def build_prior_table(settings: ScenarioSettings) -> PriorTable:
    """Admissible actions per category, exactly as the scenario scripts allow"""
    return PriorTable(
        instrument_actions=parse_scripts(settings.instrument_scripts, settings.num_actions),
        tissue_actions=parse_scripts(settings.tissue_scripts, settings.num_actions),
    )


class SnippetGenerator:
    """Samples scene scripts and renders them into annotated snippets"""

    def __init__(self, settings: ScenarioSettings, seed: int) -> None:
        if settings.num_actions > len(ACTION_NAMES):
            msg = f"scenario supports at most {len(ACTION_NAMES)} motion-defined actions"
            raise ConfigError(msg)
        if settings.frame_step <= settings.reference_frames:
            msg = "scenario.frame_step must exceed reference_frames"
            raise ConfigError(msg)
        self.settings = settings
        self.seed = seed
        self.prior = build_prior_table(settings)
        self.weights = np.asarray(settings.action_weights, dtype=np.float64)
        for action in range(settings.num_actions):
            if self.weights[action] > 0 and not self._combinations(action):
                msg = f"no instrument/tissue category admits action {action}"
                raise ConfigError(msg)

    def _combinations(self, action: int, tissue: int | None = None) -> list[tuple[int, int]]:
        tissues = [tissue] if tissue is not None else sorted(self.prior.tissue_actions)
        return [
            (i, t)
            for i, allowed in sorted(self.prior.instrument_actions.items())
            if action in allowed
            for t in tissues
            if action in self.prior.tissue_actions[t]
        ]

    def rng_for(self, snippet_id: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, stable_hash(snippet_id)])

    # ------------------------------------------------------------------
    # Scripts
    # ------------------------------------------------------------------

    def _sample_action(self, rng: np.random.Generator, tissue_category: int | None) -> tuple[int, int, int]:
        """(action, instrument category, tissue category)"""
        weights = self.weights.copy()
        if tissue_category is not None:
            for action in range(len(weights)):
                if not self._combinations(action, tissue_category):
                    weights[action] = 0.0
        action = int(rng.choice(len(weights), p=weights / weights.sum()))
        combos = self._combinations(action, tissue_category)
        instrument, tissue = combos[int(rng.integers(len(combos)))]
        return action, instrument, tissue

    def _motion(self, rng: np.random.Generator, action: int | None) -> tuple[np.ndarray, np.ndarray]:
        steps = self.settings.script_length
        ramp = np.linspace(0.0, 1.0, steps)
        offsets = np.zeros(steps)
        if action is None:
            start = rng.uniform(10.0, 20.0)
            gaps = start + rng.uniform(-3.0, 3.0) * ramp
        elif action == TOUCH:
            gaps = rng.uniform(8.0, 16.0) * (1.0 - ramp)
        elif action == RELEASE:
            gaps = rng.uniform(8.0, 16.0) * ramp
        elif action == PUSH:
            gaps = -rng.uniform(5.0, 8.0) * ramp
        elif action == MANIPULATE:
            gaps = np.zeros(steps)
            amplitude = rng.uniform(2.0, 3.0)
            offsets = amplitude * np.where(np.arange(steps) % 2 == 0, 1.0, -1.0)
        else:
            gaps = np.zeros(steps)
        return gaps, offsets

    def sample_script(self, rng: np.random.Generator) -> SceneScript:
        """
        Tissue layout plus one script per instrument, clamped to the frame.

        Whether the scene interacts is drawn once, at ``non_interaction_rate``.
        Clamping can move a bar into contact and change its label, so layouts
        whose labels disagree with that draw, or that the prior table does not
        admit, are drawn again.
        """
        interacting = bool(rng.random() >= self.settings.non_interaction_rate)
        for _ in range(MAX_LAYOUT_ATTEMPTS):
            scene = self._sample_scene(rng, interacting)
            if scene.is_interaction != interacting:
                continue
            if all(self._admissible(inst, scene) for inst in scene.instruments):
                return scene
        msg = (
            f"no admissible scene in {MAX_LAYOUT_ATTEMPTS} attempts; "
            "the frame is too small for the scripted motion"
        )
        raise ConfigError(msg)

    def _admissible(self, script: InstrumentScript, scene: SceneScript) -> bool:
        action = label_action(script)
        if action is None:
            return True
        tissue = scene.tissues[script.target].category
        return (
            action in self.prior.instrument_actions.get(script.category, [])
            and action in self.prior.tissue_actions.get(tissue, [])
        )

    def _sample_scene(self, rng: np.random.Generator, interacting: bool) -> SceneScript:
        s = self.settings
        width, height = s.frame_width, s.frame_height
        num_tissues = int(rng.integers(1, s.max_tissues + 1))
        num_instruments = int(rng.integers(1, s.max_instruments + 1))

        if num_tissues == 1:
            centers_x = [rng.uniform(0.4, 0.6) * width]
        else:
            centers_x = [rng.uniform(0.25, 0.32) * width, rng.uniform(0.68, 0.75) * width]
        tissue_categories = [int(rng.integers(s.num_tissue_classes)) for _ in centers_x]

        instruments: list[tuple[int | None, int, int, int]] = []  # action, category, target, side
        for position in range(num_instruments):
            if num_tissues == 1:
                target, side = 0, (-1 if position == 0 else 1)
            else:
                target = position if num_instruments > 1 else int(rng.integers(num_tissues))
                side = -1 if target == 0 else 1
            active = interacting and (position == 0 or rng.random() < 0.5)
            if not active:
                category = int(rng.integers(s.num_instrument_classes))
                instruments.append((None, category, target, side))
                continue
            # a shared tissue keeps the category chosen for the first instrument
            fixed = tissue_categories[target] if num_tissues == 1 and position > 0 else None
            action, category, tissue_category = self._sample_action(rng, fixed)
            tissue_categories[target] = tissue_category
            instruments.append((action, category, target, side))

        tissues = tuple(
            TissueSpec(
                category=category,
                center=(cx, rng.uniform(0.35, 0.65) * height),
                semi_axes=(rng.uniform(0.08, 0.12) * width, rng.uniform(0.12, 0.2) * height),
            )
            for cx, category in zip(centers_x, tissue_categories, strict=True)
        )

        clamped = False
        scripts = []
        for action, category, target, side in instruments:
            tissue = tissues[target]
            gaps, offsets = self._motion(rng, action)
            base_y = tissue.center[1] + rng.uniform(-0.3, 0.3) * tissue.semi_axes[1]
            script = InstrumentScript(
                category=category,
                target=target,
                side=side,
                gaps=tuple(float(g) for g in gaps),
                offsets=tuple(float(o) for o in offsets),
                base_y=float(base_y),
                length=float(rng.uniform(24.0, 40.0)),
                thickness=float(rng.uniform(5.0, 8.0)),
                intended=action,
            )
            script, was_clamped = self._clamp(script, tissue)
            clamped = clamped or was_clamped
            scripts.append(script)
        return SceneScript(tissues, tuple(scripts), clamped)

    def _clamp(self, script: InstrumentScript, tissue: TissueSpec) -> tuple[InstrumentScript, bool]:
        """Keep at least MIN_VISIBLE pixels of the bar inside the frame"""
        width = self.settings.frame_width
        gaps = list(script.gaps)
        changed = False
        for t, (gap, offset) in enumerate(zip(script.gaps, script.offsets, strict=True)):
            boundary = tissue.boundary_x(script.base_y + offset, script.side)
            tip = boundary + script.side * gap
            limited = min(max(tip, MIN_VISIBLE), width - MIN_VISIBLE)
            if limited != tip:
                gaps[t] = script.side * (limited - boundary)
                changed = True
        if not changed:
            return script, False
        return replace(script, gaps=tuple(gaps)), True

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def instrument_box(self, script: InstrumentScript, tissue: TissueSpec, step: int) -> BoundingBox:
        y = script.base_y + script.offsets[step]
        tip = tissue.boundary_x(y, script.side) + script.side * script.gaps[step]
        far = tip + script.side * script.length
        half = script.thickness / 2.0
        box = BoundingBox(x1=min(tip, far), y1=y - half, x2=max(tip, far), y2=y + half)
        return box.clip(self.settings.frame_width, self.settings.frame_height)

    def _render(
        self,
        tissues: Sequence[tuple[TissueSpec, BoundingBox]],
        instruments: Sequence[tuple[int, BoundingBox]],
        occluders: Sequence[BoundingBox],
        rng: np.random.Generator,
    ) -> np.ndarray:
        s = self.settings
        ys, xs = np.mgrid[0 : s.frame_height, 0 : s.frame_width] + 0.5
        image = np.empty((s.frame_height, s.frame_width, 3))
        image[:] = BACKGROUND_COLOR
        for tissue, _ in tissues:
            (cx, cy), (a, b) = tissue.center, tissue.semi_axes
            inside = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
            image[inside] = TISSUE_PALETTE[tissue.category % len(TISSUE_PALETTE)]
        for category, box in instruments:
            inside = (xs >= box.x1) & (xs < box.x2) & (ys >= box.y1) & (ys < box.y2)
            image[inside] = INSTRUMENT_PALETTE[category % len(INSTRUMENT_PALETTE)]
        for box in occluders:
            inside = (xs >= box.x1) & (xs < box.x2) & (ys >= box.y1) & (ys < box.y2)
            image[inside] = OCCLUDER_COLOR
        if s.noise_level > 0:
            image = image + rng.normal(0.0, s.noise_level, image.shape)
        quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0)
        return np.transpose(quantized, (2, 0, 1)) / 255.0

    def _occluder(self, box: BoundingBox, rng: np.random.Generator) -> BoundingBox:
        """Covers between a quarter and half of the box along one axis"""
        fraction = rng.uniform(0.25, 0.5)
        if rng.random() < 0.5:
            x1 = box.x1 + rng.uniform(0.0, 1.0 - fraction) * box.width
            return BoundingBox(x1=x1, y1=box.y1, x2=x1 + fraction * box.width, y2=box.y2)
        y1 = box.y1 + rng.uniform(0.0, 1.0 - fraction) * box.height
        return BoundingBox(x1=box.x1, y1=y1, x2=box.x2, y2=y1 + fraction * box.height)

    def generate_snippet(self, video_id: str, key_frame_index: int) -> AnnotatedSnippet:
        """
        Render the last r + 1 steps of a sampled scene script.

        Deterministic per (seed, snippet id).
        """
        s = self.settings
        r = s.reference_frames
        snippet_id = snippet_name(video_id, key_frame_index)
        rng = self.rng_for(snippet_id)
        scene = self.sample_script(rng)
        if scene.clamped:
            logger.warning("Snippet %s: trajectory clamped to stay in frame", snippet_id)

        steps = list(range(s.script_length - 1 - r, s.script_length))
        occluded: set[tuple[int, int]] = set()  # (instance, frame position)
        num_instances = len(scene.tissues) + len(scene.instruments)
        for instance in range(num_instances):
            if rng.random() >= s.occlusion_rate:
                continue
            start = int(rng.integers(len(steps)))
            duration = int(rng.integers(1, 3))
            for position in range(start, min(start + duration, len(steps))):
                occluded.add((instance, position))

        frames, annotations = [], []
        for position, step in enumerate(steps):
            tissue_boxes = [(tissue, tissue.box()) for tissue in scene.tissues]
            instrument_boxes = [
                (inst.category, self.instrument_box(inst, scene.tissues[inst.target], step))
                for inst in scene.instruments
            ]
            all_boxes = [box for _, box in tissue_boxes] + [box for _, box in instrument_boxes]
            occluders = [
                self._occluder(all_boxes[instance], rng)
                for instance in range(num_instances)
                if (instance, position) in occluded
            ]
            frames.append(self._render(tissue_boxes, instrument_boxes, occluders, rng))

            instances = [
                InstanceAnnotation(role=Role.TISSUE, category=tissue.category, box=box)
                for tissue, box in tissue_boxes
            ] + [
                InstanceAnnotation(role=Role.INSTRUMENT, category=category, box=box)
                for category, box in instrument_boxes
            ]
            quintuples = []
            if position == len(steps) - 1:
                for inst, (_, box) in zip(scene.instruments, instrument_boxes, strict=True):
                    action = label_action(inst)
                    if action is None:
                        continue
                    tissue = scene.tissues[inst.target]
                    quintuples.append(
                        Quintuple(
                            instrument_category=inst.category,
                            instrument_box=box,
                            tissue_category=tissue.category,
                            tissue_box=tissue_boxes[inst.target][1],
                            action=action,
                        )
                    )
            annotations.append(
                FrameAnnotation(
                    video_id=video_id,
                    frame_index=key_frame_index - (r - position),
                    instances=instances,
                    quintuples=quintuples,
                )
            )
        return AnnotatedSnippet(
            snippet_id=snippet_id,
            video_id=video_id,
            frames=np.stack(frames),
            annotations=annotations,
            clamped=scene.clamped,
        )

    def snippet_keys(self, count: int) -> Iterator[tuple[str, int]]:
        """(video id, key frame index) for the first ``count`` snippets"""
        s = self.settings
        for n in range(count):
            video, position = divmod(n, s.snippets_per_video)
            yield f"v{video:03d}", s.reference_frames + position * s.frame_step


def snippet_name(video_id: str, key_frame_index: int) -> str:
    return f"{video_id}_{key_frame_index:06d}"


def trim_snippet(snippet: AnnotatedSnippet, reference_frames: int) -> AnnotatedSnippet:
    """Keep the key frame and its last ``reference_frames`` predecessors"""
    needed = reference_frames + 1
    if snippet.num_frames < needed:
        msg = (
            f"snippet {snippet.snippet_id} has {snippet.num_frames} frames; "
            f"r={reference_frames} needs {needed}"
        )
        raise ConfigError(msg)
    if snippet.num_frames == needed:
        return snippet
    return snippet.model_copy(
        update={
            "frames": snippet.frames[-needed:],
            "annotations": snippet.annotations[-needed:],
        }
    )


def _scale_annotation(annotation: FrameAnnotation, factor: float) -> FrameAnnotation:
    return annotation.model_copy(
        update={
            "instances": [
                inst.model_copy(update={"box": inst.box.scale(factor)})
                for inst in annotation.instances
            ],
            "quintuples": [
                q.model_copy(
                    update={
                        "instrument_box": q.instrument_box.scale(factor),
                        "tissue_box": q.tissue_box.scale(factor),
                    }
                )
                for q in annotation.quintuples
            ],
        }
    )


def rescale_snippet(snippet: AnnotatedSnippet, height: int) -> tuple[AnnotatedSnippet, float]:
    """
    Resize frames (bilinear) and boxes to the given frame height.

    Returns:
        (rescaled snippet, factor); factor is 1.0 and the snippet is returned
        unchanged when height is 0 or already matches
    """
    current = snippet.frames.shape[2]
    if height <= 0 or height == current:
        return snippet, 1.0
    factor = height / current
    frames = np.clip(ndimage.zoom(snippet.frames, (1, 1, factor, factor), order=1), 0.0, 1.0)
    factor = frames.shape[2] / current
    return (
        snippet.model_copy(
            update={
                "frames": frames,
                "annotations": [_scale_annotation(a, factor) for a in snippet.annotations],
            }
        ),
        factor,
    )


# ----------------------------------------------------------------------
# Dataset directories
# ----------------------------------------------------------------------


class SnippetRecord(BaseModel):
    snippet_id: str
    video_id: str
    key_frame_index: int
    split: str
    clamped: bool = False
    interactions: int = 0


class DatasetManifest(BaseModel):
    seed: int
    config_hash: str
    reference_frames: int
    frame_width: int
    frame_height: int
    snippets: list[SnippetRecord] = []


@dataclass
class SnippetDataset:
    """A loaded dataset directory"""

    root: Path
    manifest: DatasetManifest
    prior: PriorTable
    snippets: list[AnnotatedSnippet] = field(default_factory=list)

    def split(self, name: str) -> list[AnnotatedSnippet]:
        wanted = {rec.snippet_id for rec in self.manifest.snippets if rec.split == name}
        return [snippet for snippet in self.snippets if snippet.snippet_id in wanted]

    def frame_annotations(self, snippets: Sequence[AnnotatedSnippet] | None = None) -> list[FrameAnnotation]:
        """Key-frame annotations, the evaluation ground truth"""
        return [snippet.key_annotation for snippet in (self.snippets if snippets is None else snippets)]


def write_dataset(config: Config, out_dir: str | Path, count: int) -> DatasetManifest:
    """Generate ``count`` snippets into ``out_dir`` (which must exist)"""
    root = Path(out_dir)
    generator = SnippetGenerator(config.scenario, config.seed)
    (root / FRAMES_DIR).mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest(
        seed=config.seed,
        config_hash=config.content_hash(),
        reference_frames=config.scenario.reference_frames,
        frame_width=config.scenario.frame_width,
        frame_height=config.scenario.frame_height,
    )
    frames: list[FrameAnnotation] = []
    for video_id, key in generator.snippet_keys(count):
        snippet = generator.generate_snippet(video_id, key)
        np.savez_compressed(
            root / FRAMES_DIR / f"{snippet.snippet_id}.npz",
            frames=np.round(snippet.frames * 255.0).astype(np.uint8),
        )
        frames.extend(snippet.annotations)
        manifest.snippets.append(
            SnippetRecord(
                snippet_id=snippet.snippet_id,
                video_id=video_id,
                key_frame_index=key,
                split=split_of(snippet.snippet_id, config.scenario.split_fractions),
                clamped=snippet.clamped,
                interactions=len(snippet.key_annotation.quintuples),
            )
        )
    write_annotations(frames, root / ANNOTATION_FILE)
    write_prior_table(generator.prior, root / PRIOR_FILE)
    (root / CONFIG_FILE).write_text(config.to_ini(), encoding="utf-8")
    (root / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return manifest


def load_dataset(path: str | Path) -> SnippetDataset:
    root = Path(path)
    manifest = DatasetManifest.model_validate(
        json.loads((root / MANIFEST_FILE).read_text(encoding="utf-8"))
    )
    by_frame = {frame.key: frame for frame in read_annotations(root / ANNOTATION_FILE)}
    r = manifest.reference_frames
    snippets = []
    for record in manifest.snippets:
        with np.load(root / FRAMES_DIR / f"{record.snippet_id}.npz") as archive:
            frames = archive["frames"].astype(np.float64) / 255.0
        annotations = []
        for position in range(r + 1):
            index = record.key_frame_index - (r - position)
            annotations.append(
                by_frame.get(
                    (record.video_id, index),
                    FrameAnnotation(video_id=record.video_id, frame_index=index),
                )
            )
        snippets.append(
            AnnotatedSnippet(
                snippet_id=record.snippet_id,
                video_id=record.video_id,
                frames=frames,
                annotations=annotations,
                clamped=record.clamped,
            )
        )
    return SnippetDataset(root, manifest, read_prior_table(root / PRIOR_FILE), snippets)


def dataset_hash(path: str | Path) -> str:
    """SHA-256 over annotations, priors, manifest and every frame archive's pixels"""
    root = Path(path)
    digest = hashlib.sha256()
    for name in (ANNOTATION_FILE, PRIOR_FILE, MANIFEST_FILE):
        digest.update((root / name).read_bytes())
    for archive_path in sorted((root / FRAMES_DIR).glob("*.npz")):
        with np.load(archive_path) as archive:
            digest.update(archive["frames"].tobytes())
    return digest.hexdigest()
