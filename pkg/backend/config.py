import configparser
import copy
import dataclasses
import hashlib
import io
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from dotenv import load_dotenv
from exceptions import ConfigError

# Load environment variables from .env file
load_dotenv()

SEED_ENV_VAR = "ITID_SEED"
LOG_LEVEL_ENV_VAR = "ITID_LOG_LEVEL"


@dataclass
class RunSettings:
    """Run-wide settings"""

    seed: int = 0  # overridden by ITID_SEED
    log_level: str = "INFO"


@dataclass
class ScenarioSettings:
    """Synthetic snippet generator settings"""

    frame_width: int = 128
    frame_height: int = 96
    reference_frames: int = 3  # r; a snippet has r + 1 frames
    num_instrument_classes: int = 4
    num_tissue_classes: int = 4
    num_actions: int = 5
    script_length: int = 8  # frames of scripted motion; snippets show the last r + 1
    noise_level: float = 0.02  # std of Gaussian pixel noise
    non_interaction_rate: float = 0.2
    occlusion_rate: float = 0.3  # chance per instance of a 1-2 frame occlusion
    max_instruments: int = 2
    max_tissues: int = 2
    snippets_per_video: int = 20
    frame_step: int = 30  # key-frame spacing inside a video
    # global action frequencies (touch, manipulate, release, push, hold)
    action_weights: tuple[float, ...] = (0.5, 0.2, 0.14, 0.1, 0.06)
    # admissible actions per instrument / tissue category, space separated
    instrument_scripts: tuple[str, ...] = ("0 1 4", "0 2 3", "1 3 4", "0 2")
    tissue_scripts: tuple[str, ...] = ("0 1 2 3 4", "0 2 4", "1 3", "0 1 2")
    split_fractions: tuple[float, ...] = (0.7, 0.1, 0.2)  # train, val, test


@dataclass
class DetectorSettings:
    """Stage-1 instance detector settings"""

    input_height: int = 0  # 0 keeps the rendered height
    backbone_channels: tuple[int, ...] = (16, 32, 64)  # one stride-2 conv per entry
    num_proposals: int = 16  # N_p
    roi_size: int = 7  # P
    use_scf: bool = True
    use_sca: bool = True
    sca_spatial: bool = True  # false drops w_s (attention-only aggregation)
    spatial_hidden: int = 32
    jitter_center: float = 0.1  # centre shift as a fraction of box size
    jitter_scale_min: float = 0.8
    jitter_scale_max: float = 1.25
    score_threshold: float = 0.2
    nms_threshold: float = 0.5
    max_per_role: int = 5
    smooth_l1_beta: float = 1.0


@dataclass
class InteractionSettings:
    """Stage-2 interaction predictor settings"""

    use_inter: bool = True
    use_intra: bool = True
    tw_mode: str = "spatial"  # spatial | concat
    intra_mode: str = "spatial"  # spatial | concat
    emission_threshold: float = 0.05
    freeze_backbone: bool = True


@dataclass
class TrainSettings:
    """One training stage"""

    epochs: int = 20
    learning_rate: float = 0.001
    milestones: tuple[int, ...] = (10, 15)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0001
    iou_assign_threshold: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    tw_loss_weight: float = 1.0
    max_steps: int = 0  # 0 means no cap
    validate: bool = True

    def check(self, section: str) -> None:
        if self.epochs <= 0:
            msg = f"{section}.epochs must be positive"
            raise ConfigError(msg)
        if self.learning_rate <= 0 or self.momentum < 0 or self.weight_decay < 0:
            msg = f"{section}: rates must be positive"
            raise ConfigError(msg)
        if any(m >= self.epochs for m in self.milestones):
            msg = f"{section}.milestones must be earlier than epochs={self.epochs}"
            raise ConfigError(msg)


@dataclass
class EvaluationSettings:
    iou_threshold: float = 0.5  # true positive needs IoU strictly above this
    clip_len: int = 300


@dataclass
class Config:
    """Configuration settings for the whole pipeline"""

    run: RunSettings = field(default_factory=RunSettings)
    scenario: ScenarioSettings = field(default_factory=ScenarioSettings)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    interaction: InteractionSettings = field(default_factory=InteractionSettings)
    stage1: TrainSettings = field(default_factory=TrainSettings)
    stage2: TrainSettings = field(
        default_factory=lambda: TrainSettings(learning_rate=0.0001, milestones=())
    )
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def reference_frames(self) -> int:
        return self.scenario.reference_frames

    def validate(self) -> None:
        scenario = self.scenario
        counts = (
            scenario.num_instrument_classes,
            scenario.num_tissue_classes,
            scenario.num_actions,
        )
        if min(counts) < 1:
            msg = "scenario class counts must be >= 1"
            raise ConfigError(msg)
        if not 0 <= scenario.reference_frames <= scenario.script_length - 1:
            msg = "scenario.reference_frames must lie in [0, script_length - 1]"
            raise ConfigError(msg)
        if len(scenario.action_weights) != scenario.num_actions:
            msg = "scenario.action_weights needs one weight per action"
            raise ConfigError(msg)
        if len(scenario.instrument_scripts) != scenario.num_instrument_classes:
            msg = "scenario.instrument_scripts needs one entry per instrument class"
            raise ConfigError(msg)
        if len(scenario.tissue_scripts) != scenario.num_tissue_classes:
            msg = "scenario.tissue_scripts needs one entry per tissue class"
            raise ConfigError(msg)
        for mode_key in ("tw_mode", "intra_mode"):
            if getattr(self.interaction, mode_key) not in ("spatial", "concat"):
                msg = f"interaction.{mode_key} must be 'spatial' or 'concat'"
                raise ConfigError(msg)
        self.stage1.check("stage1")
        self.stage2.check("stage2")

    def to_ini(self) -> str:
        """Render every setting back into the config-file format"""
        parser = configparser.ConfigParser()
        for section in dataclasses.fields(self):
            values = getattr(self, section.name)
            parser[section.name] = {
                f.name: _render_value(getattr(values, f.name))
                for f in dataclasses.fields(values)
            }
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode("utf-8")).hexdigest()

    def with_overrides(self, **sections: dict[str, Any]) -> "Config":
        """Copy with some fields replaced, e.g. ``detector={"use_scf": False}``"""
        updated = copy.deepcopy(self)
        for section, values in sections.items():
            target = getattr(updated, section)
            for key, value in values.items():
                if not hasattr(target, key):
                    msg = f"unknown config key '{section}.{key}'"
                    raise ConfigError(msg)
                setattr(target, key, value)
        return updated


# Named ablation variants, each a set of config overrides
ABLATIONS: dict[str, dict[str, dict[str, Any]]] = {
    "full": {},
    "no-scf": {"detector": {"use_scf": False}},
    "no-sca": {"detector": {"use_sca": False}},
    "ca-layer": {"detector": {"sca_spatial": False}},
    "no-tg": {"interaction": {"use_inter": False, "use_intra": False}},
    "intra": {"interaction": {"use_inter": False}},
    "intra-concat": {"interaction": {"use_inter": False, "intra_mode": "concat"}},
    "inter": {"interaction": {"use_intra": False}},
    "inter-concat": {"interaction": {"use_intra": False, "tw_mode": "concat"}},
}


def apply_ablation(config: Config, name: str) -> Config:
    if name not in ABLATIONS:
        msg = f"unknown ablation '{name}'; choose from {sorted(ABLATIONS)}"
        raise ConfigError(msg)
    return config.with_overrides(**ABLATIONS[name])


def _render_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    origin = typing.get_origin(annotation)
    try:
        if annotation is bool:
            lowered = raw.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if origin is tuple:
            item_type = typing.get_args(annotation)[0]
            items = [item.strip() for item in raw.split(",") if item.strip()]
            return tuple(item_type(item) for item in items)
        if isinstance(annotation, types.UnionType):
            annotation = typing.get_args(annotation)[0]
        return annotation(raw.strip())
    except ValueError as e:
        msg = f"invalid value {raw!r} for config key '{key}'"
        raise ConfigError(msg) from e


def load_config(path: str | Path | None = None) -> Config:
    """
    Read a sectioned key/value config file on top of the defaults.

    Args:
        path: INI-style file; None returns the defaults

    Returns:
        Validated Config, with ITID_SEED applied when set

    Raises:
        ConfigError: Unknown section or key, or a value of the wrong type
    """
    config = Config()
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
        section_names = {f.name for f in dataclasses.fields(config)}
        for section in parser.sections():
            if section not in section_names:
                msg = f"unknown config section '{section}'"
                raise ConfigError(msg)
            target = getattr(config, section)
            hints = typing.get_type_hints(type(target))
            for key, raw in parser[section].items():
                if key not in hints:
                    msg = f"unknown config key '{section}.{key}'"
                    raise ConfigError(msg)
                setattr(target, key, _coerce(raw, hints[key], f"{section}.{key}"))

    seed_override = os.getenv(SEED_ENV_VAR)
    if seed_override:
        config.run.seed = _coerce(seed_override, int, SEED_ENV_VAR)
    config.validate()
    return config
