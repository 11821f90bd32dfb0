"""
Named-parameter checkpoints.

``<stem>.bin`` holds every parameter as little-endian float64, back to
back; ``<stem>.manifest`` has one ``name shape offset`` line per tensor
(shape comma separated, offset in values) after ``# key=value`` metadata
lines.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from exceptions import CheckpointError, DimensionError
from layers import Module

logger = logging.getLogger(__name__)

FORMAT_VERSION = "1"
DTYPE = np.dtype("<f8")


@dataclass
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class CheckpointInfo:
    entries: list[ManifestEntry]
    metadata: dict[str, str] = field(default_factory=dict)


def checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    """(<stem>.bin, <stem>.manifest) for a stem or either file"""
    stem = Path(path)
    if stem.suffix in (".bin", ".manifest"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".bin"), stem.with_name(stem.name + ".manifest")


def save_checkpoint(
    model: Module, path: str | Path, metadata: dict[str, str] | None = None
) -> tuple[Path, Path]:
    bin_path, manifest_path = checkpoint_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# format={FORMAT_VERSION}"]
    lines.extend(f"# {key}={value}" for key, value in sorted((metadata or {}).items()))
    offset = 0
    chunks = []
    for name, param in model.named_parameters().items():
        shape = ",".join(str(extent) for extent in param.shape)
        lines.append(f"{name} {shape} {offset}")
        chunks.append(param.data.astype(DTYPE).reshape(-1))
        offset += param.data.size
    payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype=DTYPE)
    bin_path.write_bytes(payload.tobytes())
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("Saved %d tensors (%d values) to %s", len(chunks), offset, bin_path)
    return bin_path, manifest_path


def read_manifest(path: str | Path) -> CheckpointInfo:
    _, manifest_path = checkpoint_paths(path)
    if not manifest_path.exists():
        msg = f"checkpoint manifest not found: {manifest_path}"
        raise CheckpointError(msg)
    info = CheckpointInfo(entries=[])
    for number, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            info.metadata[key.strip()] = value.strip()
            continue
        try:
            name, shape, offset = line.split()
            dims = tuple(int(extent) for extent in shape.split(",") if extent)
            info.entries.append(ManifestEntry(name, dims, int(offset)))
        except ValueError as e:
            msg = f"{manifest_path}:{number}: malformed manifest line {line!r}"
            raise CheckpointError(msg) from e
    return info


def load_checkpoint(model: Module, path: str | Path) -> CheckpointInfo:
    """
    Copy stored values into ``model``'s parameters.

    Raises:
        CheckpointError: Missing files, or names that do not match the model
        DimensionError: A tensor whose stored shape differs from the model's
    """
    info = read_manifest(path)
    bin_path, _ = checkpoint_paths(path)
    if not bin_path.exists():
        msg = f"checkpoint data not found: {bin_path}"
        raise CheckpointError(msg)
    values = np.frombuffer(bin_path.read_bytes(), dtype=DTYPE)

    params = model.named_parameters()
    stored = {entry.name: entry for entry in info.entries}
    missing = sorted(set(params) - set(stored))
    unexpected = sorted(set(stored) - set(params))
    if missing or unexpected:
        msg = f"checkpoint does not match model: missing {missing}, unexpected {unexpected}"
        raise CheckpointError(msg)

    for name, param in params.items():
        entry = stored[name]
        if entry.shape != param.shape:
            msg = f"tensor '{name}': checkpoint shape {entry.shape}, model shape {param.shape}"
            raise DimensionError(msg)
        end = entry.offset + entry.size
        if end > len(values):
            msg = f"tensor '{name}' runs past the end of {bin_path}"
            raise CheckpointError(msg)
        param.data = values[entry.offset : end].astype(np.float64).reshape(entry.shape)
    return info
