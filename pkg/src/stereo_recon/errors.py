from __future__ import annotations

from pathlib import Path


EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NAN = 3


class GeometryError(ValueError):
    pass


class DomainError(GeometryError):
    """An argument lies outside the domain of a geometric operation."""


class BehindCameraError(GeometryError):
    pass


class DegenerateShapeError(GeometryError):
    pass


class ShapeMismatchError(ValueError):
    pass


class InputDomainError(ValueError):
    """Points handed to the shape model lie outside the unit ball."""


class CapacityError(ValueError):
    pass


class EmptyPointSetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ConfigMismatchError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


class SchemaVersionError(DatasetError):
    pass


class SceneLoadError(DatasetError):
    def __init__(self, scene_id: str, reason: str):
        super().__init__(f"scene {scene_id}: {reason}")
        self.scene_id = scene_id
        self.reason = reason


class EvaluationError(RuntimeError):
    pass


class FrozenModelError(RuntimeError):
    pass


class NaNLossError(RuntimeError):
    def __init__(self, step: int, last_checkpoint: Path | None):
        where = str(last_checkpoint) if last_checkpoint else "none written yet"
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {where}")
        self.step = step
        self.last_checkpoint = last_checkpoint
