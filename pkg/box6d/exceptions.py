from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from box6d.services.dimsearch import SearchTrace


class Box6DError(RuntimeError):
    """Base error for the box pose and dimension pipeline."""


class InvalidArgumentError(Box6DError, ValueError):
    pass


class BehindCameraError(Box6DError):
    def __init__(self, z: float) -> None:
        super().__init__(f"Point is behind the camera: z={z}")
        self.z = z


class EmptyMaskError(Box6DError):
    def __init__(self, instance: int | None = None) -> None:
        detail = f" for instance {instance}" if instance is not None else ""
        super().__init__(f"Mask has no pixels{detail}")
        self.instance = instance


class EmptyCloudError(Box6DError):
    def __init__(self, instance: int | None = None) -> None:
        detail = f" for instance {instance}" if instance is not None else ""
        super().__init__(f"No valid depth pixels{detail}")
        self.instance = instance


class DegenerateCloudError(Box6DError):
    pass


class RankError(Box6DError):
    pass


class DegenerateExtentError(Box6DError):
    def __init__(self, axis: int) -> None:
        super().__init__(f"Rendered extent is zero on observable axis {axis}")
        self.axis = axis


class PlacementError(Box6DError):
    def __init__(self, *, n_boxes: int, attempts: int) -> None:
        super().__init__(f"Could not place {n_boxes} boxes without overlap after {attempts} attempts")
        self.n_boxes = n_boxes
        self.attempts = attempts


class DatasetIOError(Box6DError):
    def __init__(self, path: Path, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class DatasetParseError(DatasetIOError):
    def __init__(self, path: Path, offset: int, message: str) -> None:
        super().__init__(path, f"offset {offset}: {message}")
        self.offset = offset
        self.detail = message


@dataclass(slots=True)
class ConfigLineError:
    line_number: int
    message: str


class ConfigFormatError(Box6DError):
    def __init__(self, errors: list[ConfigLineError]) -> None:
        detail = "; ".join(f"line {err.line_number}: {err.message}" for err in errors)
        super().__init__(f"Invalid config - {detail}")
        self.errors = errors


class ConfigValueError(Box6DError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"Invalid value for {field}: {message}")
        self.field = field
        self.message = message


class PoseEstimationError(Box6DError):
    def __init__(self, message: str, *, trace: SearchTrace | None = None) -> None:
        super().__init__(message)
        self.trace = trace


class DimensionSearchError(Box6DError):
    def __init__(self, message: str, *, trace: SearchTrace | None = None) -> None:
        super().__init__(message)
        self.trace = trace


class UndefinedMetricError(Box6DError):
    def __init__(self, message: str = "Metric is undefined on an empty dataset") -> None:
        super().__init__(message)


@dataclass(slots=True)
class CSVRowError:
    row_number: int
    message: str


class ResultsFormatError(DatasetIOError):
    def __init__(self, path: Path, errors: list[CSVRowError]) -> None:
        detail = "; ".join(f"row {err.row_number}: {err.message}" for err in errors)
        super().__init__(path, f"invalid results CSV - {detail}")
        self.errors = errors
