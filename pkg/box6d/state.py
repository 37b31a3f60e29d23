from __future__ import annotations

import asyncio
import copy
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Literal

from box6d.schemas import ResultRow

SceneStatusLiteral = Literal[
    "processing",
    "completed",
    "completed_with_failures",
    "failed",
]


@dataclass(slots=True)
class InstanceRecord:
    instance_id: int
    status: Literal["estimated", "failed"]
    reason: str | None = None
    error: str | None = None


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(slots=True)
class SceneSnapshot:
    scene_id: str
    status: SceneStatusLiteral
    started_at: datetime = field(default_factory=_utcnow)
    updated_at: datetime = field(default_factory=_utcnow)
    processing_time_seconds: float | None = None
    error: str | None = None
    instances: list[InstanceRecord] = field(default_factory=list)
    rows: list[ResultRow] = field(default_factory=list)
    trace_rows: list[dict[str, object]] = field(default_factory=list)

    def clone(self) -> SceneSnapshot:
        """Return a deep copy so external callers cannot mutate internal state."""
        return copy.deepcopy(self)


class RunStore:
    """In-memory per-scene progress and results for one estimation run."""

    def __init__(self) -> None:
        self._scenes: dict[str, SceneSnapshot] = {}
        self._lock = asyncio.Lock()

    async def begin_scene(self, scene_id: str) -> None:
        async with self._lock:
            self._scenes[scene_id] = SceneSnapshot(scene_id=scene_id, status="processing")

    async def record_instance(self, scene_id: str, record: InstanceRecord) -> None:
        async with self._lock:
            snapshot = self._get_existing(scene_id)
            snapshot.instances = [r for r in snapshot.instances if r.instance_id != record.instance_id]
            snapshot.instances.append(record)
            snapshot.instances.sort(key=lambda r: r.instance_id)
            snapshot.updated_at = _utcnow()

    async def complete_scene(
        self,
        scene_id: str,
        *,
        rows: list[ResultRow],
        trace_rows: list[dict[str, object]],
        processing_time_seconds: float,
    ) -> SceneSnapshot:
        async with self._lock:
            snapshot = self._get_existing(scene_id)
            snapshot.rows = list(rows)
            snapshot.trace_rows = list(trace_rows)
            snapshot.processing_time_seconds = processing_time_seconds
            snapshot.updated_at = _utcnow()
            if any(record.status == "failed" for record in snapshot.instances):
                snapshot.status = "completed_with_failures"
            else:
                snapshot.status = "completed"
            return snapshot.clone()

    async def fail_scene(self, scene_id: str, error: str) -> SceneSnapshot:
        async with self._lock:
            snapshot = self._get_existing(scene_id)
            snapshot.status = "failed"
            snapshot.error = error
            snapshot.updated_at = _utcnow()
            return snapshot.clone()

    async def ordered_snapshots(self, scene_ids: list[str]) -> list[SceneSnapshot]:
        """Snapshots in the caller's order, which keeps output independent of completion order."""
        async with self._lock:
            return [self._get_existing(scene_id).clone() for scene_id in scene_ids]

    def _get_existing(self, scene_id: str) -> SceneSnapshot:
        snapshot = self._scenes.get(scene_id)
        if snapshot is None:
            raise KeyError(f"Unknown scene_id: {scene_id}")
        return snapshot
