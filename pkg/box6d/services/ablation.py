from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
import statistics
import time
from typing import Literal

from box6d.config import with_overrides
from box6d.schemas import PipelineConfig, ResultRow
from box6d.services.metrics import average_precision, iou_at
from box6d.services.pipeline import DimsMode, EstimationService, MaskSource, SceneResult

logger = logging.getLogger(__name__)

AblationKind = Literal["depth-filter", "early-stop", "dims"]
ABLATIONS: tuple[AblationKind, ...] = ("depth-filter", "early-stop", "dims")

FILTER_IOU = 0.80
EARLY_STOP_IOU = 0.90
DIMS_IOUS = (0.50, 0.70, 0.90)


@dataclass(slots=True)
class AblationRow:
    variant: str
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass(slots=True)
class AblationReport:
    which: AblationKind
    rows: list[AblationRow]
    summary: dict[str, float] = field(default_factory=dict)

    def format_table(self) -> str:
        columns = list(dict.fromkeys(key for row in self.rows for key in row.metrics))
        width = max(len("variant"), *(len(row.variant) for row in self.rows))
        lines = ["  ".join(["variant".ljust(width), *(c.rjust(14) for c in columns)])]
        for row in self.rows:
            cells = [f"{row.metrics[c]:.4f}".rjust(14) if c in row.metrics else "-".rjust(14) for c in columns]
            lines.append("  ".join([row.variant.ljust(width), *cells]))
        lines.extend(f"{name}: {value:.4f}" for name, value in self.summary.items())
        return "\n".join(lines)


def _rows(results: list[SceneResult]) -> list[ResultRow]:
    return [row for result in results for row in result.rows]


def _estimated(rows: list[ResultRow]) -> list[ResultRow]:
    return [row for row in rows if row.trace_reason not in {"missed", "failed"}]


class AblationRunner:
    """Paired on/off runs over one dataset with everything else held fixed."""

    def __init__(
        self,
        *,
        config: PipelineConfig,
        scene_dirs: list[Path],
        mask_source: MaskSource = "gt",
        jobs: int | None = None,
    ) -> None:
        self._config = config
        self._scene_dirs = scene_dirs
        self._mask_source = mask_source
        self._jobs = jobs

    async def _estimate(self, config: PipelineConfig, dims_mode: DimsMode = "search") -> list[ResultRow]:
        service = EstimationService(config=config, mask_source=self._mask_source, dims_mode=dims_mode, jobs=self._jobs)
        return _rows(await service.run(self._scene_dirs))

    async def depth_filter(self) -> AblationReport:
        """Pose precision with and without the filter, with ground-truth dimensions so only rotation choice differs."""
        rows = []
        for variant, enabled in (("without-filter", False), ("with-filter", True)):
            config = with_overrides(self._config, {"depthfilter.enabled": enabled})
            results = await self._estimate(config, dims_mode="oracle")
            precision = average_precision(results, iou_at(FILTER_IOU))
            logger.info("Depth-filter ablation %s: precision@IoU%.2f=%.4f", variant, FILTER_IOU, precision)
            rows.append(AblationRow(variant, {f"iou@{FILTER_IOU:.2f}": precision}))
        gain = rows[1].metrics[f"iou@{FILTER_IOU:.2f}"] - rows[0].metrics[f"iou@{FILTER_IOU:.2f}"]
        return AblationReport("depth-filter", rows, {"precision_gain": gain})

    async def early_stop(self, repeats: int | None = None) -> AblationReport:
        repeats = repeats or self._config.ablation.repeats
        rows = []
        for variant, enabled in (("binary-search", False), ("early-stop", True)):
            config = with_overrides(self._config, {"dimsearch.early_stop_enabled": enabled})
            wall_times: list[float] = []
            iterations: list[float] = []
            precision = 0.0
            for repeat in range(repeats):
                started = time.perf_counter()
                results = await self._estimate(config)
                estimated = _estimated(results)
                wall_times.extend(row.wall_time_s for row in estimated)
                iterations.extend(row.iterations for row in estimated)
                if repeat == 0:
                    # Outputs are deterministic; repeats only refine the timing.
                    precision = average_precision(results, iou_at(EARLY_STOP_IOU))
                logger.debug("%s repeat %d finished in %.2fs", variant, repeat + 1, time.perf_counter() - started)
            metrics = {
                "iterations_mean": statistics.fmean(iterations) if iterations else 0.0,
                "iterations_std": statistics.pstdev(iterations) if iterations else 0.0,
                "wall_time_mean": statistics.fmean(wall_times) if wall_times else 0.0,
                "wall_time_std": statistics.pstdev(wall_times) if wall_times else 0.0,
                f"iou@{EARLY_STOP_IOU:.2f}": precision,
            }
            logger.info(
                "Early-stop ablation %s: %.2f +/- %.2f iterations, %.3fs +/- %.3fs",
                variant,
                metrics["iterations_mean"],
                metrics["iterations_std"],
                metrics["wall_time_mean"],
                metrics["wall_time_std"],
            )
            rows.append(AblationRow(variant, metrics))

        baseline, candidate = rows[0].metrics, rows[1].metrics

        def reduction(key: str) -> float:
            return 1.0 - candidate[key] / baseline[key] if baseline[key] > 0 else 0.0

        summary = {
            "iteration_reduction": reduction("iterations_mean"),
            "wall_time_reduction": reduction("wall_time_mean"),
            "precision_drop": baseline[f"iou@{EARLY_STOP_IOU:.2f}"] - candidate[f"iou@{EARLY_STOP_IOU:.2f}"],
        }
        return AblationReport("early-stop", rows, summary)

    async def dims(self) -> AblationReport:
        rows = []
        for variant, mode in (("fixed-template", "fixed"), ("estimated", "search"), ("ground-truth", "oracle")):
            results = await self._estimate(self._config, dims_mode=mode)
            metrics = {f"iou@{t:.2f}": average_precision(results, iou_at(t)) for t in DIMS_IOUS}
            logger.info("Dimension ablation %s: %s", variant, metrics)
            rows.append(AblationRow(variant, metrics))
        return AblationReport("dims", rows)

    async def run(self, which: AblationKind, *, repeats: int | None = None) -> AblationReport:
        if which == "depth-filter":
            return await self.depth_filter()
        if which == "early-stop":
            return await self.early_stop(repeats)
        return await self.dims()
