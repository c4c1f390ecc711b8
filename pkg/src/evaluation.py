"""
Benchmark loading, Acc@IoU evaluation and ablation sweeps.

Annotation files follow either the ScanRefer layout (a bare list, or a
``"format": "scanrefer"`` header; boxes compared as AABBs) or the
EmbodiedScan layout (``"format": "embodiedscan"``; boxes compared as
yaw-oriented boxes). A ``"box_mode"`` header overrides the default.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from pydantic import ValidationError
from shapely.geometry import Polygon

from .config import PipelineConfig, PromptToggles
from .exceptions import AblationError, InputError, OutputError, UnigroundError
from .models import (
    AnnotationRecord,
    AxisAlignedBox,
    EvalReport,
    GroundingQuery,
    OrientedBox,
    QueryResult,
)
from .pipeline import GroundingPipeline, SceneSegmentation
from .reasoner import vlm_usage
from .scene_model import fit_aabb, fit_oriented_box

logger = logging.getLogger(__name__)

Box = AxisAlignedBox | OrientedBox

IOU_THRESHOLDS = (0.25, 0.5)
DEFAULT_BOX_MODE = {"scanrefer": "aabb", "embodiedscan": "obb"}
# recorded as query failures; numpy and Pillow raise ValueError and OSError subclasses
SCENE_FAILURES = (UnigroundError, ValidationError, ValueError, OSError)
PROMPT_ROWS: tuple[PromptToggles, ...] = (
    PromptToggles(),
    PromptToggles(spatial=False),
    PromptToggles(semantic=False),
    PromptToggles(visual_cot=False),
)


# ------------------------------------------------------------------ IoU


def iou_3d(a: Box, b: Box) -> float:
    """
    Intersection over union of two boxes.

    Two AABBs are intersected exactly; any oriented box is intersected by
    clipping the horizontal footprints and multiplying by the z overlap.
    A zero-volume box has IoU 0 against anything.
    """
    va, vb = a.volume, b.volume
    if va <= 0 or vb <= 0:
        return 0.0
    if isinstance(a, AxisAlignedBox) and isinstance(b, AxisAlignedBox):
        lo = np.maximum(a.min_corner, b.min_corner)
        hi = np.minimum(a.max_corner, b.max_corner)
        inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    else:
        oa = a.to_oriented() if isinstance(a, AxisAlignedBox) else a
        ob = b.to_oriented() if isinstance(b, AxisAlignedBox) else b
        z_lo = max(oa.center[2] - oa.half_extents[2], ob.center[2] - ob.half_extents[2])
        z_hi = min(oa.center[2] + oa.half_extents[2], ob.center[2] + ob.half_extents[2])
        if z_hi <= z_lo:
            return 0.0
        area = Polygon(oa.footprint()).intersection(Polygon(ob.footprint())).area
        inter = area * (z_hi - z_lo)
    union = va + vb - inter
    if union <= 0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


# ---------------------------------------------------------- annotations


class AnnotationSet(NamedTuple):
    records: list[AnnotationRecord]
    scenes_root: Path
    format: str


def _parse_box(raw: dict[str, Any], box_mode: str) -> OrientedBox:
    box = raw.get("box", raw)
    if "corners" in box:
        corners = np.asarray(box["corners"], dtype=np.float64).reshape(8, 3)
        if box_mode == "aabb":
            return fit_aabb(corners).to_oriented()
        return fit_oriented_box(corners)
    if "center" in box and "size" in box:
        center = np.asarray(box["center"], dtype=np.float64).reshape(3)
        size = np.asarray(box["size"], dtype=np.float64).reshape(3)
        if (size < 0).any():
            raise ValueError(f"negative box size {size.tolist()}")
        if box_mode == "aabb":
            return AxisAlignedBox(
                min_corner=tuple((center - size / 2).tolist()),
                max_corner=tuple((center + size / 2).tolist()),
            ).to_oriented()
        return OrientedBox(
            center=tuple(center.tolist()),
            half_extents=tuple(np.maximum(size / 2, 1e-6).tolist()),
            yaw=float(box.get("yaw", 0.0)),
        )
    raise ValueError("box needs 8 corners or center and size")


def load_annotations(path: str | Path) -> AnnotationSet:
    """
    Read an annotation file.

    Raises:
        InputError: If the file is unreadable or a record is malformed.
    """
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise InputError(f"Cannot read annotations {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"Invalid JSON in {path}: {e}") from e

    if isinstance(data, list):
        data = {"format": "scanrefer", "annotations": data}
    fmt = data.get("format", "scanrefer")
    if fmt not in DEFAULT_BOX_MODE:
        raise InputError(f"Unknown annotation format {fmt!r} in {path}")
    box_mode = data.get("box_mode", DEFAULT_BOX_MODE[fmt])
    if box_mode not in ("aabb", "obb"):
        raise InputError(f"Unknown box_mode {box_mode!r} in {path}")
    scenes_root = (path.parent / data.get("scenes_root", ".")).resolve()

    records = []
    for k, raw in enumerate(data.get("annotations", [])):
        try:
            scene_id = str(raw["scene_id"])
            ann_id = str(raw.get("ann_id", raw.get("query_id", k)))
            if not ann_id.startswith(scene_id):
                ann_id = f"{scene_id}_{ann_id}"
            records.append(
                AnnotationRecord(
                    scene_id=scene_id,
                    query_id=ann_id,
                    text=raw.get("description", raw.get("text", "")),
                    gt_box=_parse_box(raw, box_mode),
                    target_label=str(raw.get("object_name", "")),
                    object_id=int(raw.get("object_id", -1)),
                    box_mode=box_mode,
                )
            )
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise InputError(f"Annotation {k} in {path} is malformed: {e}") from e
    logger.info("Loaded %d annotations (%s, %s boxes) from %s", len(records), fmt, box_mode, path)
    return AnnotationSet(records=records, scenes_root=scenes_root, format=fmt)


# ----------------------------------------------------------- evaluation


def score_prediction(predicted: OrientedBox, record: AnnotationRecord) -> float:
    if record.box_mode == "aabb":
        return iou_3d(predicted.to_aabb(), record.gt_box.to_aabb())
    return iou_3d(predicted, record.gt_box)


def summarize(
    results: Sequence[QueryResult],
    provider_calls: dict[str, int] | None = None,
    timing: dict[str, float] | None = None,
) -> EvalReport:
    n = len(results)
    acc = [sum(1 for r in results if r.iou >= tau) / n if n else 0.0 for tau in IOU_THRESHOLDS]
    usage: Counter[str] = Counter()
    for r in results:
        usage.update(r.vlm_usage)
    return EvalReport(
        query_count=n,
        acc_025=acc[0],
        acc_05=acc[1],
        failures=sum(1 for r in results if r.error is not None),
        results=list(results),
        provider_calls=provider_calls or {},
        vlm_usage=dict(sorted(usage.items())),
        timing=timing or {},
    )


def _ground_one(
    pipeline: GroundingPipeline,
    segmentation: SceneSegmentation,
    record: AnnotationRecord,
    u: int | None,
    work_root: Path | None,
) -> QueryResult:
    work_dir = work_root / record.scene_id / record.query_id if work_root else None
    try:
        result = pipeline.ground(
            segmentation, GroundingQuery(text=record.text, query_id=record.query_id), u, work_dir
        )
    except SCENE_FAILURES as e:
        logger.error("Query %s failed: %s", record.query_id, e)
        return QueryResult(query_id=record.query_id, scene_id=record.scene_id, error=str(e))
    retained = any(
        score_prediction(c.instance.obb, record) >= IOU_THRESHOLDS[0] for c in result.candidates
    )
    return QueryResult(
        query_id=record.query_id,
        scene_id=record.scene_id,
        iou=score_prediction(result.box, record),
        predicted=result.box,
        selected=result.trace.selected,
        target_retained=retained,
        correction_rounds=result.trace.correction_rounds,
        vlm_usage=vlm_usage(result.trace),
    )


def evaluate(
    annotations: str | Path | AnnotationSet,
    config: PipelineConfig | None = None,
    pipeline: GroundingPipeline | None = None,
    u: int | None = None,
    work_root: str | Path | None = None,
) -> EvalReport:
    """
    Run both stages on every annotated query.

    Scenes are segmented once and shared by their queries, which run
    concurrently up to ``config.workers``. A scene that fails to load or
    segment turns all its queries into recorded failures.
    """
    if not isinstance(annotations, AnnotationSet):
        annotations = load_annotations(annotations)
    pipeline = pipeline or GroundingPipeline(config)
    work = Path(work_root) if work_root is not None else None
    calls_before = pipeline.providers.calls()
    start = time.perf_counter()

    by_scene: dict[str, list[int]] = {}
    for k, rec in enumerate(annotations.records):
        by_scene.setdefault(rec.scene_id, []).append(k)

    results: dict[int, QueryResult] = {}
    for scene_id, indices in by_scene.items():
        records = [annotations.records[k] for k in indices]
        try:
            segmentation = pipeline.load(annotations.scenes_root / scene_id)
        except SCENE_FAILURES as e:
            logger.error("Scene %s failed: %s", scene_id, e)
            for k, rec in zip(indices, records, strict=True):
                results[k] = QueryResult(query_id=rec.query_id, scene_id=scene_id, error=str(e))
            continue
        with ThreadPoolExecutor(max_workers=pipeline.config.workers) as pool:
            done = pool.map(lambda r: _ground_one(pipeline, segmentation, r, u, work), records)
            for k, res in zip(indices, done, strict=True):
                results[k] = res
        logger.info("Scene %s: %d queries evaluated", scene_id, len(records))

    calls_after = pipeline.providers.calls()
    calls = {name: calls_after[name] - calls_before.get(name, 0) for name in calls_after}
    timing = dict(pipeline.timing)
    timing["total"] = time.perf_counter() - start
    report = summarize([results[k] for k in sorted(results)], calls, timing)
    logger.info(
        "Acc@0.25 %.3f, Acc@0.5 %.3f over %d queries (%d failures)",
        report.acc_025,
        report.acc_05,
        report.query_count,
        report.failures,
    )
    return report


def timing_path(report_path: str | Path) -> Path:
    path = Path(report_path)
    return path.with_name(f"{path.stem}.timing.json")


def write_report(report: EvalReport, path: str | Path) -> None:
    """Write the canonical report JSON and its wall-clock timing sidecar."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        timing_path(path).write_text(
            json.dumps(report.timing, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError as e:
        raise OutputError(f"Failed to write report {path}: {e}") from e


# ------------------------------------------------------------- ablations


def write_csv(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    if not rows:
        raise OutputError(f"No rows to write to {path}")
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e


def ablate_candidates(
    annotations: str | Path | AnnotationSet,
    n_values: Sequence[int],
    pipeline: GroundingPipeline | None = None,
    out_csv: str | Path | None = None,
) -> list[dict[str, Any]]:
    """
    Accuracy for each candidate count, one row per N.

    Stage-1 results are computed once and reused across N.

    Raises:
        AblationError: If the N values are empty, not positive or not ascending.
    """
    if not n_values or any(n < 1 for n in n_values):
        raise AblationError("candidate counts must be positive")
    if any(a >= b for a, b in zip(n_values, n_values[1:], strict=False)):
        raise AblationError("candidate counts must be strictly ascending")
    if not isinstance(annotations, AnnotationSet):
        annotations = load_annotations(annotations)
    pipeline = pipeline or GroundingPipeline()

    rows = []
    for n in n_values:
        report = evaluate(annotations, pipeline=pipeline, u=n)
        rows.append(
            {
                "n": n,
                "acc_025": report.acc_025,
                "acc_05": report.acc_05,
                "retained": sum(r.target_retained for r in report.results)
                / max(1, report.query_count),
                "queries": report.query_count,
            }
        )
        logger.info("N=%d: Acc@0.25 %.3f, Acc@0.5 %.3f", n, report.acc_025, report.acc_05)
    if out_csv is not None:
        write_csv(rows, out_csv)
    return rows


def ablate_prompts(
    annotations: str | Path | AnnotationSet,
    pipeline: GroundingPipeline | None = None,
    toggles: Sequence[PromptToggles] = PROMPT_ROWS,
    out_csv: str | Path | None = None,
) -> list[dict[str, Any]]:
    """
    Accuracy for each prompting-component combination, one row per entry.

    Raises:
        AblationError: If a combination switches every component off.
    """
    for row in toggles:
        if not (row.spatial or row.semantic or row.visual_cot):
            raise AblationError("at least one prompting component must stay enabled")
    if not isinstance(annotations, AnnotationSet):
        annotations = load_annotations(annotations)
    base = pipeline or GroundingPipeline()

    rows = []
    for row in toggles:
        config = base.config.model_copy(
            update={"reasoner": base.config.reasoner.model_copy(update={"toggles": row})}
        )
        report = evaluate(annotations, pipeline=base.derive(config))
        rows.append(
            {
                "toggles": row.label,
                "spatial": row.spatial,
                "semantic": row.semantic,
                "visual_cot": row.visual_cot,
                "acc_025": report.acc_025,
                "acc_05": report.acc_05,
                "vlm_calls": report.provider_calls.get("vlm", 0),
            }
        )
        logger.info("%s: Acc@0.25 %.3f", row.label, report.acc_025)
    if out_csv is not None:
        write_csv(rows, out_csv)
    return rows
