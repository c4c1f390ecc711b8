"""
Stage-2 visual prompts: orbit renders with axis and id overlays, and native
frames of each candidate with its 2-D box drawn.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Sequence
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .config import ViewsConfig
from .exceptions import InputError, OutputError
from .models import (
    AxisAlignedBox,
    CameraIntrinsics,
    Candidate,
    CandidateView,
    CandidateViewSet,
    GlobalRender,
    OrbitCameraSpec,
    PointCloud,
    Pose,
)
from .projection import ViewCache, project_points, splat_fragments
from .utils import BACKGROUND_GRAY

logger = logging.getLogger(__name__)

MIN_LABEL_GAP = 10.0
MAX_SPLAT_RADIUS = 64
AXIS_COLORS = {"x": (255, 0, 0), "y": (0, 200, 0), "z": (0, 0, 255)}
BOX_COLOR = (255, 0, 0)


class Rendering(NamedTuple):
    image: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W), +inf on background
    index: np.ndarray  # (H, W) source point index, -1 on background


def default_orbit_spec(bounds: AxisAlignedBox, config: ViewsConfig) -> OrbitCameraSpec:
    """Orbit radius and height derived from the horizontal diagonal and height of ``bounds``."""
    dx, dy, dz = bounds.size.tolist()
    diag = math.hypot(dx, dy)
    r_min = max(diag / 2, 1e-3)
    return OrbitCameraSpec(
        r=max(r_min, diag * config.r_scale),
        h=max(config.h_min, dz + config.height_margin),
        r_min=r_min,
        h_min=config.h_min,
        azimuths=tuple(math.radians(a) for a in config.azimuths_deg),
    )


def _centers(
    candidates: Sequence[Candidate] | Sequence[Sequence[float]] | np.ndarray,
) -> np.ndarray:
    rows = [c.instance.obb.center if isinstance(c, Candidate) else c for c in candidates]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def orbit_positions(
    candidates: Sequence[Candidate] | Sequence[Sequence[float]] | np.ndarray,
    spec: OrbitCameraSpec,
) -> list[Pose]:
    """One camera per azimuth at mean center + (r cos t, r sin t, h), looking at the mean center."""
    centers = _centers(candidates)
    if not len(centers):
        raise InputError("orbit needs at least one candidate")
    target = centers.mean(axis=0)
    return [
        Pose.look_at(
            target + np.array([spec.r * math.cos(t), spec.r * math.sin(t), spec.h]), target
        )
        for t in spec.azimuths
    ]


def render_scene(
    cloud: PointCloud,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    base_radius: float = 0.015,
) -> Rendering:
    """
    Z-buffered splat rendering on a neutral gray background.

    A point's disc radius is max(1, round(base_radius * fx / depth)) pixels.
    The nearest fragment wins each pixel; equal depths go to the lower point index.
    """
    h, w = intrinsics.height, intrinsics.width
    image = np.empty((h * w, 3), dtype=np.uint8)
    image[:] = BACKGROUND_GRAY
    depth = np.full(h * w, np.inf)
    index = np.full(h * w, -1, dtype=np.int64)

    proj = project_points(cloud.positions, pose, intrinsics)
    cols, rows = proj.cells()
    if len(cols):
        src_idx = np.flatnonzero(proj.in_view)
        z = proj.depth[src_idx]
        radii = np.clip(np.round(base_radius * intrinsics.fx / z), 1, MAX_SPLAT_RADIUS)
        cells, src = splat_fragments(cols, rows, radii.astype(np.int64), w, h)
        order = np.lexsort((src_idx[src], z[src], cells))
        cells, src = cells[order], src[order]
        first = np.concatenate([[True], cells[1:] != cells[:-1]])
        cells, src = cells[first], src[first]
        image[cells] = cloud.colors[src_idx[src]]
        depth[cells] = z[src]
        index[cells] = src_idx[src]

    return Rendering(
        image=image.reshape(h, w, 3), depth=depth.reshape(h, w), index=index.reshape(h, w)
    )


def _project_one(point: np.ndarray, pose: Pose, k: CameraIntrinsics) -> tuple[float, float, float]:
    cam = pose.world_to_camera(np.asarray(point, dtype=np.float64).reshape(1, 3))[0]
    if cam[2] <= 0:
        return math.nan, math.nan, float(cam[2])
    return k.fx * cam[0] / cam[2] + k.cx, k.fy * cam[1] / cam[2] + k.cy, float(cam[2])


def _nudge(
    anchor: tuple[float, float], placed: list[tuple[float, float]], width: int, height: int
) -> tuple[float, float]:
    """Closest free spot to ``anchor`` at least MIN_LABEL_GAP from every placed label."""

    def free(p: tuple[float, float]) -> bool:
        return all(math.dist(p, q) >= MIN_LABEL_GAP for q in placed)

    if free(anchor):
        return anchor
    step = MIN_LABEL_GAP + 2
    directions = [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (-1, 1), (1, -1), (-1, -1)]
    for ring in range(1, 200):
        for dx, dy in directions:
            p = (
                min(max(anchor[0] + dx * ring * step, 0.0), width - 1.0),
                min(max(anchor[1] + dy * ring * step, 0.0), height - 1.0),
            )
            if free(p):
                return p
    return anchor


def annotate_global(
    rendering: Rendering,
    pose: Pose,
    intrinsics: CameraIntrinsics,
    candidates: Sequence[Candidate],
    origin: Sequence[float],
    world_axes_length: float = 0.5,
    label_tol: float = 0.2,
    azimuth: float = 0.0,
) -> GlobalRender:
    """
    Draw the world axes from ``origin`` and each visible candidate's id.

    A candidate is labelled at the projection of its box center when that
    center is in the frustum and no rendered surface lies in front of the
    box by more than ``label_tol``. Other candidates go to ``hidden_ids``.
    """
    k = intrinsics
    img = Image.fromarray(rendering.image.copy())
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()

    o = np.asarray(origin, dtype=np.float64)
    ou, ov, oz = _project_one(o, pose, k)
    axes_drawn = False
    if oz > 0:
        for axis, unit in zip("xyz", np.eye(3), strict=True):
            eu, ev, ez = _project_one(o + world_axes_length * unit, pose, k)
            if ez <= 0:
                continue
            draw.line([(ou, ov), (eu, ev)], fill=AXIS_COLORS[axis], width=3)
            draw.text((eu + 3, ev + 3), f"+{axis}", fill=AXIS_COLORS[axis], font=font)
            axes_drawn = True

    overlay: dict[int, tuple[float, float]] = {}
    hidden: list[int] = []
    placed: list[tuple[float, float]] = []
    for cand in sorted(candidates, key=lambda c: c.candidate_id):
        box = cand.instance.obb
        u, v, z = _project_one(np.array(box.center), pose, k)
        if z <= 0 or not (0 <= u < k.width and 0 <= v < k.height):
            hidden.append(cand.candidate_id)
            continue
        surface = rendering.depth[int(v), int(u)]
        reach = float(np.linalg.norm(box.half_extents))
        if np.isfinite(surface) and z - reach > surface + label_tol:
            hidden.append(cand.candidate_id)
            continue
        anchor = _nudge((u, v), placed, k.width, k.height)
        placed.append(anchor)
        overlay[cand.candidate_id] = anchor
        text = str(cand.candidate_id)
        x0, y0, x1, y1 = draw.textbbox(anchor, text, font=font, anchor="mm")
        draw.rectangle([x0 - 2, y0 - 2, x1 + 2, y1 + 2], fill=(255, 255, 255), outline=(0, 0, 0))
        draw.text(anchor, text, fill=(0, 0, 0), font=font, anchor="mm")

    if hidden:
        logger.debug("Candidates %s not labelled at azimuth %.2f", hidden, azimuth)
    return GlobalRender(
        image=np.asarray(img),
        depth=rendering.depth,
        camera=pose,
        intrinsics=k,
        azimuth=azimuth,
        overlay_ids=overlay,
        hidden_ids=tuple(hidden),
        axes_drawn=axes_drawn,
    )


def render_global_views(
    cloud: PointCloud,
    candidates: Sequence[Candidate],
    spec: OrbitCameraSpec,
    config: ViewsConfig,
    floor_z: float,
) -> list[GlobalRender]:
    """Annotated orbit renders around the candidates' mean center."""
    k = config.intrinsics()
    center = _centers(candidates).mean(axis=0)
    origin = (center[0], center[1], floor_z)
    renders = []
    for pose, theta in zip(orbit_positions(candidates, spec), spec.azimuths, strict=True):
        rendering = render_scene(cloud, pose, k, config.base_radius)
        renders.append(
            annotate_global(
                rendering, pose, k, candidates, origin, config.axes_length, config.label_tol, theta
            )
        )
    return renders


def best_spread_subset(positions: dict[int, np.ndarray], l: int) -> tuple[int, ...]:  # noqa: E741
    """
    Size-``l`` subset maximising the sum of pairwise distances.

    Ties go to the first subset in lexicographic order.
    """
    ids = sorted(positions)
    if len(ids) <= l:
        return tuple(ids)
    best: tuple[int, ...] = ()
    best_score = -math.inf
    for subset in itertools.combinations(ids, l):
        score = sum(
            float(np.linalg.norm(positions[a] - positions[b]))
            for a, b in itertools.combinations(subset, 2)
        )
        if score > best_score:
            best, best_score = subset, score
    return best


def _draw_box(image: np.ndarray, box: tuple[int, int, int, int]) -> np.ndarray:
    img = Image.fromarray(np.ascontiguousarray(image))
    ImageDraw.Draw(img).rectangle(box, outline=BOX_COLOR, width=3)
    return np.asarray(img)


def _cells_box(cells: np.ndarray, width: int) -> tuple[int, int, int, int]:
    rows, cols = cells // width, cells % width
    return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


def select_candidate_views(
    candidate: Candidate,
    cache: ViewCache,
    l: int = 3,  # noqa: E741
    config: ViewsConfig | None = None,
) -> CandidateViewSet:
    """
    Native frames showing ``candidate`` large and from spread-out positions.

    The top 2l frames by pixel proportion are filtered to the size-l subset
    with the largest pairwise camera distance sum. A candidate no frame
    shows gets l orbit renders instead.
    """
    if l < 1:
        raise InputError("l must be at least 1")
    config = config or ViewsConfig()
    scene = cache.scene
    idx = candidate.instance.point_indices
    visible = {f.frame_id: cache.visible_cells(idx, f.frame_id) for f in scene.frames}
    proportion = {
        f.frame_id: len(visible[f.frame_id]) / (f.intrinsics.width * f.intrinsics.height)
        for f in scene.frames
        if len(visible[f.frame_id])
    }
    if not proportion:
        return _fallback_views(candidate, cache, l, config)

    top = sorted(proportion, key=lambda fid: (-proportion[fid], fid))[: 2 * l]
    chosen = best_spread_subset({fid: scene.frame(fid).pose.position for fid in top}, l)
    views = []
    for fid in chosen:
        frame = scene.frame(fid)
        box = _cells_box(visible[fid], frame.intrinsics.width)
        views.append(CandidateView(frame_id=fid, image=_draw_box(frame.rgb, box), box2d=box))
    return CandidateViewSet(candidate_id=candidate.candidate_id, views=views)


def _fallback_views(
    candidate: Candidate, cache: ViewCache, l: int, config: ViewsConfig  # noqa: E741
) -> CandidateViewSet:
    logger.debug("Candidate %d in no frame; using orbit renders", candidate.candidate_id)
    base = default_orbit_spec(candidate.instance.aabb, config)
    start = math.radians(config.azimuths_deg[0])
    spec = base.model_copy(
        update={"azimuths": tuple(start + 2 * math.pi * j / l for j in range(l))}
    )
    k = config.intrinsics()
    member = np.zeros(cache.scene.cloud.point_count, dtype=bool)
    member[candidate.instance.point_indices] = True
    views = []
    for pose in orbit_positions([candidate], spec):
        rendering = render_scene(cache.scene.cloud, pose, k, config.base_radius)
        flat = rendering.index.reshape(-1)
        cells = np.flatnonzero((flat >= 0) & member[np.maximum(flat, 0)])
        if len(cells):
            box = _cells_box(cells, k.width)
            image = _draw_box(rendering.image, box)
        else:
            box = (0, 0, k.width - 1, k.height - 1)
            image = rendering.image
        views.append(CandidateView(frame_id=None, image=image, box2d=box))
    return CandidateViewSet(candidate_id=candidate.candidate_id, views=views, fallback=True)


def write_prompt_images(
    work_dir: str | Path,
    global_renders: Sequence[GlobalRender],
    view_sets: Sequence[CandidateViewSet],
) -> dict[str, Path]:
    """Save ``global_{k}.png`` and ``cand_{id}_{j}.png``; returns name -> path."""
    root = Path(work_dir)
    written: dict[str, Path] = {}
    try:
        root.mkdir(parents=True, exist_ok=True)
        for k, render in enumerate(global_renders):
            path = root / f"global_{k}.png"
            Image.fromarray(render.image).save(path)
            written[path.name] = path
        for vs in view_sets:
            for j, view in enumerate(vs.views):
                path = root / f"cand_{vs.candidate_id}_{j}.png"
                Image.fromarray(view.image).save(path)
                written[path.name] = path
    except OSError as e:
        raise OutputError(f"Failed to write prompt images to {root}: {e}") from e
    return written
