"""
Pinhole projection with z-buffer visibility.

Produces the per-view visible/total pixel counts and mask-feature vectors
that drive the superpoint affinity.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np

from .models import (
    CameraIntrinsics,
    Frame,
    MaskSet,
    PointCloud,
    Pose,
    Scene,
    Superpoint,
    ViewObservation,
)

logger = logging.getLogger(__name__)

DEFAULT_OCCLUSION_TOL = 0.05


class ProjectedPoints(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    in_view: np.ndarray

    def cells(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer (col, row) of the in-view points."""
        return (
            np.floor(self.u[self.in_view]).astype(np.int64),
            np.floor(self.v[self.in_view]).astype(np.int64),
        )


def project_points(
    points: np.ndarray, pose: Pose, intrinsics: CameraIntrinsics
) -> ProjectedPoints:
    """Project world points; points behind the camera or off the half-open image are culled."""
    cam = pose.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    in_view = (
        (z > 0)
        & np.isfinite(u)
        & np.isfinite(v)
        & (u >= 0)
        & (u < intrinsics.width)
        & (v >= 0)
        & (v < intrinsics.height)
    )
    return ProjectedPoints(u=u, v=v, depth=z, in_view=in_view)


def disc_offsets(radius: int) -> np.ndarray:
    """Integer (dx, dy) offsets with dx^2 + dy^2 <= radius^2."""
    r = int(radius)
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d, indexing="xy")
    keep = dx**2 + dy**2 <= r * r
    return np.column_stack([dx[keep], dy[keep]])


def splat_fragments(
    cols: np.ndarray,
    rows: np.ndarray,
    radii: np.ndarray,
    width: int,
    height: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Expand each point into disc fragments.

    Returns:
        (flat cell index, source point position in the input arrays) per fragment.
    """
    cells: list[np.ndarray] = []
    sources: list[np.ndarray] = []
    radii = np.asarray(radii, dtype=np.int64)
    for r in np.unique(radii):
        sel = np.flatnonzero(radii == r)
        for dx, dy in disc_offsets(int(r)):
            c = cols[sel] + dx
            rr = rows[sel] + dy
            ok = (c >= 0) & (c < width) & (rr >= 0) & (rr < height)
            cells.append(rr[ok] * width + c[ok])
            sources.append(sel[ok])
    if not cells:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(cells), np.concatenate(sources)


def build_zbuffer(cloud: PointCloud, frame: Frame, splat_radius: int = 1) -> np.ndarray:
    """Per-pixel minimum depth of the splatted cloud; empty cells hold +inf."""
    k = frame.intrinsics
    zbuf = np.full(k.height * k.width, np.inf)
    proj = project_points(cloud.positions, frame.pose, k)
    cols, rows = proj.cells()
    if len(cols):
        depth = proj.depth[proj.in_view]
        radii = np.full(len(cols), splat_radius)
        cells, src = splat_fragments(cols, rows, radii, k.width, k.height)
        np.minimum.at(zbuf, cells, depth[src])
    return zbuf.reshape(k.height, k.width)


def visible_cells(
    points: np.ndarray,
    frame: Frame,
    zbuffer: np.ndarray,
    occlusion_tol: float = DEFAULT_OCCLUSION_TOL,
) -> tuple[np.ndarray, np.ndarray]:
    """Distinct flat cell indices of the projected points: (all projected, visible)."""
    k = frame.intrinsics
    proj = project_points(points, frame.pose, k)
    cols, rows = proj.cells()
    if len(cols) == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    cells = rows * k.width + cols
    depth = proj.depth[proj.in_view]
    measured = frame.depth.reshape(-1)[cells]
    visible = (depth <= zbuffer.reshape(-1)[cells] + occlusion_tol) & (
        (measured == 0) | (depth <= measured + occlusion_tol)
    )
    return np.unique(cells), np.unique(cells[visible])


def observe_superpoint(
    sp: Superpoint,
    cloud: PointCloud,
    frame: Frame,
    zbuffer: np.ndarray,
    masks: MaskSet,
    occlusion_tol: float = DEFAULT_OCCLUSION_TOL,
) -> ViewObservation:
    """
    Visible/total pixel counts and the mask-coverage feature of one superpoint.

    Entry j of the feature is the fraction of visible cells inside mask j.
    Overlapping masks are rescaled so the entries still sum to at most 1.
    """
    return observe_points(
        sp.point_indices, cloud, frame, zbuffer, masks, occlusion_tol
    )


def observe_points(
    point_indices: np.ndarray,
    cloud: PointCloud,
    frame: Frame,
    zbuffer: np.ndarray,
    masks: MaskSet,
    occlusion_tol: float = DEFAULT_OCCLUSION_TOL,
) -> ViewObservation:
    total, visible = visible_cells(
        cloud.positions[point_indices], frame, zbuffer, occlusion_tol
    )
    n_vis = len(visible)
    feature = np.zeros(masks.n)
    if n_vis and masks.n:
        hits = masks.masks.reshape(masks.n, -1)[:, visible].sum(axis=1).astype(np.float64)
        feature = hits / max(float(n_vis), float(hits.sum()))
    return ViewObservation(
        frame_id=frame.frame_id,
        visible_pixels=n_vis,
        total_pixels=len(total),
        mask_feature=tuple(feature.tolist()),
    )


class ViewCache:
    """Lazily built z-buffers of one scene, shared read-only across stages."""

    def __init__(
        self,
        scene: Scene,
        splat_radius: int = 1,
        occlusion_tol: float = DEFAULT_OCCLUSION_TOL,
    ):
        self.scene = scene
        self.splat_radius = splat_radius
        self.occlusion_tol = occlusion_tol
        self._zbuffers: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def zbuffer(self, frame_id: int) -> np.ndarray:
        with self._lock:
            cached = self._zbuffers.get(frame_id)
        if cached is not None:
            return cached
        # concurrent builds of one frame are equal; the first insert wins
        zbuf = build_zbuffer(self.scene.cloud, self.scene.frame(frame_id), self.splat_radius)
        with self._lock:
            return self._zbuffers.setdefault(frame_id, zbuf)

    def visible_cells(self, point_indices: np.ndarray, frame_id: int) -> np.ndarray:
        frame = self.scene.frame(frame_id)
        _, visible = visible_cells(
            self.scene.cloud.positions[point_indices],
            frame,
            self.zbuffer(frame_id),
            self.occlusion_tol,
        )
        return visible

    def visible_pixel_counts(self, point_indices: np.ndarray) -> dict[int, int]:
        """Frame id -> number of distinct visible cells of the point set."""
        return {
            f.frame_id: len(self.visible_cells(point_indices, f.frame_id))
            for f in self.scene.frames
        }

    def observe(
        self, point_indices: np.ndarray, masks: dict[int, MaskSet]
    ) -> list[ViewObservation]:
        """Observations of a point set in every frame where it projects."""
        out = []
        for f in self.scene.frames:
            obs = observe_points(
                point_indices,
                self.scene.cloud,
                f,
                self.zbuffer(f.frame_id),
                masks[f.frame_id],
                self.occlusion_tol,
            )
            if obs.total_pixels:
                out.append(obs)
        return out


def observe_scene(
    superpoints: list[Superpoint],
    cache: ViewCache,
    masks: dict[int, MaskSet],
    workers: int = 4,
) -> dict[int, list[ViewObservation]]:
    """Observations of every superpoint, keyed by sp_id; frames processed concurrently."""
    scene = cache.scene

    def per_frame(frame: Frame) -> list[tuple[int, ViewObservation]]:
        zbuf = cache.zbuffer(frame.frame_id)
        rows = []
        for sp in superpoints:
            obs = observe_superpoint(
                sp, scene.cloud, frame, zbuf, masks[frame.frame_id], cache.occlusion_tol
            )
            if obs.total_pixels:
                rows.append((sp.sp_id, obs))
        return rows

    result: dict[int, list[ViewObservation]] = {sp.sp_id: [] for sp in superpoints}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for rows in pool.map(per_frame, scene.frames):
            for sp_id, obs in rows:
                result[sp_id].append(obs)
    logger.debug(
        "Observed %d superpoints across %d frames", len(superpoints), len(scene.frames)
    )
    return result
