"""
Scene loading and box fitting.

A scene directory holds ``cloud.ply`` (binary little-endian, x y z red green
blue) and a ``frames/`` folder with ``color_%06d.png``, ``depth_%06d.png``
(16-bit millimetres), ``pose_%06d.txt`` (4x4 camera-to-world, row-major) and
a single ``intrinsics.txt`` (fx fy cx cy width height).
"""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement
from pydantic import ValidationError
from scipy.spatial import ConvexHull, QhullError

from .exceptions import (
    EmptySelectionError,
    MissingFrameFileError,
    MissingPoseError,
    OutputError,
    PoseError,
    SceneLoadError,
)
from .models import (
    MIN_HALF_EXTENT,
    AxisAlignedBox,
    CameraIntrinsics,
    Frame,
    OrientedBox,
    PointCloud,
    Pose,
    Scene,
)

logger = logging.getLogger(__name__)

CLOUD_FILE = "cloud.ply"
FRAMES_DIR = "frames"
INTRINSICS_FILE = "intrinsics.txt"
POSE_TOL = 1e-3
DEPTH_SCALE = 1000.0  # millimetres per metre

_COLOR_RE = re.compile(r"^color_(\d{6})\.png$")


def _read_cloud(path: Path) -> PointCloud:
    if not path.exists():
        raise SceneLoadError("point cloud file not found", path=str(path))
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"]
        positions = np.column_stack([np.asarray(v[a], dtype=np.float64) for a in "xyz"])
        colors = np.column_stack([np.asarray(v[a]) for a in ("red", "green", "blue")])
        return PointCloud(positions=positions, colors=colors)
    except (ValueError, KeyError, OSError, ValidationError) as e:
        raise SceneLoadError(f"corrupt point cloud: {e}", path=str(path)) from e


def _read_intrinsics(path: Path) -> CameraIntrinsics:
    if not path.exists():
        raise SceneLoadError("intrinsics file not found", path=str(path))
    try:
        values = path.read_text(encoding="utf-8").split()
        fx, fy, cx, cy = (float(x) for x in values[:4])
        width, height = int(values[4]), int(values[5])
        return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
    except (ValueError, IndexError, ValidationError) as e:
        raise SceneLoadError(f"invalid intrinsics: {e}", path=str(path)) from e


def _read_frame(frames_dir: Path, frame_id: int, intrinsics: CameraIntrinsics) -> Frame:
    color_path = frames_dir / f"color_{frame_id:06d}.png"
    depth_path = frames_dir / f"depth_{frame_id:06d}.png"
    pose_path = frames_dir / f"pose_{frame_id:06d}.txt"
    if not pose_path.exists():
        raise MissingPoseError(frame_id, path=str(pose_path))
    if not depth_path.exists():
        raise MissingFrameFileError(frame_id, "depth", path=str(depth_path))

    try:
        matrix = np.loadtxt(pose_path, dtype=np.float64).reshape(4, 4)
        pose = Pose.from_matrix(matrix, tol=POSE_TOL)
    except ValueError as e:
        raise PoseError(f"frame {frame_id}: {e}", path=str(pose_path)) from e

    try:
        with Image.open(color_path) as img:
            rgb = np.asarray(img.convert("RGB"))
        with Image.open(depth_path) as img:
            depth_mm = np.asarray(img).astype(np.float64)
        return Frame(
            frame_id=frame_id,
            rgb=rgb,
            depth=depth_mm / DEPTH_SCALE,
            pose=pose,
            intrinsics=intrinsics,
        )
    except (OSError, ValueError, ValidationError) as e:
        raise SceneLoadError(f"frame {frame_id}: {e}", path=str(frames_dir)) from e


def load_scene(root_path: str | Path, workers: int = 4) -> Scene:
    """
    Load and validate a scene directory.

    Frames are decoded in parallel but returned in filename index order.

    Raises:
        SceneLoadError: Missing or corrupt files, mismatched image sizes.
        MissingPoseError: A color frame has no pose file.
        PoseError: A pose rotation deviates from orthonormal by more than 1e-3.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise SceneLoadError("scene directory not found", path=str(root))

    cloud = _read_cloud(root / CLOUD_FILE)
    frames_dir = root / FRAMES_DIR
    frame_ids: list[int] = []
    if frames_dir.is_dir():
        for name in sorted(p.name for p in frames_dir.iterdir()):
            m = _COLOR_RE.match(name)
            if m:
                frame_ids.append(int(m.group(1)))

    frames: list[Frame] = []
    if frame_ids:
        intrinsics = _read_intrinsics(frames_dir / INTRINSICS_FILE)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(
                pool.map(lambda fid: _read_frame(frames_dir, fid, intrinsics), frame_ids)
            )

    logger.info(
        "Loaded scene %s: %d points, %d frames", root.name, cloud.point_count, len(frames)
    )
    return Scene(cloud=cloud, frames=frames, scene_id=root.name)


def save_scene(scene: Scene, root_path: str | Path) -> Path:
    """Write ``scene`` in the directory layout read by :func:`load_scene`."""
    root = Path(root_path)
    frames_dir = root / FRAMES_DIR
    try:
        frames_dir.mkdir(parents=True, exist_ok=True)
        vertex = np.empty(
            scene.cloud.point_count,
            dtype=[
                ("x", "<f8"),
                ("y", "<f8"),
                ("z", "<f8"),
                ("red", "u1"),
                ("green", "u1"),
                ("blue", "u1"),
            ],
        )
        for k, axis in enumerate("xyz"):
            vertex[axis] = scene.cloud.positions[:, k]
        for k, channel in enumerate(("red", "green", "blue")):
            vertex[channel] = scene.cloud.colors[:, k]
        PlyData([PlyElement.describe(vertex, "vertex")], byte_order="<").write(
            str(root / CLOUD_FILE)
        )

        if scene.frames:
            k = scene.frames[0].intrinsics
            (frames_dir / INTRINSICS_FILE).write_text(
                f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n", encoding="utf-8"
            )
        for frame in scene.frames:
            fid = frame.frame_id
            Image.fromarray(frame.rgb).save(frames_dir / f"color_{fid:06d}.png")
            depth_mm = np.clip(np.round(frame.depth * DEPTH_SCALE), 0, 65535).astype(np.uint16)
            Image.fromarray(depth_mm).save(frames_dir / f"depth_{fid:06d}.png")
            np.savetxt(frames_dir / f"pose_{fid:06d}.txt", frame.pose.matrix(), fmt="%.17g")
    except OSError as e:
        raise OutputError(f"Failed to write scene to {root}: {e}") from e
    return root


def fit_aabb(points: np.ndarray) -> AxisAlignedBox:
    """Exact component-wise extrema of a non-empty point subset."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptySelectionError("cannot fit a box to an empty point subset")
    return AxisAlignedBox(
        min_corner=tuple(pts.min(axis=0).tolist()), max_corner=tuple(pts.max(axis=0).tolist())
    )


def fit_oriented_box(points: np.ndarray) -> OrientedBox:
    """
    Minimal-footprint yaw-only box (rotating calipers over the XY hull).

    Collinear or too-small inputs fall back to the AABB with yaw 0.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptySelectionError("cannot fit a box to an empty point subset")
    z0, z1 = float(pts[:, 2].min()), float(pts[:, 2].max())
    hz = max((z1 - z0) / 2, MIN_HALF_EXTENT)
    xy = pts[:, :2]

    try:
        hull = ConvexHull(xy)
    except (QhullError, ValueError):
        return fit_aabb(pts).to_oriented()

    hull_xy = xy[hull.vertices]
    edges = np.roll(hull_xy, -1, axis=0) - hull_xy
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), math.pi / 2))

    c, s = np.cos(angles), np.sin(angles)
    # hull points in each candidate frame: (A, n)
    u = np.outer(c, hull_xy[:, 0]) + np.outer(s, hull_xy[:, 1])
    v = np.outer(-s, hull_xy[:, 0]) + np.outer(c, hull_xy[:, 1])
    u_lo, u_hi = u.min(axis=1), u.max(axis=1)
    v_lo, v_hi = v.min(axis=1), v.max(axis=1)
    areas = (u_hi - u_lo) * (v_hi - v_lo)

    best_area = areas.min()
    ties = np.flatnonzero(areas <= best_area * (1 + 1e-12) + 1e-15)
    yaws = np.where(angles[ties] >= math.pi / 4, angles[ties] - math.pi / 2, angles[ties])
    k = ties[np.lexsort((yaws, np.abs(yaws)))[0]]

    theta = float(angles[k])
    hx = max((u_hi[k] - u_lo[k]) / 2, MIN_HALF_EXTENT)
    hy = max((v_hi[k] - v_lo[k]) / 2, MIN_HALF_EXTENT)
    uc, vc = (u_hi[k] + u_lo[k]) / 2, (v_hi[k] + v_lo[k]) / 2
    cx = uc * math.cos(theta) - vc * math.sin(theta)
    cy = uc * math.sin(theta) + vc * math.cos(theta)

    if theta >= math.pi / 4:
        theta -= math.pi / 2
        hx, hy = hy, hx
    return OrientedBox(center=(cx, cy, (z0 + z1) / 2), half_extents=(hx, hy, hz), yaw=theta)
