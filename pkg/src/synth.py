"""
Synthetic RGB-D scenes of coloured primitives on a floor.

Frames are ray cast analytically, so depths and colours are exact up to the
millimetre depth quantisation; the point cloud is the back-projection of
all frames. Objects use flat palette colours, one exact RGB per
(colour, shape) label, which the mock providers rely on.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from .exceptions import OutputError, SynthesisError
from .models import (
    CameraIntrinsics,
    Frame,
    OrientedBox,
    PointCloud,
    Pose,
    Scene,
    SyntheticSpec,
)
from .scene_model import DEPTH_SCALE, save_scene
from .utils import KeyCodec, voxel_keys, wrap_yaw

logger = logging.getLogger(__name__)

PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (230, 210, 40),
    "purple": (140, 60, 190),
    "orange": (240, 140, 30),
}
SHAPES: tuple[str, ...] = ("cube", "cylinder", "sphere")
SHAPE_SHADE = {"cube": 0, "cylinder": 12, "sphere": 24}
FLOOR_COLOR = (150, 150, 150)
FLOOR_LABEL = "floor"

PLACEMENT_ATTEMPTS = 1000
PLACEMENT_MARGIN = 0.1
MIN_VISIBLE_PIXELS = 20
MIN_VISIBLE_FRAMES = 2
GROUND_TRUTH_FILE = "ground_truth.json"
ANNOTATIONS_FILE = "annotations.json"


def label_color(color: str, shape: str) -> tuple[int, int, int]:
    """Exact RGB of a (colour, shape) label."""
    shade = SHAPE_SHADE[shape]
    r, g, b = PALETTE[color]
    return (r - shade, g - shade, b - shade)


def label_name(color: str, shape: str) -> str:
    return f"{color} {shape}"


class Primitive:
    """One object: a yawed box, an upright cylinder or a sphere resting on z = 0."""

    def __init__(
        self,
        object_id: int,
        color: str,
        shape: str,
        center: np.ndarray,
        half_extents: np.ndarray,
        yaw: float = 0.0,
    ):
        self.object_id = object_id
        self.color = color
        self.shape = shape
        self.center = np.asarray(center, dtype=np.float64)
        self.half_extents = np.asarray(half_extents, dtype=np.float64)
        self.yaw = yaw

    @property
    def label(self) -> str:
        return label_name(self.color, self.shape)

    @property
    def rgb(self) -> tuple[int, int, int]:
        return label_color(self.color, self.shape)

    def box(self) -> OrientedBox:
        return OrientedBox(
            center=tuple(self.center.tolist()),
            half_extents=tuple(self.half_extents.tolist()),
            yaw=wrap_yaw(self.yaw),
        )

    def footprint_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.shape == "cube":
            c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
            hx, hy = self.half_extents[:2]
            ext = np.array([hx * c + hy * s, hx * s + hy * c])
        else:
            ext = self.half_extents[:2]
        return self.center[:2] - ext, self.center[:2] + ext

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Ray parameter of the first hit per ray, +inf on miss."""
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.shape == "cube":
                return self._hit_box(origin, dirs)
            if self.shape == "cylinder":
                return self._hit_cylinder(origin, dirs)
            return self._hit_sphere(origin, dirs)

    def _hit_box(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # world -> local: rotate by -yaw about z
        rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        o = rot @ (origin - self.center)
        d = dirs @ rot.T
        t1 = (-self.half_extents - o) / d
        t2 = (self.half_extents - o) / d
        t_near = np.nanmax(np.minimum(t1, t2), axis=1)
        t_far = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (t_far >= t_near) & (t_near > 1e-9)
        return np.where(hit, t_near, np.inf)

    def _hit_cylinder(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        r = self.half_extents[0]
        z0, z1 = self.center[2] - self.half_extents[2], self.center[2] + self.half_extents[2]
        ox, oy = origin[0] - self.center[0], origin[1] - self.center[1]
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        a = dx * dx + dy * dy
        b = 2 * (ox * dx + oy * dy)
        cc = ox * ox + oy * oy - r * r
        disc = b * b - 4 * a * cc
        t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
        z_side = origin[2] + t_side * dz
        side_ok = (disc >= 0) & (a > 0) & (t_side > 1e-9) & (z_side >= z0) & (z_side <= z1)
        t_cap = (z1 - origin[2]) / dz
        px, py = ox + t_cap * dx, oy + t_cap * dy
        cap_ok = (t_cap > 1e-9) & (px * px + py * py <= r * r)
        return np.minimum(np.where(side_ok, t_side, np.inf), np.where(cap_ok, t_cap, np.inf))

    def _hit_sphere(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        r = self.half_extents[0]
        o = origin - self.center
        a = (dirs * dirs).sum(axis=1)
        b = 2 * (dirs @ o)
        cc = float(o @ o) - r * r
        disc = b * b - 4 * a * cc
        t = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
        return np.where((disc >= 0) & (t > 1e-9), t, np.inf)


def _random_primitive(
    rng: np.random.Generator, object_id: int, spec: SyntheticSpec
) -> Primitive:
    color = str(rng.choice(spec.colors))
    shape = str(rng.choice(spec.shapes))
    ex, ey = spec.room_extent
    if shape == "cube":
        half = np.array([rng.uniform(0.08, 0.18), rng.uniform(0.08, 0.18), rng.uniform(0.08, 0.2)])
        yaw = float(rng.uniform(-math.pi / 2, math.pi / 2))
    elif shape == "cylinder":
        radius = rng.uniform(0.07, 0.14)
        half = np.array([radius, radius, rng.uniform(0.08, 0.2)])
        yaw = 0.0
    else:
        radius = rng.uniform(0.08, 0.16)
        half = np.array([radius, radius, radius])
        yaw = 0.0
    xy = rng.uniform([-ex / 2, -ey / 2], [ex / 2, ey / 2])
    return Primitive(object_id, color, shape, np.array([xy[0], xy[1], half[2]]), half, yaw)


def place_objects(spec: SyntheticSpec, rng: np.random.Generator) -> list[Primitive]:
    """
    Random primitives with pairwise disjoint footprints inside the room.

    Raises:
        SynthesisError: If an object cannot be placed in PLACEMENT_ATTEMPTS tries.
    """
    unknown = [c for c in spec.colors if c not in PALETTE] + [
        s for s in spec.shapes if s not in SHAPE_SHADE
    ]
    if unknown:
        raise SynthesisError(f"no palette entry for {unknown}")
    ex, ey = spec.room_extent
    room_lo = np.array([-ex / 2, -ey / 2]) + PLACEMENT_MARGIN
    room_hi = np.array([ex / 2, ey / 2]) - PLACEMENT_MARGIN

    placed: list[Primitive] = []
    for object_id in range(spec.object_count):
        for _ in range(PLACEMENT_ATTEMPTS):
            cand = _random_primitive(rng, object_id, spec)
            lo, hi = cand.footprint_bounds()
            if (lo < room_lo).any() or (hi > room_hi).any():
                continue
            clear = True
            for other in placed:
                olo, ohi = other.footprint_bounds()
                if (lo < ohi + PLACEMENT_MARGIN).all() and (olo < hi + PLACEMENT_MARGIN).all():
                    clear = False
                    break
            if clear:
                placed.append(cand)
                break
        else:
            raise SynthesisError(
                f"could not place object {object_id} after {PLACEMENT_ATTEMPTS} attempts"
            )
    return placed


def camera_poses(spec: SyntheticSpec) -> list[Pose]:
    target = np.array([0.0, 0.0, 0.1])
    if spec.trajectory == "waypoints":
        return [Pose.look_at(np.asarray(w, dtype=np.float64), target) for w in spec.waypoints]
    poses = []
    for k in range(spec.frame_count):
        theta = 2 * math.pi * k / spec.frame_count + math.pi / 7
        eye = np.array(
            [
                spec.orbit_radius * math.cos(theta),
                spec.orbit_radius * math.sin(theta),
                spec.orbit_height,
            ]
        )
        poses.append(Pose.look_at(eye, target))
    return poses


def ray_cast(
    objects: list[Primitive],
    pose: Pose,
    intrinsics: CameraIntrinsics,
    room_extent: tuple[float, float],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Render one frame.

    Returns:
        (rgb uint8, depth metres with 0 on background, hit id with -1 on
        background, 0 for the floor and object_id + 1 for objects)
    """
    k = intrinsics
    u, v = np.meshgrid(np.arange(k.width) + 0.5, np.arange(k.height) + 0.5)
    cam_dirs = np.stack(
        [(u.ravel() - k.cx) / k.fx, (v.ravel() - k.cy) / k.fy, np.ones(u.size)], axis=1
    )
    dirs = cam_dirs @ pose.rotation.T  # unit forward component, so t is camera depth
    origin = pose.position

    best_t = np.full(u.size, np.inf)
    hit_id = np.full(u.size, -1, dtype=np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = -origin[2] / dirs[:, 2]
    fx_, fy_ = origin[0] + t_floor * dirs[:, 0], origin[1] + t_floor * dirs[:, 1]
    on_floor = (
        (t_floor > 1e-9)
        & (np.abs(fx_) <= room_extent[0] / 2)
        & (np.abs(fy_) <= room_extent[1] / 2)
    )
    best_t[on_floor] = t_floor[on_floor]
    hit_id[on_floor] = 0

    for obj in objects:
        t = obj.intersect(origin, dirs)
        closer = t < best_t
        best_t[closer] = t[closer]
        hit_id[closer] = obj.object_id + 1

    colors = np.zeros((len(objects) + 2, 3), dtype=np.uint8)
    colors[1] = FLOOR_COLOR
    for obj in objects:
        colors[obj.object_id + 2] = obj.rgb
    rgb = colors[hit_id + 1]
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return (
        rgb.reshape(k.height, k.width, 3),
        depth.reshape(k.height, k.width),
        hit_id.reshape(k.height, k.width),
    )


def back_project(
    depth: np.ndarray, pose: Pose, intrinsics: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """World points of the valid depth pixels and their flat pixel indices."""
    k = intrinsics
    flat = np.flatnonzero(depth.reshape(-1) > 0)
    z = depth.reshape(-1)[flat]
    u = flat % k.width + 0.5
    v = flat // k.width + 0.5
    cam = np.column_stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])
    return cam @ pose.rotation.T + pose.position, flat


def _queries(objects: list[Primitive], scene_id: str) -> list[dict]:
    """One unambiguous referring expression per object where one exists."""
    by_label: dict[str, list[Primitive]] = {}
    for obj in objects:
        by_label.setdefault(obj.label, []).append(obj)

    queries = []
    for target in objects:
        same = by_label[target.label]
        anchors = sorted(
            (
                a
                for a in objects
                if a is not target and len(by_label[a.label]) == 1 and a.label != target.label
            ),
            key=lambda a: (float(np.linalg.norm(a.center - target.center)), a.object_id),
        )
        text, anchor_id = None, None
        for anchor in anchors:
            dists = [float(np.linalg.norm(o.center - anchor.center)) for o in same]
            nearest = min(range(len(same)), key=lambda i: (dists[i], same[i].object_id))
            runner_up = sorted(dists)[1] if len(dists) > 1 else math.inf
            if same[nearest] is target and runner_up - dists[nearest] > 0.05:
                text = f"the {target.label} closest to the {anchor.label}"
                anchor_id = anchor.object_id
                break
        if text is None and len(same) == 1:
            text = f"the {target.label}"
        if text is None:
            continue
        queries.append(
            {
                "query_id": f"{scene_id}_q{len(queries)}",
                "text": text,
                "target_id": target.object_id,
                "anchor_id": anchor_id,
            }
        )
    return queries


def synth_scene(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """
    Generate a scene directory with ``ground_truth.json`` and ``annotations.json``.

    The same spec always yields byte-identical files.

    Raises:
        SynthesisError: Objects cannot be placed or are seen in fewer than two frames.
    """
    out = Path(out_dir)
    scene_id = out.name
    rng = np.random.default_rng(spec.seed)
    objects = place_objects(spec, rng)
    width, height = spec.resolution
    intrinsics = CameraIntrinsics.from_fov(width, height, spec.fov_deg)

    frames: list[Frame] = []
    positions, colors, owners = [], [], []
    visible_frames = np.zeros(len(objects), dtype=np.int64)
    for fid, pose in enumerate(camera_poses(spec)):
        rgb, depth, hit = ray_cast(objects, pose, intrinsics, spec.room_extent)
        depth = np.round(depth * DEPTH_SCALE) / DEPTH_SCALE
        counts = np.bincount(hit.reshape(-1) + 1, minlength=len(objects) + 2)[2:]
        visible_frames += counts >= MIN_VISIBLE_PIXELS
        frames.append(Frame(frame_id=fid, rgb=rgb, depth=depth, pose=pose, intrinsics=intrinsics))
        pts, flat = back_project(depth, pose, intrinsics)
        positions.append(pts)
        colors.append(rgb.reshape(-1, 3)[flat])
        owners.append(hit.reshape(-1)[flat])

    unseen = [o.label for o in objects if visible_frames[o.object_id] < MIN_VISIBLE_FRAMES]
    if unseen:
        raise SynthesisError(f"objects seen in fewer than {MIN_VISIBLE_FRAMES} frames: {unseen}")

    pos = np.concatenate(positions)
    col = np.concatenate(colors)
    own = np.concatenate(owners)
    keys = voxel_keys(pos, spec.cloud_voxel_size)
    _, keep = np.unique(KeyCodec(keys).encode(keys), return_index=True)
    keep.sort()
    if spec.points_per_object is not None:
        kept = []
        for owner in np.unique(own[keep]):
            idx = keep[own[keep] == owner]
            if owner > 0 and len(idx) > spec.points_per_object:
                idx = np.sort(rng.choice(idx, spec.points_per_object, replace=False))
            kept.append(idx)
        keep = np.sort(np.concatenate(kept))
    cloud = PointCloud(positions=pos[keep], colors=col[keep])
    point_counts = np.bincount(own[keep], minlength=len(objects) + 1)

    save_scene(Scene(cloud=cloud, frames=frames, scene_id=scene_id), out)

    queries = _queries(objects, scene_id)
    truth = {
        "scene_id": scene_id,
        "objects": [
            {
                "object_id": o.object_id,
                "label": o.label,
                "color": o.color,
                "shape": o.shape,
                "box": o.box().model_dump(),
                "point_count": int(point_counts[o.object_id + 1]),
            }
            for o in objects
        ],
        "queries": queries,
    }
    annotations = {
        "format": "embodiedscan",
        "box_mode": "obb",
        "scenes_root": "..",
        "annotations": [
            {
                "scene_id": scene_id,
                "ann_id": q["query_id"],
                "description": q["text"],
                "object_id": q["target_id"],
                "object_name": objects[q["target_id"]].label,
                "box": _box_record(objects[q["target_id"]].box()),
            }
            for q in queries
        ],
    }
    _write_json(out / GROUND_TRUTH_FILE, truth)
    _write_json(out / ANNOTATIONS_FILE, annotations)
    logger.info(
        "Synthesised %s: %d objects, %d frames, %d points, %d queries",
        scene_id,
        len(objects),
        len(frames),
        cloud.point_count,
        len(queries),
    )
    return out


def synth_suite(
    spec: SyntheticSpec,
    out_root: str | Path,
    scene_count: int,
    object_range: tuple[int, int] | None = None,
) -> Path:
    """
    ``scene_count`` scenes with seeds spec.seed, spec.seed + 1, ... and a
    combined ``dataset.json`` at ``out_root``.
    """
    root = Path(out_root)
    rng = np.random.default_rng(spec.seed)
    records = []
    for k in range(scene_count):
        update: dict = {"seed": spec.seed + k}
        if object_range is not None:
            update["object_count"] = int(rng.integers(object_range[0], object_range[1] + 1))
        scene_dir = synth_scene(spec.model_copy(update=update), root / f"scene_{k:04d}")
        with open(scene_dir / ANNOTATIONS_FILE, encoding="utf-8") as f:
            records.extend(json.load(f)["annotations"])
    dataset = root / "dataset.json"
    _write_json(
        dataset,
        {"format": "embodiedscan", "box_mode": "obb", "scenes_root": ".", "annotations": records},
    )
    return dataset


def _box_record(box: OrientedBox) -> dict:
    return {
        "center": list(box.center),
        "size": [2 * h for h in box.half_extents],
        "yaw": box.yaw,
    }


def _write_json(path: Path, data: dict) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e
