from __future__ import annotations

import math
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Vec3 = tuple[float, float, float]

ORTHONORMAL_TOL = 1e-6


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class ArrayModel(BaseModel):
    """Immutable record holding numpy arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


# ---------------------------------------------------------------- scene


class PointCloud(ArrayModel):
    positions: np.ndarray
    colors: np.ndarray

    @field_validator("positions", mode="before")
    @classmethod
    def _check_positions(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("positions contain non-finite coordinates")
        return _frozen(arr)

    @field_validator("colors", mode="before")
    @classmethod
    def _check_colors(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"colors must be (N, 3), got {arr.shape}")
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("colors must lie in 0..255")
        return _frozen(arr.astype(np.uint8))

    @model_validator(mode="after")
    def _check_lengths(self) -> PointCloud:
        if len(self.positions) != len(self.colors):
            raise ValueError(
                f"{len(self.positions)} positions but {len(self.colors)} colors"
            )
        return self

    @property
    def point_count(self) -> int:
        return len(self.positions)


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    @model_validator(mode="after")
    def _check_principal_point(self) -> CameraIntrinsics:
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )
        return self

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> CameraIntrinsics:
        """Square-pixel intrinsics with a horizontal field of view."""
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(fx=f, fy=f, cx=width / 2, cy=height / 2, width=width, height=height)


class Pose(ArrayModel):
    """Camera-to-world rigid transform (OpenCV camera axes: x right, y down, z forward)."""

    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation", mode="before")
    @classmethod
    def _check_rotation(cls, v: Any) -> np.ndarray:
        r = np.asarray(v, dtype=np.float64).reshape(3, 3)
        if not np.isfinite(r).all():
            raise ValueError("rotation contains non-finite entries")
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(r) <= 0:
            raise ValueError("rotation is a reflection")
        return _frozen(r)

    @field_validator("translation", mode="before")
    @classmethod
    def _check_translation(cls, v: Any) -> np.ndarray:
        t = np.asarray(v, dtype=np.float64).reshape(3)
        if not np.isfinite(t).all():
            raise ValueError("translation contains non-finite entries")
        return _frozen(t)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, tol: float = 1e-3) -> Pose:
        """Build from a 4x4 matrix, snapping rotations within ``tol`` onto SO(3)."""
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        r = m[:3, :3]
        if not np.isfinite(m).all() or np.abs(r @ r.T - np.eye(3)).max() > tol:
            raise ValueError(f"rotation deviates from orthonormal by more than {tol}")
        u, _, vt = np.linalg.svd(r)
        snapped = u @ vt
        if np.linalg.det(snapped) <= 0:
            raise ValueError("rotation is a reflection")
        return cls(rotation=snapped, translation=m[:3, 3])

    @classmethod
    def look_at(
        cls, eye: np.ndarray, target: np.ndarray, up: tuple[float, float, float] = (0, 0, 1)
    ) -> Pose:
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, (0.0, 1.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(rotation=np.column_stack([right, down, forward]), translation=eye)

    @property
    def position(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


class Frame(ArrayModel):
    frame_id: int
    rgb: np.ndarray
    depth: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics

    @field_validator("rgb", mode="before")
    @classmethod
    def _check_rgb(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"rgb must be HxWx3, got {arr.shape}")
        return _frozen(arr.astype(np.uint8))

    @field_validator("depth", mode="before")
    @classmethod
    def _check_depth(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"depth must be HxW, got {arr.shape}")
        if (arr < 0).any() or not np.isfinite(arr).all():
            raise ValueError("depth must be finite and non-negative")
        return _frozen(arr)

    @model_validator(mode="after")
    def _check_dimensions(self) -> Frame:
        expected = (self.intrinsics.height, self.intrinsics.width)
        if self.rgb.shape[:2] != expected or self.depth.shape != expected:
            raise ValueError(
                f"frame {self.frame_id}: rgb {self.rgb.shape[:2]} / depth "
                f"{self.depth.shape} do not match intrinsics {expected}"
            )
        return self


class Scene(ArrayModel):
    cloud: PointCloud
    frames: list[Frame] = Field(default_factory=list)
    scene_id: str

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)


class AxisAlignedBox(BaseModel):
    model_config = ConfigDict(frozen=True)

    min_corner: Vec3
    max_corner: Vec3

    @model_validator(mode="after")
    def _check_order(self) -> AxisAlignedBox:
        if any(lo > hi for lo, hi in zip(self.min_corner, self.max_corner, strict=True)):
            raise ValueError("min_corner must not exceed max_corner")
        return self

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.min_corner) + np.array(self.max_corner)) / 2

    @property
    def size(self) -> np.ndarray:
        return np.array(self.max_corner) - np.array(self.min_corner)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def contains(self, points: np.ndarray, slack: float = 1e-12) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo = np.array(self.min_corner) - slack
        hi = np.array(self.max_corner) + slack
        return ((pts >= lo) & (pts <= hi)).all(axis=1)

    def to_oriented(self) -> OrientedBox:
        half = np.maximum(self.size / 2, MIN_HALF_EXTENT)
        return OrientedBox(
            center=tuple(self.center.tolist()), half_extents=tuple(half.tolist()), yaw=0.0
        )


MIN_HALF_EXTENT = 1e-6


class OrientedBox(BaseModel):
    """Gravity-aligned box: yaw about +z, half extents along the rotated axes."""

    model_config = ConfigDict(frozen=True)

    center: Vec3
    half_extents: Vec3
    yaw: float

    @field_validator("half_extents")
    @classmethod
    def _check_extents(cls, v: Vec3) -> Vec3:
        if any(h <= 0 for h in v):
            raise ValueError("half_extents must be positive")
        return v

    @field_validator("yaw")
    @classmethod
    def _check_yaw(cls, v: float) -> float:
        if not (-math.pi / 2 <= v < math.pi / 2):
            raise ValueError(f"yaw {v} outside [-pi/2, pi/2)")
        return v

    def footprint(self) -> np.ndarray:
        """Corners of the horizontal footprint, counter-clockwise (4, 2)."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hx, hy = self.half_extents[0], self.half_extents[1]
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array(self.center[:2])

    def corners(self) -> np.ndarray:
        fp = self.footprint()
        z0 = self.center[2] - self.half_extents[2]
        z1 = self.center[2] + self.half_extents[2]
        return np.vstack(
            [np.column_stack([fp, np.full(4, z0)]), np.column_stack([fp, np.full(4, z1)])]
        )

    @property
    def footprint_area(self) -> float:
        return 4 * self.half_extents[0] * self.half_extents[1]

    @property
    def volume(self) -> float:
        return 8 * self.half_extents[0] * self.half_extents[1] * self.half_extents[2]

    def contains(self, points: np.ndarray, slack: float = 1e-9) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.array(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        lx = pts[:, 0] * c + pts[:, 1] * s
        ly = -pts[:, 0] * s + pts[:, 1] * c
        hx, hy, hz = self.half_extents
        return (
            (np.abs(lx) <= hx + slack)
            & (np.abs(ly) <= hy + slack)
            & (np.abs(pts[:, 2]) <= hz + slack)
        )

    def to_aabb(self) -> AxisAlignedBox:
        c = self.corners()
        return AxisAlignedBox(
            min_corner=tuple(c.min(axis=0).tolist()), max_corner=tuple(c.max(axis=0).tolist())
        )


class GroundingQuery(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str = Field(min_length=1)
    query_id: str = ""

    @field_validator("text")
    @classmethod
    def _check_text(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("query text is empty")
        return v


# ----------------------------------------------------------- projection


class ViewObservation(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: int
    visible_pixels: int = Field(ge=0)
    total_pixels: int = Field(ge=0)
    mask_feature: tuple[float, ...] = ()

    @model_validator(mode="after")
    def _check_counts(self) -> ViewObservation:
        if self.visible_pixels > self.total_pixels:
            raise ValueError("visible_pixels exceeds total_pixels")
        if any(f < 0 or f > 1 for f in self.mask_feature):
            raise ValueError("mask_feature entries must lie in [0, 1]")
        if sum(self.mask_feature) > 1 + 1e-9:
            raise ValueError("mask_feature entries sum above 1")
        return self


class MaskSet(ArrayModel):
    frame_id: int
    masks: np.ndarray

    @field_validator("masks", mode="before")
    @classmethod
    def _check_masks(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v, dtype=bool)
        if arr.ndim != 3:
            raise ValueError(f"masks must be (n, H, W), got {arr.shape}")
        return _frozen(arr)

    @property
    def n(self) -> int:
        return len(self.masks)


# ---------------------------------------------------------- superpoints


class Superpoint(ArrayModel):
    sp_id: int
    point_indices: np.ndarray
    centroid: Vec3
    mean_normal: Vec3
    mean_color: Vec3

    @field_validator("point_indices", mode="before")
    @classmethod
    def _check_indices(cls, v: Any) -> np.ndarray:
        arr = np.unique(np.asarray(v, dtype=np.int64))
        if arr.size == 0:
            raise ValueError("superpoint has no points")
        return _frozen(arr)

    @property
    def size(self) -> int:
        return len(self.point_indices)


class AdjacencyGraph(BaseModel):
    model_config = ConfigDict(frozen=True)

    nodes: tuple[int, ...]
    edges: frozenset[tuple[int, int]] = frozenset()

    @field_validator("edges", mode="before")
    @classmethod
    def _normalise_edges(cls, v: Any) -> frozenset[tuple[int, int]]:
        out = set()
        for i, j in v:
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            out.add((min(int(i), int(j)), max(int(i), int(j))))
        return frozenset(out)

    def neighbors(self) -> dict[int, set[int]]:
        nb: dict[int, set[int]] = {n: set() for n in self.nodes}
        for i, j in self.edges:
            nb.setdefault(i, set()).add(j)
            nb.setdefault(j, set()).add(i)
        return nb


# ------------------------------------------------------------ instances


class AffinityEdge(BaseModel):
    model_config = ConfigDict(frozen=True)

    i: int
    j: int
    affinity: float = Field(ge=0.0, le=1.0)
    contributing_views: int = Field(ge=0)

    @model_validator(mode="after")
    def _check_empty(self) -> AffinityEdge:
        if self.contributing_views == 0 and self.affinity != 0:
            raise ValueError("affinity must be 0 without contributing views")
        return self


class MergeSchedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    thresholds: tuple[float, ...]

    @field_validator("thresholds")
    @classmethod
    def _check_thresholds(cls, v: tuple[float, ...]) -> tuple[float, ...]:
        if not v:
            raise ValueError("schedule is empty")
        if any(t < 0 or t > 1 for t in v):
            raise ValueError("thresholds must lie in [0, 1]")
        if any(a <= b for a, b in zip(v, v[1:], strict=False)):
            raise ValueError("thresholds must be strictly decreasing")
        return v


class Instance(ArrayModel):
    instance_id: int
    member_superpoints: tuple[int, ...]
    point_indices: np.ndarray
    aabb: AxisAlignedBox
    obb: OrientedBox

    @field_validator("point_indices", mode="before")
    @classmethod
    def _check_indices(cls, v: Any) -> np.ndarray:
        return _frozen(np.unique(np.asarray(v, dtype=np.int64)))

    @property
    def point_count(self) -> int:
        return len(self.point_indices)


class MergeResult(ArrayModel):
    instances: list[Instance]
    stage_counts: list[int] = Field(default_factory=list)


# ------------------------------------------------------------ semantics


class SemanticEmbedding(ArrayModel):
    vector: np.ndarray
    view_count: int = Field(ge=1)

    @field_validator("vector", mode="before")
    @classmethod
    def _check_unit(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64).reshape(-1)
        if abs(np.linalg.norm(arr) - 1.0) > 1e-6:
            raise ValueError("embedding vector must be unit norm")
        return _frozen(arr)


class Candidate(ArrayModel):
    instance: Instance
    embedding: SemanticEmbedding
    score: float = Field(ge=-1.0 - 1e-9, le=1.0 + 1e-9)
    candidate_id: int = Field(ge=1)


# ---------------------------------------------------------- viewfactory


class OrbitCameraSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    r: float
    h: float
    r_min: float = Field(gt=0)
    h_min: float = Field(gt=0)
    azimuths: tuple[float, ...]

    @model_validator(mode="after")
    def _check_bounds(self) -> OrbitCameraSpec:
        if self.r < self.r_min or self.h < self.h_min:
            raise ValueError(
                f"orbit (r={self.r}, h={self.h}) below bounds ({self.r_min}, {self.h_min})"
            )
        return self


class GlobalRender(ArrayModel):
    image: np.ndarray
    depth: np.ndarray
    camera: Pose
    intrinsics: CameraIntrinsics
    azimuth: float = 0.0
    overlay_ids: dict[int, tuple[float, float]] = Field(default_factory=dict)
    hidden_ids: tuple[int, ...] = ()
    axes_drawn: bool = False


class CandidateView(ArrayModel):
    frame_id: int | None
    image: np.ndarray
    box2d: tuple[int, int, int, int]


class CandidateViewSet(ArrayModel):
    candidate_id: int
    views: list[CandidateView] = Field(default_factory=list)
    fallback: bool = False


# -------------------------------------------------------------- reasoner


class AxisLanguageMap(BaseModel):
    """Direction phrase -> signed world axis, one mapping per global render."""

    renders: list[dict[str, str]] = Field(default_factory=list)

    def as_text(self) -> str:
        lines = []
        for k, mapping in enumerate(self.renders):
            pairs = ", ".join(f'"{phrase}" -> {axis}' for phrase, axis in mapping.items())
            lines.append(f"view {k}: {pairs}")
        return "\n".join(lines)


class VlmTurn(BaseModel):
    images: list[str] = Field(default_factory=list)
    prompt: str
    expected_schema: str


class VlmExchange(BaseModel):
    schema_id: str
    images: list[str] = Field(default_factory=list)
    prompt: str
    response: str | None = None
    error: str | None = None


class ReasoningTrace(BaseModel):
    names: dict[int, str] = Field(default_factory=dict)
    matched_target: list[int] = Field(default_factory=list)
    relations: list[str] = Field(default_factory=list)
    selected: int
    explanation: str = ""
    correction_rounds: int = 0
    naming_retries: int = 0
    fallback: str | None = None
    turns: list[VlmExchange] = Field(default_factory=list)


# --------------------------------------------------------- model gateway


class ProviderConfig(BaseModel):
    endpoint: str = ""
    timeout: float = Field(default=60.0, gt=0)
    max_retries: int = Field(default=2, ge=0)
    token_env: str = "UG_API_TOKEN"
    max_payload: int = Field(default=32 * 1024 * 1024, gt=0)
    max_in_flight: int = Field(default=8, ge=1)
    max_images: int = Field(default=16, ge=1)


class ScoredMask(ArrayModel):
    mask: np.ndarray
    confidence: float = Field(ge=0.0, le=1.0)

    @field_validator("mask", mode="before")
    @classmethod
    def _check_mask(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v, dtype=bool)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        return _frozen(arr)


class MaskRequest(ArrayModel):
    image: np.ndarray
    points: list[tuple[int, int, int]] = Field(default_factory=list)


class MaskResponse(ArrayModel):
    masks: list[ScoredMask] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_sorted(self) -> MaskResponse:
        conf = [m.confidence for m in self.masks]
        if any(a < b for a, b in zip(conf, conf[1:], strict=False)):
            raise ValueError("masks must be sorted by descending confidence")
        shapes = {m.mask.shape for m in self.masks}
        if len(shapes) > 1:
            raise ValueError("masks differ in shape")
        return self


class EmbedRequest(ArrayModel):
    image: np.ndarray | None = None
    text: str | None = None

    @model_validator(mode="after")
    def _check_one(self) -> EmbedRequest:
        if (self.image is None) == (self.text is None):
            raise ValueError("exactly one of image or text is required")
        return self


class EmbedResponse(ArrayModel):
    vector: np.ndarray

    @field_validator("vector", mode="before")
    @classmethod
    def _check_vector(cls, v: Any) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64).reshape(-1)
        if arr.size == 0 or not np.isfinite(arr).all() or not arr.any():
            raise ValueError("embedding vector must be finite and non-zero")
        return _frozen(arr)


class VlmRequest(ArrayModel):
    images: list[np.ndarray] = Field(default_factory=list)
    prompt: str
    schema_id: str
    work_dir: str | None = None  # local only, never sent on the wire


class VlmResponse(BaseModel):
    text: str


# --------------------------------------------------------------- harness


class SyntheticSpec(BaseModel):
    seed: int = 0
    room_extent: tuple[float, float] = (2.5, 2.5)
    object_count: int = Field(default=6, ge=1)
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow", "purple", "orange")
    shapes: tuple[str, ...] = ("cube", "cylinder", "sphere")
    trajectory: Literal["orbit", "waypoints"] = "orbit"
    frame_count: int = Field(default=8, ge=1)
    orbit_radius: float = Field(default=2.2, gt=0)
    orbit_height: float = Field(default=1.6, gt=0)
    waypoints: list[Vec3] = Field(default_factory=list)
    resolution: tuple[int, int] = (640, 480)
    fov_deg: float = Field(default=70.0, gt=0, lt=180)
    points_per_object: int | None = None
    cloud_voxel_size: float = Field(default=0.015, gt=0)

    @model_validator(mode="after")
    def _check_trajectory(self) -> SyntheticSpec:
        if self.trajectory == "waypoints" and not self.waypoints:
            raise ValueError("waypoint trajectory needs at least one waypoint")
        return self


class AnnotationRecord(BaseModel):
    scene_id: str
    query_id: str
    text: str
    gt_box: OrientedBox
    target_label: str = ""
    object_id: int = -1
    box_mode: Literal["aabb", "obb"] = "obb"


class QueryResult(BaseModel):
    query_id: str
    scene_id: str
    iou: float = 0.0
    predicted: OrientedBox | None = None
    selected: int | None = None
    target_retained: bool = False
    correction_rounds: int = 0
    vlm_usage: dict[str, int] = Field(default_factory=dict)
    error: str | None = None


class EvalReport(BaseModel):
    """
    Benchmark summary.

    ``vlm_usage`` totals turns, prompt and response characters and images over all
    queries. Providers do not report tokens, so characters stand in for them.
    """

    query_count: int = 0
    acc_025: float = Field(default=0.0, ge=0.0, le=1.0)
    acc_05: float = Field(default=0.0, ge=0.0, le=1.0)
    failures: int = 0
    results: list[QueryResult] = Field(default_factory=list)
    provider_calls: dict[str, int] = Field(default_factory=dict)
    vlm_usage: dict[str, int] = Field(default_factory=dict)
    timing: dict[str, float] = Field(default_factory=dict, exclude=True)

    @model_validator(mode="after")
    def _check_accuracy_order(self) -> EvalReport:
        if self.acc_05 > self.acc_025:
            raise ValueError("Acc@0.5 cannot exceed Acc@0.25")
        return self
