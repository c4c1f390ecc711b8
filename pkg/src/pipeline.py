"""
Two-stage grounding over one scene at a time.

Stage 1 (segmentation, per-frame masks, merging and instance embeddings)
runs once per scene and is cached on the pipeline; Stage 2 (candidate
filtering, rendering and reasoning) runs per query against that cache.
"""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
import threading
import time
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import PipelineConfig, ProvidersConfig
from .exceptions import InputError, OutputError
from .instances import dump_instances, linear_schedule, progressive_merge
from .mock_providers import (
    CANDIDATE_FILE,
    ORACLE_TRUTH_FILE,
    MockEmbeddingProvider,
    MockMaskProvider,
    OracleVlm,
)
from .model_gateway import (
    EmbeddingProvider,
    HttpEmbeddingProvider,
    HttpMaskProvider,
    HttpVlmProvider,
    MaskProvider,
    VlmProvider,
)
from .models import (
    AdjacencyGraph,
    Candidate,
    Frame,
    GroundingQuery,
    Instance,
    MaskRequest,
    MaskSet,
    MergeResult,
    OrientedBox,
    ReasoningTrace,
    Scene,
    SemanticEmbedding,
    Superpoint,
)
from .projection import ViewCache, observe_scene
from .reasoner import ground as reason
from .reasoner import write_trace
from .scene_model import fit_aabb, load_scene
from .semantics import embed_instances, filter_top_u
from .superpoints import (
    build_adjacency,
    dump_superpoints,
    estimate_normals,
    region_grow,
    supervoxel_cluster,
)
from .synth import GROUND_TRUTH_FILE
from .viewfactory import (
    default_orbit_spec,
    render_global_views,
    select_candidate_views,
    write_prompt_images,
)

logger = logging.getLogger(__name__)

TRACE_FILE = "trace.json"
SUPERPOINTS_FILE = "superpoints.json"
INSTANCES_FILE = "instances.json"


@dataclass(frozen=True)
class Providers:
    mask: MaskProvider
    embed: EmbeddingProvider
    vlm: VlmProvider

    def calls(self) -> dict[str, int]:
        """Requests issued so far by each provider that counts them."""
        out = {}
        for name in ("mask", "embed", "vlm"):
            calls = getattr(getattr(self, name), "calls", None)
            if calls is not None:
                out[name] = int(calls)
        return out


def build_providers(config: ProvidersConfig, vlm: VlmProvider | None = None) -> Providers:
    """Mock or HTTP providers as configured; ``vlm`` overrides the VLM backend."""
    if config.kind == "http":
        return Providers(
            mask=HttpMaskProvider(config.mask),
            embed=HttpEmbeddingProvider(config.embed),
            vlm=vlm or HttpVlmProvider(config.vlm),
        )
    return Providers(mask=MockMaskProvider(), embed=MockEmbeddingProvider(), vlm=vlm or OracleVlm())


def parse_query(text: str) -> GroundingQuery:
    """
    Validate a referring expression.

    Raises:
        InputError: If the text is blank.
    """
    try:
        return GroundingQuery(text=text)
    except ValidationError as e:
        raise InputError(f"Invalid query {text!r}: {e}") from e


def segment_frames(scene: Scene, provider: MaskProvider, workers: int = 4) -> dict[int, MaskSet]:
    """Automatic 2D instance masks of every frame, keyed by frame id."""

    def one(frame: Frame) -> MaskSet:
        response = provider.segment(MaskRequest(image=frame.rgb))
        h, w = frame.rgb.shape[:2]
        if response.masks:
            masks = np.stack([m.mask for m in response.masks])
        else:
            logger.warning("Frame %d produced no masks", frame.frame_id)
            masks = np.zeros((0, h, w), dtype=bool)
        return MaskSet(frame_id=frame.frame_id, masks=masks)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        sets = list(pool.map(one, scene.frames))
    return {s.frame_id: s for s in sets}


@dataclass
class SceneSegmentation:
    """Read-only Stage-1 state shared by every query on one scene."""

    scene: Scene
    cache: ViewCache
    masks: dict[int, MaskSet]
    superpoints: list[Superpoint]
    graph: AdjacencyGraph
    merge: MergeResult
    embeddings: dict[int, SemanticEmbedding]
    scene_dir: Path | None = None

    @property
    def instances(self) -> list[Instance]:
        return self.merge.instances

    def embedded(self) -> list[tuple[Instance, SemanticEmbedding]]:
        return [
            (i, self.embeddings[i.instance_id])
            for i in self.instances
            if i.instance_id in self.embeddings
        ]

    def dump(self, out_dir: str | Path) -> None:
        root = Path(out_dir)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(f"Cannot create {root}: {e}") from e
        dump_superpoints(self.superpoints, root / SUPERPOINTS_FILE)
        dump_instances(self.instances, root / INSTANCES_FILE)


@dataclass
class GroundingResult:
    query: GroundingQuery
    candidates: list[Candidate]
    trace: ReasoningTrace
    box: OrientedBox
    work_dir: Path | None = None

    @property
    def selected(self) -> Candidate:
        return next(c for c in self.candidates if c.candidate_id == self.trace.selected)


def write_candidates(query: GroundingQuery, candidates: list[Candidate], path: Path) -> None:
    data = {
        "query": query.text,
        "candidates": [
            {
                "candidate_id": c.candidate_id,
                "instance_id": c.instance.instance_id,
                "score": c.score,
                "point_count": c.instance.point_count,
                "aabb": c.instance.aabb.model_dump(),
                "obb": c.instance.obb.model_dump(),
            }
            for c in candidates
        ],
    }
    try:
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e


@contextmanager
def _work_dir(path: str | Path | None) -> Iterator[Path]:
    if path is not None:
        root = Path(path)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(f"Cannot create work directory {root}: {e}") from e
        yield root
        return
    with tempfile.TemporaryDirectory(prefix="uniground-") as tmp:
        yield Path(tmp)


class GroundingPipeline:
    """Stage-1 cache plus per-query Stage-2 grounding."""

    def __init__(self, config: PipelineConfig | None = None, providers: Providers | None = None):
        self.config = config or PipelineConfig()
        self.providers = providers or build_providers(self.config.providers)
        self.timing: dict[str, float] = {}
        self._cache: dict[str, SceneSegmentation] = {}
        self._scene_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()

    def derive(self, config: PipelineConfig) -> GroundingPipeline:
        """
        Pipeline with another Stage-2 configuration that shares this one's
        providers, Stage-1 cache and timing.
        """
        other = GroundingPipeline(config, self.providers)
        other.timing = self.timing
        other._cache = self._cache
        other._scene_locks = self._scene_locks
        other._lock = self._lock
        return other

    @contextmanager
    def _timed(self, stage: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            with self._lock:
                self.timing[stage] = self.timing.get(stage, 0.0) + elapsed

    def _scene_lock(self, key: str) -> threading.Lock:
        with self._lock:
            return self._scene_locks.setdefault(key, threading.Lock())

    def load(self, scene_dir: str | Path) -> SceneSegmentation:
        """Load and segment a scene directory, reusing a cached result."""
        root = Path(scene_dir)
        key = str(root.resolve())
        with self._scene_lock(key):
            if key not in self._cache:
                with self._timed("load"):
                    scene = load_scene(root, self.config.workers)
                self._cache[key] = self._segment(scene, root)
            return self._cache[key]

    def segment(self, scene: Scene) -> SceneSegmentation:
        """Segment an in-memory scene, cached by scene id."""
        key = f"scene:{scene.scene_id}"
        with self._scene_lock(key):
            if key not in self._cache:
                self._cache[key] = self._segment(scene, None)
            return self._cache[key]

    def _segment(self, scene: Scene, scene_dir: Path | None) -> SceneSegmentation:
        cfg = self.config
        sp = cfg.superpoints
        cloud = scene.cloud
        viewpoint = scene.frames[0].pose.position if scene.frames else None

        with self._timed("superpoints"):
            normals = estimate_normals(cloud, sp.k_neighbors, viewpoint)
            supervoxels = supervoxel_cluster(
                cloud, normals, sp.voxel_size, sp.seed_spacing, sp.weights, sp.max_distance
            )
            superpoints = region_grow(
                supervoxels, cloud, normals, sp.voxel_size, sp.angle_thresh, sp.color_thresh
            )
            graph = build_adjacency(superpoints, cloud, sp.voxel_size)
        logger.info(
            "Scene %s: %d supervoxels, %d superpoints, %d adjacencies",
            scene.scene_id,
            len(supervoxels),
            len(superpoints),
            len(graph.edges),
        )

        with self._timed("masks"):
            masks = segment_frames(scene, self.providers.mask, cfg.workers)

        cache = ViewCache(scene, cfg.merge.splat_radius, cfg.merge.occlusion_tol)
        with self._timed("merge"):
            observations = observe_scene(superpoints, cache, masks, cfg.workers)
            observe_fn = partial(cache.observe, masks=masks) if cfg.merge.reproject else None
            merge = progressive_merge(
                superpoints,
                graph,
                observations,
                linear_schedule(cfg.merge.start, cfg.merge.end, cfg.merge.stages),
                cloud,
                cfg.merge.order,
                cfg.merge.denominator,
                observe_fn,
            )

        with self._timed("embed"):
            embeddings = embed_instances(
                merge.instances,
                cache,
                self.providers.mask,
                self.providers.embed,
                cfg.semantics,
                cfg.views,
            )
        logger.info(
            "Scene %s: %d instances, %d embedded",
            scene.scene_id,
            len(merge.instances),
            len(embeddings),
        )
        return SceneSegmentation(
            scene=scene,
            cache=cache,
            masks=masks,
            superpoints=superpoints,
            graph=graph,
            merge=merge,
            embeddings=embeddings,
            scene_dir=scene_dir,
        )

    def ground(
        self,
        segmentation: SceneSegmentation,
        query: GroundingQuery | str,
        u: int | None = None,
        work_dir: str | Path | None = None,
    ) -> GroundingResult:
        """
        Ground one query on a segmented scene.

        ``work_dir`` receives ``candidates.json``, the prompt images and
        ``trace.json``; without one a temporary directory is used and removed.
        """
        if isinstance(query, str):
            query = parse_query(query)
        cfg = self.config
        u = u or cfg.semantics.u
        scene = segmentation.scene

        with self._timed("filter"):
            candidates = filter_top_u(segmentation.embedded(), query, u, self.providers.embed)

        with _work_dir(work_dir) as root:
            write_candidates(query, candidates, root / CANDIDATE_FILE)
            truth = segmentation.scene_dir / GROUND_TRUTH_FILE if segmentation.scene_dir else None
            if truth is not None and truth.is_file():
                shutil.copyfile(truth, root / ORACLE_TRUTH_FILE)

            with self._timed("render"):
                global_renders = []
                if cfg.reasoner.toggles.spatial:
                    spec = default_orbit_spec(fit_aabb(scene.cloud.positions), cfg.views)
                    floor_z = float(scene.cloud.positions[:, 2].min())
                    global_renders = render_global_views(
                        scene.cloud, candidates, spec, cfg.views, floor_z
                    )
                with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                    view_sets = list(
                        pool.map(
                            lambda c: select_candidate_views(
                                c, segmentation.cache, cfg.views.l, cfg.views
                            ),
                            candidates,
                        )
                    )
                write_prompt_images(root, global_renders, view_sets)

            with self._timed("reason"):
                trace, box = reason(
                    query,
                    candidates,
                    global_renders,
                    view_sets,
                    self.providers.vlm,
                    self.providers.embed,
                    cfg.reasoner,
                    str(root),
                )
            write_trace(trace, root / TRACE_FILE)

        return GroundingResult(
            query=query,
            candidates=candidates,
            trace=trace,
            box=box,
            work_dir=Path(work_dir) if work_dir is not None else None,
        )
