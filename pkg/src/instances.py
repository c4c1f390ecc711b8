"""
Multi-view affinity and progressive superpoint merging.

The affinity of two superpoints averages, over the views where both are
visible, the product of their visible fractions and the cosine of their
mask-coverage features. Merging runs greedily under a relaxing threshold
schedule so confidently related regions fuse before weakly related ones.
"""

from __future__ import annotations

import heapq
import json
import logging
from collections.abc import Callable, Iterable, Mapping
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np

from .exceptions import InputError, OutputError, ScheduleError
from .models import (
    AdjacencyGraph,
    AffinityEdge,
    Instance,
    MergeResult,
    MergeSchedule,
    PointCloud,
    Superpoint,
    ViewObservation,
)
from .scene_model import fit_aabb, fit_oriented_box
from .utils import cosine

logger = logging.getLogger(__name__)

Observations = Mapping[int, ViewObservation]
ObserveFn = Callable[[np.ndarray], list[ViewObservation]]


def _by_frame(obs: Iterable[ViewObservation] | Observations) -> dict[int, ViewObservation]:
    if isinstance(obs, Mapping):
        return dict(obs)
    return {o.frame_id: o for o in obs}


def pair_affinity(
    obs_i: Iterable[ViewObservation] | Observations,
    obs_j: Iterable[ViewObservation] | Observations,
    size_i: int | None = None,
    size_j: int | None = None,
) -> tuple[float, int]:
    """
    Affinity of two superpoints and the number of views it was averaged over.

    Visible fractions use each view's projected pixel count as denominator;
    passing ``size_i``/``size_j`` switches to the superpoints' point counts.

    Returns:
        (affinity, m) with affinity 0 when no view shows both.
    """
    a, b = _by_frame(obs_i), _by_frame(obs_j)
    terms: list[float] = []
    for fid in sorted(a.keys() & b.keys()):
        oa, ob = a[fid], b[fid]
        if oa.visible_pixels == 0 or ob.visible_pixels == 0:
            continue
        den_a = size_i if size_i is not None else oa.total_pixels
        den_b = size_j if size_j is not None else ob.total_pixels
        frac_a = min(1.0, oa.visible_pixels / den_a)
        frac_b = min(1.0, ob.visible_pixels / den_b)
        terms.append(frac_a * frac_b * max(0.0, cosine(oa.mask_feature, ob.mask_feature)))
    if not terms:
        return 0.0, 0
    return float(np.clip(np.mean(terms), 0.0, 1.0)), len(terms)


def affinity_edges(
    graph: AdjacencyGraph,
    observations: Mapping[int, list[ViewObservation]],
    sizes: Mapping[int, int] | None = None,
    workers: int = 4,
) -> list[AffinityEdge]:
    """Affinity of every graph edge, sorted by (i, j)."""
    edges = sorted(graph.edges)

    def one(edge: tuple[int, int]) -> AffinityEdge:
        i, j = edge
        aff, m = pair_affinity(
            observations.get(i, []),
            observations.get(j, []),
            sizes[i] if sizes else None,
            sizes[j] if sizes else None,
        )
        return AffinityEdge(i=i, j=j, affinity=aff, contributing_views=m)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, edges))


def linear_schedule(start: float, end: float, stages: int) -> MergeSchedule:
    """Thresholds relaxed linearly from ``start`` to ``end``."""
    if start <= end:
        raise ScheduleError(f"schedule start {start} must exceed end {end}")
    if stages < 2:
        raise ScheduleError(f"schedule needs at least 2 stages, got {stages}")
    step = (start - end) / (stages - 1)
    return MergeSchedule(thresholds=tuple(start - t * step for t in range(stages)))


def merge_observations(
    a: Observations, b: Observations
) -> dict[int, ViewObservation]:
    """Per-view sums of counts and visible-pixel weighted mean of features."""
    out: dict[int, ViewObservation] = {}
    for fid in sorted(a.keys() | b.keys()):
        oa, ob = a.get(fid), b.get(fid)
        if oa is None or ob is None:
            out[fid] = oa or ob  # type: ignore[assignment]
            continue
        vis = oa.visible_pixels + ob.visible_pixels
        fa, fb = np.asarray(oa.mask_feature), np.asarray(ob.mask_feature)
        if vis and fa.size:
            feat = (oa.visible_pixels * fa + ob.visible_pixels * fb) / vis
        else:
            feat = np.zeros(max(fa.size, fb.size))
        out[fid] = ViewObservation(
            frame_id=fid,
            visible_pixels=vis,
            total_pixels=oa.total_pixels + ob.total_pixels,
            mask_feature=tuple(np.clip(feat, 0.0, 1.0).tolist()),
        )
    return out


class _MergeState:
    """Working partition: node id = smallest member superpoint id."""

    def __init__(
        self,
        superpoints: list[Superpoint],
        graph: AdjacencyGraph,
        observations: Mapping[int, list[ViewObservation]],
        denominator: Literal["projected", "points"],
        observe_fn: ObserveFn | None,
    ):
        self.points = {sp.sp_id: sp.point_indices for sp in superpoints}
        self.members = {sp.sp_id: [sp.sp_id] for sp in superpoints}
        self.obs = {sid: _by_frame(observations.get(sid, [])) for sid in self.points}
        self.version = dict.fromkeys(self.points, 0)
        self.adj: dict[int, set[int]] = {sid: set() for sid in self.points}
        for i, j in graph.edges:
            if i not in self.points or j not in self.points:
                raise InputError(f"adjacency edge ({i}, {j}) references an unknown superpoint")
            self.adj[i].add(j)
            self.adj[j].add(i)
        self.denominator = denominator
        self.observe_fn = observe_fn

    def size(self, node: int) -> int:
        return len(self.points[node])

    def affinity(self, i: int, j: int) -> float:
        if self.denominator == "points":
            aff, _ = pair_affinity(self.obs[i], self.obs[j], self.size(i), self.size(j))
        else:
            aff, _ = pair_affinity(self.obs[i], self.obs[j])
        return aff

    def edges_of(self, node: int) -> list[tuple[int, int]]:
        return [(min(node, n), max(node, n)) for n in sorted(self.adj[node])]

    def all_edges(self) -> list[tuple[int, int]]:
        return sorted({e for node in self.adj for e in self.edges_of(node)})

    def merge(self, i: int, j: int) -> int:
        keep, gone = min(i, j), max(i, j)
        self.points[keep] = np.union1d(self.points[keep], self.points.pop(gone))
        self.members[keep] = sorted(self.members[keep] + self.members.pop(gone))
        gone_obs = self.obs.pop(gone)
        if self.observe_fn is not None:
            self.obs[keep] = _by_frame(self.observe_fn(self.points[keep]))
        else:
            self.obs[keep] = merge_observations(self.obs[keep], gone_obs)
        for n in self.adj.pop(gone):
            self.adj[n].discard(gone)
            if n != keep:
                self.adj[n].add(keep)
                self.adj[keep].add(n)
        self.adj[keep].discard(gone)
        self.version.pop(gone)
        self.version[keep] += 1
        return keep


def progressive_merge(
    superpoints: list[Superpoint],
    graph: AdjacencyGraph,
    observations: Mapping[int, list[ViewObservation]],
    schedule: MergeSchedule,
    cloud: PointCloud,
    order: Literal["affinity", "size"] = "affinity",
    denominator: Literal["projected", "points"] = "projected",
    observe_fn: ObserveFn | None = None,
) -> MergeResult:
    """
    Merge adjacent superpoints stage by stage down the threshold schedule.

    Within a stage the qualifying pair (affinity >= threshold) with the
    highest affinity merges first, ties going to the smaller combined point
    count, then to the smaller (i, j). With ``order="size"`` the smallest
    combined point count goes first instead. Merged nodes take the union of
    their members' adjacency; their observations are combined per view, or
    recomputed through ``observe_fn`` when given.
    """
    state = _MergeState(superpoints, graph, observations, denominator, observe_fn)

    def key(i: int, j: int, aff: float) -> tuple:
        combined = state.size(i) + state.size(j)
        if order == "size":
            return (combined, -aff, i, j)
        return (-aff, combined, i, j)

    stage_counts: list[int] = []
    merges = 0

    def push(heap: list[tuple], i: int, j: int, tau: float) -> None:
        aff = state.affinity(i, j)
        if aff >= tau:
            heapq.heappush(heap, (key(i, j, aff), state.version[i], state.version[j]))

    for tau in schedule.thresholds:
        heap: list[tuple] = []
        for i, j in state.all_edges():
            push(heap, i, j, tau)
        while heap:
            k, vi, vj = heapq.heappop(heap)
            i, j = k[-2], k[-1]
            if state.version.get(i) != vi or state.version.get(j) != vj:
                continue
            node = state.merge(i, j)
            merges += 1
            for a, b in state.edges_of(node):
                push(heap, a, b, tau)
        stage_counts.append(len(state.points))
        logger.info("Merge stage tau=%.3f: %d instances", tau, len(state.points))

    instances = []
    for iid, node in enumerate(sorted(state.points)):
        pts = cloud.positions[state.points[node]]
        instances.append(
            Instance(
                instance_id=iid,
                member_superpoints=tuple(state.members[node]),
                point_indices=state.points[node],
                aabb=fit_aabb(pts),
                obb=fit_oriented_box(pts),
            )
        )
    logger.debug("Progressive merge performed %d merges", merges)
    return MergeResult(instances=instances, stage_counts=stage_counts)


def dump_instances(instances: list[Instance], path: str | Path) -> None:
    """Write ``instances.json``: instance_id -> superpoint ids, AABB, OBB."""
    data = {
        str(inst.instance_id): {
            "superpoints": list(inst.member_superpoints),
            "point_count": inst.point_count,
            "aabb": inst.aabb.model_dump(),
            "obb": inst.obb.model_dump(),
        }
        for inst in instances
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e
