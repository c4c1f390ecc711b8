"""
Superpoint construction: supervoxel flood clustering, region growing and
voxel adjacency.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .exceptions import EmptySelectionError, InputError, OutputError, TooFewPointsError
from .models import AdjacencyGraph, PointCloud, Superpoint
from .utils import NEIGHBOR_OFFSETS_26, KeyCodec, voxel_keys

logger = logging.getLogger(__name__)

_COLOR_NORM = 255.0 * math.sqrt(3.0)
_OFFSETS_27 = np.vstack([np.zeros((1, 3), dtype=np.int64), NEIGHBOR_OFFSETS_26])


def estimate_normals(
    cloud: PointCloud, k_neighbors: int = 16, viewpoint: np.ndarray | None = None
) -> np.ndarray:
    """
    Unit normals from the smallest principal axis of each k-neighbourhood.

    Normals are flipped to face ``viewpoint`` (the first camera position in the
    pipeline); without one they face +z.

    Raises:
        TooFewPointsError: If the cloud has fewer than ``k_neighbors`` points.
    """
    if k_neighbors < 3:
        raise InputError("k_neighbors must be at least 3")
    n = cloud.point_count
    if n < k_neighbors:
        raise TooFewPointsError(n, k_neighbors)

    pos = cloud.positions
    _, idx = cKDTree(pos).query(pos, k=k_neighbors)
    nb = pos[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    if viewpoint is None:
        flip = normals[:, 2] < 0
    else:
        flip = ((np.asarray(viewpoint) - pos) * normals).sum(axis=1) < 0
    normals[flip] *= -1
    return normals


def make_superpoint(
    sp_id: int, point_indices: np.ndarray, cloud: PointCloud, normals: np.ndarray
) -> Superpoint:
    idx = np.asarray(point_indices, dtype=np.int64)
    normal = normals[idx].sum(axis=0)
    norm = np.linalg.norm(normal)
    normal = normal / norm if norm > 0 else np.array([0.0, 0.0, 1.0])
    return Superpoint(
        sp_id=sp_id,
        point_indices=idx,
        centroid=tuple(cloud.positions[idx].mean(axis=0).tolist()),
        mean_normal=tuple(normal.tolist()),
        mean_color=tuple(cloud.colors[idx].astype(np.float64).mean(axis=0).tolist()),
    )


class _VoxelGrid:
    """Occupied voxels of a cloud with per-voxel features and 26-neighbour lists."""

    def __init__(self, cloud: PointCloud, normals: np.ndarray, voxel_size: float):
        keys = voxel_keys(cloud.positions, voxel_size)
        self.codec = KeyCodec(keys)
        codes = self.codec.encode(keys)
        self.codes, first, self.point_voxel = np.unique(
            codes, return_index=True, return_inverse=True
        )
        self.keys = keys[first]
        self.count = len(self.codes)

        counts = np.bincount(self.point_voxel, minlength=self.count).astype(np.float64)

        def mean(values: np.ndarray) -> np.ndarray:
            return np.column_stack(
                [
                    np.bincount(self.point_voxel, weights=values[:, k], minlength=self.count)
                    for k in range(values.shape[1])
                ]
            ) / counts[:, None]

        self.centroids = mean(cloud.positions)
        self.colors = mean(cloud.colors.astype(np.float64))
        nsum = mean(normals)
        norm = np.linalg.norm(nsum, axis=1, keepdims=True)
        self.normals = np.where(norm > 0, nsum / np.maximum(norm, 1e-12), [0.0, 0.0, 1.0])
        self.neighbors = self._neighbor_lists()

    def _neighbor_lists(self) -> list[np.ndarray]:
        src_parts, dst_parts = [], []
        for off in NEIGHBOR_OFFSETS_26:
            nc = self.codec.encode(self.keys + off)
            pos = np.searchsorted(self.codes, nc)
            pos = np.minimum(pos, self.count - 1)
            found = self.codes[pos] == nc
            src_parts.append(np.flatnonzero(found))
            dst_parts.append(pos[found])
        src = np.concatenate(src_parts)
        dst = np.concatenate(dst_parts)
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        splits = np.searchsorted(src, np.arange(1, self.count))
        return np.split(dst, splits)


def supervoxel_cluster(
    cloud: PointCloud,
    normals: np.ndarray,
    voxel_size: float = 0.02,
    seed_spacing: float = 0.5,
    weights: tuple[float, float, float] = (0.2, 0.4, 1.0),
    max_distance: float = 0.6,
) -> list[Superpoint]:
    """
    Partition the cloud into 26-connected supervoxels.

    Seeds are the lowest-index occupied voxel of each seed-spacing grid cell.
    Seeds expand best-first over voxel neighbours, each voxel going to the
    seed reaching it with the smallest weighted distance

        D = w_spatial * |dx| / seed_spacing + w_color * |dc| / (255 * sqrt 3)
            + w_normal * (1 - |n . n_seed|)

    and expansion stops at voxels with D > max_distance. Voxels no seed
    reaches are re-seeded, lowest index first, until every voxel belongs to
    a supervoxel; isolated voxels become singleton superpoints.

    Args:
        weights: (w_color, w_spatial, w_normal).
    """
    if cloud.point_count == 0:
        raise EmptySelectionError("cannot cluster an empty cloud")
    if voxel_size <= 0 or seed_spacing < voxel_size:
        raise InputError("need voxel_size > 0 and seed_spacing >= voxel_size")
    w_color, w_spatial, w_normal = weights

    grid = _VoxelGrid(cloud, normals, voxel_size)
    seed_cells = np.floor((grid.keys + 0.5) * voxel_size / seed_spacing).astype(np.int64)
    _, first = np.unique(KeyCodec(seed_cells).encode(seed_cells), return_index=True)
    seeds: list[int] = sorted(int(v) for v in first)

    label = np.full(grid.count, -1, dtype=np.int64)

    def flood(heap: list[tuple[float, int, int]]) -> None:
        while heap:
            _, s, vox = heapq.heappop(heap)
            if label[vox] != -1:
                continue
            label[vox] = s
            nbs = grid.neighbors[vox]
            nbs = nbs[label[nbs] == -1]
            if not len(nbs):
                continue
            seed = seeds[s]
            d = (
                w_spatial * np.linalg.norm(grid.centroids[nbs] - grid.centroids[seed], axis=1)
                / seed_spacing
                + w_color * np.linalg.norm(grid.colors[nbs] - grid.colors[seed], axis=1)
                / _COLOR_NORM
                + w_normal * (1.0 - np.abs(grid.normals[nbs] @ grid.normals[seed]))
            )
            for dist, nb in zip(d.tolist(), nbs.tolist(), strict=True):
                if dist <= max_distance:
                    heapq.heappush(heap, (dist, s, nb))

    flood([(0.0, s, v) for s, v in enumerate(seeds)])
    initial = len(seeds)
    while True:
        unclaimed = np.flatnonzero(label == -1)
        if not len(unclaimed):
            break
        seeds.append(int(unclaimed[0]))
        flood([(0.0, len(seeds) - 1, int(unclaimed[0]))])

    point_label = label[grid.point_voxel]
    order = np.argsort(point_label, kind="stable")
    bounds = np.searchsorted(point_label[order], np.arange(len(seeds) + 1))
    result = [
        make_superpoint(s, order[bounds[s] : bounds[s + 1]], cloud, normals)
        for s in range(len(seeds))
        if bounds[s + 1] > bounds[s]
    ]
    logger.info(
        "Supervoxels: %d (%d grid seeds, %d re-seeds) over %d voxels",
        len(result),
        initial,
        len(seeds) - initial,
        grid.count,
    )
    return result


def build_adjacency(
    superpoints: list[Superpoint], cloud: PointCloud, voxel_size: float = 0.02
) -> AdjacencyGraph:
    """Edge (i, j) iff a voxel of i equals or is 26-adjacent to a voxel of j."""
    nodes = tuple(sp.sp_id for sp in superpoints)
    if not superpoints:
        return AdjacencyGraph(nodes=nodes)

    idx = np.concatenate([sp.point_indices for sp in superpoints])
    labels = np.concatenate([np.full(sp.size, sp.sp_id) for sp in superpoints])
    keys = voxel_keys(cloud.positions[idx], voxel_size)
    codec = KeyCodec(keys)
    codes = codec.encode(keys)

    pairs, first = np.unique(np.column_stack([codes, labels]), axis=0, return_index=True)
    pair_codes, pair_labels = pairs[:, 0], pairs[:, 1]
    pair_keys = keys[first]

    found: list[np.ndarray] = []
    for off in _OFFSETS_27:
        nc = codec.encode(pair_keys + off)
        lo = np.searchsorted(pair_codes, nc, side="left")
        hi = np.searchsorted(pair_codes, nc, side="right")
        cnt = hi - lo
        total = int(cnt.sum())
        if not total:
            continue
        src = np.repeat(np.arange(len(pair_codes)), cnt)
        within = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        dst = np.repeat(lo, cnt) + within
        a, b = pair_labels[src], pair_labels[dst]
        keep = a < b
        found.append(np.column_stack([a[keep], b[keep]]))

    if found:
        edges = np.unique(np.vstack(found), axis=0)
        edge_set = {(int(i), int(j)) for i, j in edges}
    else:
        edge_set = set()
    return AdjacencyGraph(nodes=nodes, edges=frozenset(edge_set))


def _normal_angle(a: tuple[float, ...], b: tuple[float, ...]) -> float:
    return math.acos(min(1.0, abs(float(np.dot(a, b)))))


def region_grow(
    superpoints: list[Superpoint],
    cloud: PointCloud,
    normals: np.ndarray,
    voxel_size: float = 0.02,
    angle_thresh: float = math.radians(15.0),
    color_thresh: float = 30.0,
) -> list[Superpoint]:
    """
    Merge adjacent superpoints with similar mean normals and colours.

    Normals are compared as unoriented lines. Merging repeats on the updated
    means until no adjacent pair qualifies; output ids are renumbered by
    smallest point index, so the operation is idempotent.
    """
    if not (0 < angle_thresh < math.pi / 2) or color_thresh < 0:
        raise InputError("need angle_thresh in (0, pi/2) and color_thresh >= 0")

    current = list(superpoints)
    rounds = 0
    while True:
        graph = build_adjacency(current, cloud, voxel_size)
        by_id = {sp.sp_id: sp for sp in current}
        qualifying = [
            (i, j)
            for i, j in sorted(graph.edges)
            if _normal_angle(by_id[i].mean_normal, by_id[j].mean_normal) <= angle_thresh
            and float(np.linalg.norm(np.subtract(by_id[i].mean_color, by_id[j].mean_color)))
            <= color_thresh
        ]
        if not qualifying:
            break
        rounds += 1
        pos = {sp.sp_id: k for k, sp in enumerate(current)}
        rows = [pos[i] for i, _ in qualifying]
        cols = [pos[j] for _, j in qualifying]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(current), len(current)))
        n_comp, comp = connected_components(adj, directed=False)
        groups: list[list[np.ndarray]] = [[] for _ in range(n_comp)]
        for k, sp in enumerate(current):
            groups[comp[k]].append(sp.point_indices)
        current = [
            make_superpoint(c, np.concatenate(g), cloud, normals) for c, g in enumerate(groups)
        ]

    current.sort(key=lambda sp: int(sp.point_indices[0]))
    result = [
        make_superpoint(k, sp.point_indices, cloud, normals) for k, sp in enumerate(current)
    ]
    logger.info(
        "Region growing: %d -> %d superpoints in %d rounds",
        len(superpoints),
        len(result),
        rounds,
    )
    return result


def dump_superpoints(superpoints: list[Superpoint], path: str | Path) -> None:
    """Write ``superpoints.json``: sp_id -> point index list."""
    data = {str(sp.sp_id): sp.point_indices.tolist() for sp in superpoints}
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f)
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e
