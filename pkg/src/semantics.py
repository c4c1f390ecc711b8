"""
Stage-1 semantic path: per-instance view selection, mask re-segmentation,
multi-scale crops, multi-view embedding and top-u query filtering.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from .config import SemanticsConfig, ViewsConfig
from .exceptions import EmptySelectionError, InputError, ProviderError
from .model_gateway import EmbeddingProvider, MaskProvider, embed_image, embed_text
from .models import (
    Candidate,
    Frame,
    GroundingQuery,
    Instance,
    MaskRequest,
    SemanticEmbedding,
)
from .projection import ViewCache
from .utils import cosine, l2_normalize
from .viewfactory import default_orbit_spec, orbit_positions, render_scene

logger = logging.getLogger(__name__)


def rank_views(counts: Mapping[int, int], max_views: int) -> list[int]:
    """Frame ids with a positive count, largest count first, ties by frame id."""
    if max_views < 1:
        raise InputError("max_views must be at least 1")
    ranked = sorted((fid for fid, n in counts.items() if n > 0), key=lambda f: (-counts[f], f))
    return ranked[:max_views]


def select_semantic_views(instance: Instance, cache: ViewCache, max_views: int = 10) -> list[int]:
    """Frames showing the most visible pixels of ``instance``; empty if it is never visible."""
    return rank_views(cache.visible_pixel_counts(instance.point_indices), max_views)


def prompt_stride(n_visible: int, max_prompts: int = 50, min_prompts: int = 10) -> int:
    """
    Stride over visible pixels keeping between ``min_prompts`` and ``max_prompts`` prompts.

    Taking every stride-th pixel yields ceil(n_visible / stride) prompts. Masks with fewer
    than ``min_prompts`` pixels prompt with all of them; when both bounds cannot hold the
    lower one wins.
    """
    stride = max(1, math.ceil(n_visible / max_prompts))
    floor = min(min_prompts, n_visible)
    if floor and math.ceil(n_visible / stride) < floor:
        stride = max(1, n_visible // floor)
    return stride


def projected_mask(instance: Instance, frame: Frame, cache: ViewCache) -> np.ndarray:
    k = frame.intrinsics
    mask = np.zeros(k.height * k.width, dtype=bool)
    mask[cache.visible_cells(instance.point_indices, frame.frame_id)] = True
    return mask.reshape(k.height, k.width)


def defect_correct(
    instance: Instance,
    frame: Frame,
    downsample_stride: int,
    mask_provider: MaskProvider,
    cache: ViewCache,
) -> np.ndarray:
    """
    Re-segment ``instance`` in ``frame`` from point prompts.

    Every ``downsample_stride``-th visible projected pixel becomes a positive
    prompt. The best provider mask is returned clipped to the image; provider
    failures and empty answers fall back to the raw projected mask.

    Raises:
        EmptySelectionError: If the instance is not visible in the frame.
    """
    raw = projected_mask(instance, frame, cache)
    rows, cols = np.nonzero(raw)
    if not len(rows):
        raise EmptySelectionError(
            f"instance {instance.instance_id} is not visible in frame {frame.frame_id}"
        )
    step = max(1, int(downsample_stride))
    prompts = [(int(u), int(v), 1) for v, u in zip(rows[::step], cols[::step], strict=True)]

    try:
        response = mask_provider.segment(MaskRequest(image=frame.rgb, points=prompts))
    except ProviderError as e:
        logger.warning(
            "Mask provider failed for instance %d frame %d, using projection: %s",
            instance.instance_id,
            frame.frame_id,
            e,
        )
        return raw
    if not response.masks:
        logger.warning(
            "Mask provider returned no mask for instance %d frame %d",
            instance.instance_id,
            frame.frame_id,
        )
        return raw

    best = response.masks[0].mask
    out = np.zeros_like(raw)
    h = min(best.shape[0], out.shape[0])
    w = min(best.shape[1], out.shape[1])
    out[:h, :w] = best[:h, :w]
    return out if out.any() else raw


def crop_rects(
    mask: np.ndarray, scales: Sequence[float], include_full_image: bool = True
) -> list[tuple[int, int, int, int]]:
    """
    Crop rectangles (x0, y0, x1, y1), half-open, for each scale.

    Scale s expands the tight mask bounding rectangle about its center by s
    and clamps it to the image. With ``include_full_image`` the last entry is
    the whole image.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptySelectionError("cannot crop around an empty mask")
    if not scales or scales[0] != 1.0 or any(
        a >= b for a, b in zip(scales, scales[1:], strict=False)
    ):
        raise InputError("scales must be ascending and start at 1.0")

    height, width = mask.shape
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    cy, cx = (y0 + y1) / 2, (x0 + x1) / 2
    h, w = y1 - y0, x1 - x0

    rects = []
    for s in scales:
        rects.append(
            (
                max(0, math.floor(cx - s * w / 2)),
                max(0, math.floor(cy - s * h / 2)),
                min(width, math.ceil(cx + s * w / 2)),
                min(height, math.ceil(cy + s * h / 2)),
            )
        )
    full = (0, 0, width, height)
    if include_full_image and rects[-1] != full:
        rects.append(full)
    return rects


def multiscale_crops(
    mask: np.ndarray,
    rgb: np.ndarray,
    scales: Sequence[float] = (1.0, 1.5, 2.25),
    include_full_image: bool = True,
) -> list[np.ndarray]:
    """Crops around ``mask`` at each scale, each resized back to the image resolution."""
    height, width = rgb.shape[:2]
    crops = []
    for x0, y0, x1, y1 in crop_rects(mask, scales, include_full_image):
        crop = Image.fromarray(np.ascontiguousarray(rgb[y0:y1, x0:x1]))
        if crop.size != (width, height):
            crop = crop.resize((width, height), Image.Resampling.BILINEAR)
        crops.append(np.asarray(crop))
    return crops


def embed_instance(
    crop_sequences: Sequence[Sequence[np.ndarray]],
    embedding_provider: EmbeddingProvider,
    workers: int = 1,
) -> SemanticEmbedding:
    """
    L2-normalised mean over views of the per-view mean crop embedding.

    Views whose crops fail to embed are dropped.

    Raises:
        ProviderError: If every view failed.
    """
    views = [list(seq) for seq in crop_sequences if len(seq)]
    if not views:
        raise EmptySelectionError("no view with at least one crop")

    def view_vector(crops: list[np.ndarray]) -> np.ndarray:
        return np.mean([embed_image(embedding_provider, c) for c in crops], axis=0)

    vectors: list[np.ndarray] = []
    last_error: ProviderError | None = None
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(view_vector, crops) for crops in views]
        for fut in futures:
            try:
                vectors.append(fut.result())
            except ProviderError as e:
                logger.warning("Dropping a view whose crops failed to embed: %s", e)
                last_error = e
    if not vectors:
        assert last_error is not None
        raise last_error
    try:
        unit = l2_normalize(np.mean(vectors, axis=0))
    except ValueError as e:
        raise EmptySelectionError(f"view embeddings cancel out: {e}") from e
    return SemanticEmbedding(vector=unit, view_count=len(vectors))


def filter_top_u(
    embedded: Sequence[tuple[Instance, SemanticEmbedding]],
    query: GroundingQuery,
    u: int,
    embedding_provider: EmbeddingProvider,
) -> list[Candidate]:
    """The ``u`` instances most similar to the query text, ids 1..u in score order."""
    if u < 1:
        raise InputError("u must be at least 1")
    if not embedded:
        raise EmptySelectionError("no embedded instances to filter")
    q = embed_text(embedding_provider, query.text)
    scored = sorted(
        ((cosine(emb.vector, q), inst, emb) for inst, emb in embedded),
        key=lambda t: (-t[0], t[1].instance_id),
    )
    candidates = [
        Candidate(instance=inst, embedding=emb, score=score, candidate_id=k + 1)
        for k, (score, inst, emb) in enumerate(scored[:u])
    ]
    logger.info(
        "Kept %d of %d instances for query %r", len(candidates), len(embedded), query.text
    )
    return candidates


def _fallback_crops(
    instance: Instance, cache: ViewCache, views: ViewsConfig, semantics: SemanticsConfig
) -> list[list[np.ndarray]]:
    """Crops from orbit renders around an instance no frame shows."""
    scene = cache.scene
    spec = default_orbit_spec(instance.aabb, views)
    intrinsics = views.intrinsics()
    member = np.zeros(scene.cloud.point_count, dtype=bool)
    member[instance.point_indices] = True
    out = []
    for pose in orbit_positions([instance.obb.center], spec):
        rendering = render_scene(scene.cloud, pose, intrinsics, views.base_radius)
        mask = (rendering.index >= 0) & member[np.maximum(rendering.index, 0)]
        if mask.any():
            out.append(
                multiscale_crops(
                    mask, rendering.image, semantics.scales, semantics.include_full_image
                )
            )
    return out


def instance_crop_sequences(
    instance: Instance,
    cache: ViewCache,
    mask_provider: MaskProvider,
    semantics: SemanticsConfig,
    views: ViewsConfig,
) -> list[list[np.ndarray]]:
    """Crop sequences of one instance over its best frames (orbit renders if none)."""
    frame_ids = select_semantic_views(instance, cache, semantics.max_views)
    if not frame_ids:
        logger.debug("Instance %d invisible in all frames; rendering views", instance.instance_id)
        return _fallback_crops(instance, cache, views, semantics)
    sequences = []
    for fid in frame_ids:
        frame = cache.scene.frame(fid)
        n_visible = len(cache.visible_cells(instance.point_indices, fid))
        stride = prompt_stride(n_visible, semantics.max_prompts, semantics.min_prompts)
        mask = defect_correct(instance, frame, stride, mask_provider, cache)
        sequences.append(
            multiscale_crops(mask, frame.rgb, semantics.scales, semantics.include_full_image)
        )
    return sequences


def embed_instances(
    instances: Sequence[Instance],
    cache: ViewCache,
    mask_provider: MaskProvider,
    embedding_provider: EmbeddingProvider,
    semantics: SemanticsConfig,
    views: ViewsConfig,
) -> dict[int, SemanticEmbedding]:
    """Embeddings of every instance with enough points, keyed by instance id."""
    eligible = [i for i in instances if i.point_count >= semantics.min_instance_points]

    def one(instance: Instance) -> tuple[int, SemanticEmbedding | None]:
        seqs = instance_crop_sequences(instance, cache, mask_provider, semantics, views)
        if not seqs:
            logger.warning("Instance %d has no usable view; not embedded", instance.instance_id)
            return instance.instance_id, None
        return instance.instance_id, embed_instance(seqs, embedding_provider)

    with ThreadPoolExecutor(max_workers=semantics.max_in_flight) as pool:
        results = list(pool.map(one, eligible))
    embeddings = {iid: emb for iid, emb in results if emb is not None}
    logger.info(
        "Embedded %d of %d instances (%d below %d points)",
        len(embeddings),
        len(instances),
        len(instances) - len(eligible),
        semantics.min_instance_points,
    )
    return embeddings
