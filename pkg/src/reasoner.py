"""
Stage-2 reasoning: name every candidate, match names to the query, select
the target over the global renders, and re-query once more when the choice
is unparsable, invalid or contradicts the name match.

Every reply is parsed against a JSON schema (first fenced block, else the
whole reply); whatever the VLM says, the selected id is projected onto the
candidate set.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path
from string import Template

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from .config import ReasonerConfig
from .exceptions import InputError, OutputError
from .model_gateway import EmbeddingProvider, VlmProvider, embed_text
from .models import (
    AxisLanguageMap,
    Candidate,
    CandidateViewSet,
    GlobalRender,
    GroundingQuery,
    OrientedBox,
    Pose,
    ReasoningTrace,
    VlmExchange,
    VlmRequest,
    VlmTurn,
)
from .utils import cosine

logger = logging.getLogger(__name__)

NAMING_SCHEMA = "naming.v1"
SPATIAL_SCHEMA = "spatial.v1"
CORRECTION_SCHEMA = "correction.v1"
COMBINED_SCHEMA = "combined.v1"
UNKNOWN_NAME = "unknown"

_FENCE_RE = re.compile(r"```(?:[a-zA-Z]+)?\s*(.*?)```", re.DOTALL)
_PHRASE_RE = re.compile(r"^[a-z][a-z \-]{0,40}$")


def load_prompt(prompt_id: str) -> Template:
    """Prompt template ``prompts/<prompt_id>.txt``."""
    text = resources.files(__package__).joinpath("prompts", f"{prompt_id}.txt").read_text("utf-8")
    return Template(text)


class NamingAnswer(BaseModel):
    name: str = Field(min_length=1)


class SpatialAnswer(BaseModel):
    selected_id: int
    relations: list[str] = Field(default_factory=list)
    explanation: str = ""


def extract_json_block(text: str) -> str:
    m = _FENCE_RE.search(text)
    return (m.group(1) if m else text).strip()


def parse_name(text: str | None) -> str | None:
    """A noun phrase from a JSON ``{"name": ...}`` reply or a short plain reply."""
    if not text:
        return None
    try:
        name = NamingAnswer.model_validate_json(extract_json_block(text)).name
    except ValidationError:
        name = text
    phrase = " ".join(name.strip().strip("\"'.").lower().split())
    return phrase if _PHRASE_RE.match(phrase) else None


def parse_spatial(text: str | None) -> SpatialAnswer | None:
    if not text:
        return None
    try:
        return SpatialAnswer.model_validate_json(extract_json_block(text))
    except ValidationError:
        return None


def _dominant_axis(direction: np.ndarray) -> str:
    k = int(np.argmax(np.abs(direction[:2])))
    sign = "+" if direction[k] >= 0 else "-"
    return f"{sign}{'xy'[k]}"


def _negate(axis: str) -> str:
    return ("-" if axis[0] == "+" else "+") + axis[1]


def axis_language(pose: Pose) -> dict[str, str]:
    """Direction words of one render mapped to signed world axes."""
    right = _dominant_axis(pose.rotation[:, 0])
    away = _dominant_axis(pose.rotation[:, 2])
    return {
        "right": right,
        "left": _negate(right),
        "behind": away,
        "in front of": _negate(away),
        "above": "+z",
        "below": "-z",
    }


def build_axis_map(global_renders: Sequence[GlobalRender]) -> AxisLanguageMap:
    return AxisLanguageMap(renders=[axis_language(r.camera) for r in global_renders])


class TurnLog:
    """Ordered record of every VLM exchange of one grounding."""

    def __init__(self) -> None:
        self.exchanges: list[VlmExchange] = []
        self._lock = threading.Lock()

    def ask(
        self,
        vlm: VlmProvider,
        turn: VlmTurn,
        images: Sequence[np.ndarray],
        work_dir: str | None = None,
    ) -> str:
        logger.debug("VLM turn %s with %d images", turn.expected_schema, len(images))
        reply = vlm.generate(
            VlmRequest(
                images=list(images),
                prompt=turn.prompt,
                schema_id=turn.expected_schema,
                work_dir=work_dir,
            )
        ).text
        with self._lock:
            self.exchanges.append(
                VlmExchange(
                    schema_id=turn.expected_schema,
                    images=turn.images,
                    prompt=turn.prompt,
                    response=reply,
                )
            )
        return reply


def name_candidates(
    view_sets: Sequence[CandidateViewSet],
    vlm: VlmProvider,
    retries: int = 1,
    workers: int = 4,
    log: TurnLog | None = None,
    work_dir: str | None = None,
) -> tuple[dict[int, str], int]:
    """
    One naming turn per candidate over its annotated views.

    Unparsable replies are retried ``retries`` times, then named "unknown".

    Returns:
        (candidate id -> name, number of naming retries issued)
    """
    if not view_sets:
        raise InputError("naming needs at least one candidate view set")
    log = log or TurnLog()
    template = load_prompt(NAMING_SCHEMA)

    def one(vs: CandidateViewSet) -> tuple[int, str, int]:
        turn = VlmTurn(
            images=[f"cand_{vs.candidate_id}_{j}.png" for j in range(len(vs.views))],
            prompt=template.substitute(view_count=len(vs.views), candidate_id=vs.candidate_id),
            expected_schema=NAMING_SCHEMA,
        )
        images = [v.image for v in vs.views]
        for attempt in range(retries + 1):
            name = parse_name(log.ask(vlm, turn, images, work_dir))
            if name:
                return vs.candidate_id, name, attempt
        logger.warning("Candidate %d could not be named", vs.candidate_id)
        return vs.candidate_id, UNKNOWN_NAME, retries

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, view_sets))
    return {cid: name for cid, name, _ in results}, sum(n for _, _, n in results)


def match_target(
    query: GroundingQuery,
    names: dict[int, str],
    embedding_provider: EmbeddingProvider,
    threshold: float = 0.6,
) -> list[int]:
    """Candidate ids whose name embedding is within ``threshold`` cosine of the query."""
    if not names:
        raise InputError("matching needs at least one name")
    q = embed_text(embedding_provider, query.text)
    matched = []
    for cid in sorted(names):
        if names[cid] == UNKNOWN_NAME:
            continue
        if cosine(embed_text(embedding_provider, names[cid]), q) >= threshold:
            matched.append(cid)
    logger.info("Names matching %r: %s", query.text, matched)
    return matched


def _candidate_lines(candidates: Sequence[Candidate], names: dict[int, str]) -> str:
    lines = []
    for c in sorted(candidates, key=lambda c: c.candidate_id):
        label = f": {names[c.candidate_id]}" if c.candidate_id in names else ""
        lines.append(f"  {c.candidate_id}{label} (score {c.score:.3f})")
    return "\n".join(lines)


def _global_images(
    global_renders: Sequence[GlobalRender],
    view_sets: Sequence[CandidateViewSet],
    use_renders: bool,
) -> tuple[list[str], list[np.ndarray]]:
    """Global renders, or one close-up per candidate when renders are switched off."""
    if use_renders:
        return (
            [f"global_{k}.png" for k in range(len(global_renders))],
            [r.image for r in global_renders],
        )
    refs, images = [], []
    for vs in view_sets:
        if vs.views:
            refs.append(f"cand_{vs.candidate_id}_0.png")
            images.append(vs.views[0].image)
    return refs, images


def spatial_select(
    query: GroundingQuery,
    global_renders: Sequence[GlobalRender],
    axis_map: AxisLanguageMap,
    candidates: Sequence[Candidate],
    matched: Sequence[int],
    vlm: VlmProvider,
    names: dict[int, str] | None = None,
    view_sets: Sequence[CandidateViewSet] = (),
    use_renders: bool = True,
    note: str = "",
    log: TurnLog | None = None,
    work_dir: str | None = None,
) -> SpatialAnswer | None:
    """One spatial turn; returns the parsed answer or None on a schema violation."""
    if use_renders and not global_renders:
        raise InputError("spatial selection needs at least one global render")
    log = log or TurnLog()
    refs, images = _global_images(global_renders, view_sets, use_renders)
    prompt = load_prompt(SPATIAL_SCHEMA).substitute(
        query=query.text,
        axis_map=axis_map.as_text() if use_renders else "(not available)",
        candidates=_candidate_lines(candidates, names or {}),
        matched=", ".join(map(str, matched)) or "none",
        note=note,
    )
    turn = VlmTurn(images=refs, prompt=prompt, expected_schema=SPATIAL_SCHEMA)
    return parse_spatial(log.ask(vlm, turn, images, work_dir))


def _correction_turn(
    query: GroundingQuery,
    global_renders: Sequence[GlobalRender],
    axis_map: AxisLanguageMap,
    candidates: Sequence[Candidate],
    matched: Sequence[int],
    names: dict[int, str],
    previous: int,
    reason: str,
    view_set: CandidateViewSet | None,
    view_sets: Sequence[CandidateViewSet],
    use_renders: bool,
    vlm: VlmProvider,
    log: TurnLog,
    work_dir: str | None,
) -> SpatialAnswer | None:
    refs, images = _global_images(global_renders, view_sets, use_renders)
    extra = list(view_set.views) if view_set else []
    refs += [f"cand_{previous}_{j}.png" for j in range(len(extra))]
    images += [v.image for v in extra]
    prompt = load_prompt(CORRECTION_SCHEMA).substitute(
        query=query.text,
        previous_id=previous,
        reason=reason,
        extra_count=len(extra),
        axis_map=axis_map.as_text() if use_renders else "(not available)",
        candidates=_candidate_lines(candidates, names),
        matched=", ".join(map(str, matched)) or "none",
    )
    turn = VlmTurn(images=refs, prompt=prompt, expected_schema=CORRECTION_SCHEMA)
    return parse_spatial(log.ask(vlm, turn, images, work_dir))


def _combined_turn(
    query: GroundingQuery,
    global_renders: Sequence[GlobalRender],
    axis_map: AxisLanguageMap,
    candidates: Sequence[Candidate],
    view_sets: Sequence[CandidateViewSet],
    use_renders: bool,
    vlm: VlmProvider,
    log: TurnLog,
    work_dir: str | None,
) -> SpatialAnswer | None:
    refs: list[str] = []
    images: list[np.ndarray] = []
    if use_renders:
        refs, images = _global_images(global_renders, view_sets, True)
    for vs in view_sets:
        refs += [f"cand_{vs.candidate_id}_{j}.png" for j in range(len(vs.views))]
        images += [v.image for v in vs.views]
    prompt = load_prompt(COMBINED_SCHEMA).substitute(
        query=query.text,
        candidate_ids=", ".join(str(c.candidate_id) for c in candidates),
        axis_map=axis_map.as_text() if use_renders else "(not available)",
    )
    turn = VlmTurn(images=refs, prompt=prompt, expected_schema=COMBINED_SCHEMA)
    return parse_spatial(log.ask(vlm, turn, images, work_dir))


def _top_scored(candidates: Sequence[Candidate], among: Sequence[int] | None = None) -> int:
    pool = [c for c in candidates if among is None or c.candidate_id in among]
    return max(pool, key=lambda c: (c.score, -c.candidate_id)).candidate_id


def ground(
    query: GroundingQuery,
    candidates: Sequence[Candidate],
    global_renders: Sequence[GlobalRender],
    candidate_view_sets: Sequence[CandidateViewSet],
    vlm_provider: VlmProvider,
    embedding_provider: EmbeddingProvider,
    config: ReasonerConfig | None = None,
    work_dir: str | None = None,
) -> tuple[ReasoningTrace, OrientedBox]:
    """
    Select the query target among ``candidates``.

    Spatial and correction turns share one budget of 1 + max_retries turns;
    every turn after the first counts as a correction round. A reply that
    does not parse is re-asked unchanged; an invalid or inconsistent
    selection is re-asked with that candidate's close-ups added. Naming
    retries are budgeted separately.

    Returns:
        The reasoning trace and the selected candidate's box.
    """
    if not candidates:
        raise InputError("grounding needs at least one candidate")
    config = config or ReasonerConfig()
    toggles = config.toggles
    by_id = {c.candidate_id: c for c in candidates}
    view_by_id = {vs.candidate_id: vs for vs in candidate_view_sets}
    log = TurnLog()
    axis_map = build_axis_map(global_renders)

    def finish(trace: ReasoningTrace) -> tuple[ReasoningTrace, OrientedBox]:
        trace.turns = list(log.exchanges)
        logger.info(
            "Selected candidate %d (corrections %d, fallback %s)",
            trace.selected,
            trace.correction_rounds,
            trace.fallback,
        )
        return trace, by_id[trace.selected].instance.obb

    if len(candidates) == 1:
        only = candidates[0].candidate_id
        return finish(ReasoningTrace(selected=only, fallback="single_candidate"))

    if not toggles.visual_cot:
        answer = _combined_turn(
            query,
            global_renders,
            axis_map,
            candidates,
            candidate_view_sets,
            toggles.spatial,
            vlm_provider,
            log,
            work_dir,
        )
        if answer is not None and answer.selected_id in by_id:
            return finish(
                ReasoningTrace(
                    selected=answer.selected_id,
                    relations=answer.relations,
                    explanation=answer.explanation,
                )
            )
        reason = "schema" if answer is None else "projection"
        return finish(ReasoningTrace(selected=_top_scored(candidates), fallback=reason))

    names: dict[int, str] = {}
    naming_retries = 0
    matched: list[int] = []
    if toggles.semantic:
        names, naming_retries = name_candidates(
            candidate_view_sets,
            vlm_provider,
            config.naming_retries,
            config.naming_workers,
            log,
            work_dir,
        )
        matched = match_target(query, names, embedding_provider, config.match_threshold)

    answer = spatial_select(
        query,
        global_renders,
        axis_map,
        candidates,
        matched,
        vlm_provider,
        names,
        candidate_view_sets,
        toggles.spatial,
        "",
        log,
        work_dir,
    )
    rounds = 0
    while True:
        if answer is None:
            problem = "schema"
        elif answer.selected_id not in by_id:
            problem = "invalid"
        elif matched and answer.selected_id not in matched:
            problem = "inconsistent"
        else:
            problem = None
        if problem is None or rounds >= config.max_retries:
            break
        rounds += 1
        logger.debug("Correction round %d after %s answer", rounds, problem)
        if answer is None:
            answer = spatial_select(
                query,
                global_renders,
                axis_map,
                candidates,
                matched,
                vlm_provider,
                names,
                candidate_view_sets,
                toggles.spatial,
                "Your previous reply was not valid JSON in the required format.",
                log,
                work_dir,
            )
        else:
            reason = (
                "That id is not one of the candidates."
                if problem == "invalid"
                else "Its name does not match the query while candidates "
                f"{', '.join(map(str, matched))} do."
            )
            answer = _correction_turn(
                query,
                global_renders,
                axis_map,
                candidates,
                matched,
                names,
                answer.selected_id,
                reason,
                view_by_id.get(answer.selected_id),
                candidate_view_sets,
                toggles.spatial,
                vlm_provider,
                log,
                work_dir,
            )

    fallback = None
    if answer is not None and answer.selected_id in by_id:
        selected = answer.selected_id
    elif answer is not None:
        logger.warning("VLM selected unknown candidate %d; projecting", answer.selected_id)
        selected, fallback = _top_scored(candidates), "projection"
    else:
        logger.warning("No parsable spatial answer; falling back to Stage-1 scores")
        selected, fallback = _top_scored(candidates, matched or None), "schema"
    return finish(
        ReasoningTrace(
            names=names,
            matched_target=matched,
            relations=answer.relations if answer else [],
            selected=selected,
            explanation=answer.explanation if answer and fallback is None else "",
            correction_rounds=rounds,
            naming_retries=naming_retries,
            fallback=fallback,
        )
    )


def write_trace(trace: ReasoningTrace, path: str | Path) -> None:
    try:
        Path(path).write_text(trace.model_dump_json(indent=2), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"Failed to write {path}: {e}") from e


def trace_summary(trace: ReasoningTrace) -> dict:
    """Compact JSON-ready view of a trace without the verbatim turns."""
    data = json.loads(trace.model_dump_json(exclude={"turns"}))
    data["turn_count"] = len(trace.turns)
    data["naming_turns"] = sum(1 for t in trace.turns if t.schema_id == NAMING_SCHEMA)
    return data



def vlm_usage(trace: ReasoningTrace) -> dict[str, int]:
    """Turns, images and prompt/response characters a trace spent on the VLM."""
    return {
        "turns": len(trace.turns),
        "images": sum(len(t.images) for t in trace.turns),
        "prompt_chars": sum(len(t.prompt) for t in trace.turns),
        "response_chars": sum(len(t.response or "") for t in trace.turns),
    }
