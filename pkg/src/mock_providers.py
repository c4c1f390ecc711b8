"""
Deterministic offline providers.

All of them are pure functions of their input (plus a seed), except
:class:`ScriptedVlm`, which replays a fixed list of replies in order.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import zlib
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import MalformedResponse, ProviderError
from .model_gateway import CountingProvider
from .models import (
    EmbedRequest,
    EmbedResponse,
    MaskRequest,
    MaskResponse,
    ScoredMask,
    VlmRequest,
    VlmResponse,
)
from .synth import FLOOR_COLOR, PALETTE, SHAPES, label_color

logger = logging.getLogger(__name__)

EMBED_DIM = 64
LABELS: list[tuple[str, str]] = [(c, s) for c in PALETTE for s in SHAPES]
OTHER_DIM = len(LABELS)
FLOOR_DIM = OTHER_DIM + 1
UNKNOWN_DIM = EMBED_DIM - 2
BACKGROUND_DIM = EMBED_DIM - 1
CONTEXT_WEIGHT = 0.2
HEAD_WEIGHT = 1.0
MODIFIER_WEIGHT = 0.35

SYNONYMS = {
    "cube": "cube",
    "cubes": "cube",
    "box": "cube",
    "block": "cube",
    "cylinder": "cylinder",
    "can": "cylinder",
    "sphere": "sphere",
    "ball": "sphere",
    "floor": "floor",
    "ground": "floor",
}

CANDIDATE_FILE = "candidates.json"
ORACLE_TRUTH_FILE = "oracle_truth.json"

_WORD_RE = re.compile(r"[a-z]+")
_CANDIDATE_RE = re.compile(r"^Candidate: (\d+)\s*$", re.MULTILINE)
_QUERY_RE = re.compile(r"^Query: (.*)$", re.MULTILINE)
_NAMED_LINE_RE = re.compile(r"^\s+\d+: ", re.MULTILINE)


def _packed(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.uint32)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


_LABEL_CODES = np.array([_packed(np.array(label_color(c, s))) for c, s in LABELS])
_FLOOR_CODE = int(_packed(np.array(FLOOR_COLOR)))


class MockMaskProvider(CountingProvider):
    """
    Connected components of exactly equal colour; black is background.

    With point prompts only the component holding most positive prompts is
    returned.
    """

    kind = "mask"

    def segment(self, request: MaskRequest) -> MaskResponse:
        self._count()
        codes = _packed(request.image)
        components: list[np.ndarray] = []
        for code in np.unique(codes):
            if code == 0:
                continue
            labels, n = ndimage.label(codes == code)
            components.extend(labels == k for k in range(1, n + 1))
        components.sort(key=lambda m: (-int(m.sum()), int(np.argmax(m.reshape(-1)))))

        positives = [(u, v) for u, v, label in request.points if label > 0]
        if not positives:
            return MaskResponse(masks=[ScoredMask(mask=m, confidence=1.0) for m in components])
        h, w = codes.shape
        votes = [
            sum(1 for u, v in positives if 0 <= v < h and 0 <= u < w and m[v, u])
            for m in components
        ]
        if not votes or max(votes) == 0:
            return MaskResponse()
        best = int(np.argmax(votes))
        return MaskResponse(masks=[ScoredMask(mask=components[best], confidence=1.0)])


def text_vector(text: str) -> np.ndarray:
    """
    Bag of (colour, shape) phrases: the first phrase is the head noun, the
    rest are down-weighted modifiers. Lone colours or shapes spread over the
    labels they are compatible with.
    """
    words = [SYNONYMS.get(w, w) for w in _WORD_RE.findall(text.lower())]
    vec = np.zeros(EMBED_DIM)
    weight = HEAD_WEIGHT
    k = 0
    while k < len(words):
        w = words[k]
        nxt = words[k + 1] if k + 1 < len(words) else None
        dims: list[int] = []
        if w in PALETTE and nxt in SHAPES:
            dims = [LABELS.index((w, nxt))]
            k += 1
        elif w in PALETTE:
            dims = [i for i, (c, _) in enumerate(LABELS) if c == w]
        elif w in SHAPES:
            dims = [i for i, (_, s) in enumerate(LABELS) if s == w]
        elif w == "floor":
            dims = [FLOOR_DIM]
        k += 1
        if dims:
            vec[dims] += weight / len(dims)
            weight = MODIFIER_WEIGHT
    if not vec.any():
        vec[UNKNOWN_DIM] = 1.0
    return vec / np.linalg.norm(vec)


def image_vector(image: np.ndarray) -> np.ndarray:
    """Pixel share of each label colour; floor and background down-weighted."""
    codes = _packed(image).reshape(-1)
    total = codes.size
    vec = np.zeros(EMBED_DIM)
    hits = codes[:, None] == _LABEL_CODES[None, :]
    vec[: len(LABELS)] = hits.sum(axis=0) / total
    floor = float((codes == _FLOOR_CODE).sum()) / total
    background = float((codes == 0).sum()) / total
    vec[FLOOR_DIM] = CONTEXT_WEIGHT * floor
    vec[BACKGROUND_DIM] = CONTEXT_WEIGHT * background
    vec[OTHER_DIM] = CONTEXT_WEIGHT * max(0.0, 1.0 - vec[: len(LABELS)].sum() - floor - background)
    if not vec.any():
        vec[UNKNOWN_DIM] = 1.0
    return vec / np.linalg.norm(vec)


class MockEmbeddingProvider(CountingProvider):
    """64-dim joint space where a label's text and its rendered colour agree."""

    kind = "embed"

    def embed(self, request: EmbedRequest) -> EmbedResponse:
        self._count()
        if request.text is not None:
            return EmbedResponse(vector=text_vector(request.text))
        assert request.image is not None
        return EmbedResponse(vector=image_vector(request.image))


def _input_seed(request: EmbedRequest, seed: int) -> int:
    if request.text is not None:
        data = request.text.encode("utf-8")
    else:
        assert request.image is not None
        data = np.ascontiguousarray(request.image).tobytes()
    return zlib.crc32(data) ^ (seed & 0xFFFFFFFF)


class NoisyEmbeddingProvider(CountingProvider):
    """Adds input-seeded Gaussian noise to another embedder's vectors."""

    kind = "embed"

    def __init__(self, base: CountingProvider, sigma: float = 0.1, seed: int = 0):
        super().__init__()
        self.base = base
        self.sigma = sigma
        self.seed = seed

    def embed(self, request: EmbedRequest) -> EmbedResponse:
        self._count()
        vec = self.base.embed(request).vector  # type: ignore[attr-defined]
        rng = np.random.default_rng(_input_seed(request, self.seed))
        noisy = vec + rng.normal(0.0, self.sigma, size=vec.shape)
        if not noisy.any():
            noisy = vec
        return EmbedResponse(vector=noisy / np.linalg.norm(noisy))


class ScriptedVlm(CountingProvider):
    """Replays ``responses`` in order; the last one repeats once exhausted."""

    kind = "vlm"

    def __init__(self, responses: Sequence[str]):
        super().__init__()
        if not responses:
            raise ValueError("script needs at least one response")
        self.responses = list(responses)
        self.requests: list[VlmRequest] = []
        self._lock = threading.Lock()

    def generate(self, request: VlmRequest) -> VlmResponse:
        self._count()
        with self._lock:
            k = min(len(self.requests), len(self.responses) - 1)
            self.requests.append(request)
            return VlmResponse(text=self.responses[k])


class OracleVlm(CountingProvider):
    """
    Answers from the scene ground truth copied into the request's work
    directory: names are ground-truth labels, spatial turns pick the
    candidate whose box holds the query target.
    """

    kind = "vlm"

    def generate(self, request: VlmRequest) -> VlmResponse:
        self._count()
        truth, candidates = self._load(request)
        if request.schema_id.startswith("naming"):
            m = _CANDIDATE_RE.search(request.prompt)
            if not m:
                raise MalformedResponse("naming prompt carries no candidate id", provider="oracle")
            obj = self._object_of(truth, candidates.get(int(m.group(1))))
            return VlmResponse(text=json.dumps({"name": obj["label"] if obj else "floor"}))
        return VlmResponse(text=self.answer(self._choose(request, truth, candidates)))

    @staticmethod
    def answer(selected: int, relation: str = "") -> str:
        return json.dumps(
            {
                "selected_id": selected,
                "relations": [relation] if relation else [],
                "explanation": f"candidate {selected} matches the description",
            }
        )

    def _choose(self, request: VlmRequest, truth: dict, candidates: dict[int, dict]) -> int:
        target = self._target(request, truth)
        return self._candidate_of(target, truth, candidates) or min(candidates)

    @staticmethod
    def _load(request: VlmRequest) -> tuple[dict, dict[int, dict]]:
        if not request.work_dir:
            raise ProviderError("oracle needs a work directory", provider="oracle")
        root = Path(request.work_dir)
        try:
            with open(root / ORACLE_TRUTH_FILE, encoding="utf-8") as f:
                truth = json.load(f)
            with open(root / CANDIDATE_FILE, encoding="utf-8") as f:
                raw = json.load(f)["candidates"]
        except (OSError, ValueError, KeyError) as e:
            raise ProviderError(f"oracle ground truth unavailable: {e}", provider="oracle") from e
        return truth, {int(c["candidate_id"]): c for c in raw}

    @staticmethod
    def _target(request: VlmRequest, truth: dict) -> dict | None:
        m = _QUERY_RE.search(request.prompt)
        if not m:
            return None
        text = m.group(1).strip()
        for q in truth.get("queries", []):
            if q["text"] == text:
                return next(o for o in truth["objects"] if o["object_id"] == q["target_id"])
        return None

    @staticmethod
    def _object_of(truth: dict, candidate: dict | None) -> dict | None:
        """Ground-truth object whose box holds the candidate's box center."""
        if candidate is None:
            return None
        center = np.array(candidate["obb"]["center"])
        best, best_d = None, np.inf
        for obj in truth["objects"]:
            box = obj["box"]
            d = float(np.linalg.norm(center - np.array(box["center"])))
            if d <= float(np.linalg.norm(box["half_extents"])) and d < best_d:
                best, best_d = obj, d
        return best

    def _candidate_of(
        self, target: dict | None, truth: dict, candidates: dict[int, dict]
    ) -> int | None:
        if target is None:
            return None
        for cid in sorted(candidates):
            obj = self._object_of(truth, candidates[cid])
            if obj is not None and obj["object_id"] == target["object_id"]:
                return cid
        return None


class DegradedVlm(OracleVlm):
    """
    Oracle that only uses the evidence left in the prompt.

    It needs candidate names to recognise objects and the global renders to
    resolve relations; a combined single turn only recognises labels that
    are unique among the candidates. Without enough evidence it guesses,
    seeded by the prompt.
    """

    def _choose(self, request: VlmRequest, truth: dict, candidates: dict[int, dict]) -> int:
        target = self._target(request, truth)
        correct = self._candidate_of(target, truth, candidates)
        has_names = bool(_NAMED_LINE_RE.search(request.prompt))
        has_renders = "(not available)" not in request.prompt
        same_label = self._same_label(target, truth, candidates)

        if request.schema_id.startswith("combined"):
            if correct is not None and len(same_label) == 1:
                return correct
            return self._guess(request, candidates)
        if has_names and has_renders and correct is not None:
            return correct
        if has_names and same_label:
            return same_label[0]
        return self._guess(request, candidates)

    def _same_label(
        self, target: dict | None, truth: dict, candidates: dict[int, dict]
    ) -> list[int]:
        if target is None:
            return []
        out = []
        for cid in sorted(candidates):
            obj = self._object_of(truth, candidates[cid])
            if obj is not None and obj["label"] == target["label"]:
                out.append(cid)
        return out

    @staticmethod
    def _guess(request: VlmRequest, candidates: dict[int, dict]) -> int:
        rng = np.random.default_rng(zlib.crc32(request.prompt.encode("utf-8")))
        ids = sorted(candidates)
        return int(ids[rng.integers(len(ids))])
