"""Stage-2 reasoning tests with scripted VLM replies."""

import json

import numpy as np
import pytest

from src.config import PromptToggles, ReasonerConfig
from src.exceptions import InputError
from src.mock_providers import MockEmbeddingProvider, ScriptedVlm
from src.models import (
    AxisAlignedBox,
    CameraIntrinsics,
    Candidate,
    CandidateView,
    CandidateViewSet,
    GlobalRender,
    GroundingQuery,
    Instance,
    Pose,
    SemanticEmbedding,
)
from src.reasoner import (
    NAMING_SCHEMA,
    UNKNOWN_NAME,
    axis_language,
    build_axis_map,
    extract_json_block,
    ground,
    match_target,
    name_candidates,
    parse_name,
    parse_spatial,
    trace_summary,
    vlm_usage,
    write_trace,
)

QUERY = GroundingQuery(query_id="s_q0", text="the red cube")
NAMES = ["blue sphere", "red cube", "green cylinder"]


def name_reply(name):
    return json.dumps({"name": name})


def pick(cid, relation="left of the sphere"):
    return json.dumps({"selected_id": cid, "relations": [relation], "explanation": "it fits"})


def make_candidates(n=3):
    out = []
    for k in range(n):
        box = AxisAlignedBox(min_corner=(k, 0, 0), max_corner=(k + 0.5, 0.5, 0.5))
        inst = Instance(
            instance_id=k,
            member_superpoints=(k,),
            point_indices=[k],
            aabb=box,
            obb=box.to_oriented(),
        )
        out.append(
            Candidate(
                instance=inst,
                embedding=SemanticEmbedding(vector=[1.0, 0.0], view_count=1),
                score=0.9 - 0.1 * k,
                candidate_id=k + 1,
            )
        )
    return out


def make_view_sets(n=3):
    return [
        CandidateViewSet(
            candidate_id=k + 1,
            views=[
                CandidateView(frame_id=0, image=np.zeros((4, 4, 3), np.uint8), box2d=(0, 0, 3, 3))
            ],
        )
        for k in range(n)
    ]


def make_globals(n=2):
    k = CameraIntrinsics(fx=2.0, fy=2.0, cx=2.0, cy=2.0, width=4, height=4)
    renders = []
    for j in range(n):
        eye = np.array([3.0 * np.cos(j), 3.0 * np.sin(j), 2.0])
        renders.append(
            GlobalRender(
                image=np.zeros((4, 4, 3), np.uint8),
                depth=np.full((4, 4), np.inf),
                camera=Pose.look_at(eye, np.zeros(3)),
                intrinsics=k,
            )
        )
    return renders


def run(replies, config=None, n=3, query=QUERY):
    vlm = ScriptedVlm(replies)
    trace, box = ground(
        query,
        make_candidates(n),
        make_globals(),
        make_view_sets(n),
        vlm,
        MockEmbeddingProvider(),
        config or ReasonerConfig(naming_workers=1),
    )
    return trace, box, vlm


class TestParsing:
    """Tests for reply parsing."""

    def test_fenced_block(self):
        """The first fenced block wins over surrounding prose."""
        text = 'Sure!\n```json\n{"name": "chair"}\n```\nmore'
        assert extract_json_block(text) == '{"name": "chair"}'
        assert extract_json_block(' {"a": 1} ') == '{"a": 1}'

    def test_parse_name(self):
        """Names are lower-cased noun phrases."""
        assert parse_name('{"name": "Red  Cube"}') == "red cube"
        assert parse_name('```\n{"name": "chair"}\n```') == "chair"
        assert parse_name("A chair.") == "a chair"
        assert parse_name("") is None
        assert parse_name(None) is None
        assert parse_name("42 !!") is None

    def test_parse_spatial(self):
        """Spatial replies must carry an integer selected_id."""
        answer = parse_spatial(pick(2))
        assert answer.selected_id == 2
        assert answer.relations == ["left of the sphere"]
        assert parse_spatial("```json\n" + pick(1) + "\n```").selected_id == 1
        assert parse_spatial("candidate two") is None
        assert parse_spatial('{"relations": []}') is None
        assert parse_spatial(None) is None


class TestAxisLanguage:
    """Tests for direction-word mapping."""

    def test_camera_looking_north(self):
        """A camera south of the scene looking along +y."""
        pose = Pose.look_at(np.array([0.0, -3.0, 2.0]), np.zeros(3))
        words = axis_language(pose)
        assert words["right"] == "+x"
        assert words["left"] == "-x"
        assert words["behind"] == "+y"
        assert words["in front of"] == "-y"
        assert words["above"] == "+z"

    def test_one_map_per_render(self):
        """The axis map has an entry per global render."""
        amap = build_axis_map(make_globals(3))
        assert len(amap.renders) == 3
        assert amap.as_text().count("view ") == 3


class TestNaming:
    """Tests for candidate naming and name matching."""

    def test_names_and_retries(self):
        """An unparsable naming reply is retried once."""
        vlm = ScriptedVlm(["!!!", name_reply("red cube"), name_reply("blue sphere")])
        names, retries = name_candidates(make_view_sets(2), vlm, retries=1, workers=1)
        assert names == {1: "red cube", 2: "blue sphere"}
        assert retries == 1
        assert vlm.calls == 3

    def test_unknown_after_retries(self):
        """Candidates that never get a usable name are unknown."""
        names, retries = name_candidates(make_view_sets(1), ScriptedVlm(["???"]), retries=2)
        assert names == {1: UNKNOWN_NAME}
        assert retries == 2

    def test_match_threshold(self):
        """Only names close to the query match; unknown never does."""
        names = {1: "blue sphere", 2: "red cube", 3: UNKNOWN_NAME}
        assert match_target(QUERY, names, MockEmbeddingProvider()) == [2]
        assert match_target(QUERY, names, MockEmbeddingProvider(), threshold=-1.0) == [1, 2]

    def test_naming_needs_views(self):
        """Naming without candidates is an input error."""
        with pytest.raises(InputError):
            name_candidates([], ScriptedVlm(["x"]))


class TestGround:
    """Tests for the full reasoning loop."""

    def test_consistent_first_answer(self):
        """A valid answer matching the name needs no correction."""
        trace, box, vlm = run([*map(name_reply, NAMES), pick(2)])
        assert trace.selected == 2
        assert trace.names == {1: "blue sphere", 2: "red cube", 3: "green cylinder"}
        assert trace.matched_target == [2]
        assert trace.correction_rounds == 0
        assert trace.fallback is None
        assert trace.relations == ["left of the sphere"]
        assert vlm.calls == 4
        assert box.center == pytest.approx((1.25, 0.25, 0.25))

    def test_inconsistent_answer_corrected(self):
        """Selecting a non-matching candidate triggers one correction with its close-ups."""
        trace, _, vlm = run([*map(name_reply, NAMES), pick(1), pick(2)])
        assert trace.selected == 2
        assert trace.correction_rounds == 1
        last = vlm.requests[-1]
        assert last.schema_id == "correction.v1"
        # two global renders plus the previous choice's single close-up
        assert len(last.images) == 3

    def test_unparsable_falls_back_to_scores(self):
        """Two unparsable answers fall back to the best matched Stage-1 score."""
        trace, _, vlm = run([*map(name_reply, NAMES), "no idea", "still no idea"])
        assert trace.selected == 2
        assert trace.fallback == "schema"
        assert trace.correction_rounds == 1
        assert vlm.calls == 5

    def test_invalid_id_projected(self):
        """An id outside the candidate set is projected onto it."""
        trace, _, _ = run([*map(name_reply, NAMES), pick(9), pick(9)])
        assert trace.selected == 1
        assert trace.fallback == "projection"

    def test_budget_respected(self):
        """No more than 1 + max_retries selection turns are issued."""
        config = ReasonerConfig(naming_workers=1, max_retries=3)
        trace, _, vlm = run([*map(name_reply, NAMES), "x"], config=config)
        assert trace.correction_rounds == 3
        assert vlm.calls == 3 + 4

    def test_single_candidate(self):
        """One candidate is selected without asking the VLM."""
        trace, _, vlm = run([pick(1)], n=1)
        assert trace.selected == 1
        assert trace.fallback == "single_candidate"
        assert vlm.calls == 0

    def test_without_naming(self):
        """With semantic prompting off there are no naming turns."""
        config = ReasonerConfig(naming_workers=1, toggles=PromptToggles(semantic=False))
        trace, _, vlm = run([pick(3)], config=config)
        assert trace.selected == 3
        assert trace.names == {}
        assert vlm.calls == 1
        assert vlm.requests[0].schema_id == "spatial.v1"

    def test_without_spatial(self):
        """With spatial prompting off close-ups replace the global renders."""
        config = ReasonerConfig(naming_workers=1, toggles=PromptToggles(spatial=False))
        trace, _, vlm = run([*map(name_reply, NAMES), pick(2)], config=config)
        spatial = vlm.requests[-1]
        assert "(not available)" in spatial.prompt
        assert len(spatial.images) == 3
        assert trace.selected == 2

    def test_single_turn(self):
        """Without the visual chain of thought one combined turn decides."""
        config = ReasonerConfig(toggles=PromptToggles(visual_cot=False))
        trace, _, vlm = run([pick(3)], config=config)
        assert trace.selected == 3
        assert vlm.calls == 1
        assert vlm.requests[0].schema_id == "combined.v1"
        # two global renders plus one close-up per candidate
        assert len(vlm.requests[0].images) == 5

    def test_single_turn_fallback(self):
        """An unusable combined reply falls back to the top score."""
        config = ReasonerConfig(toggles=PromptToggles(visual_cot=False))
        trace, _, _ = run(["nonsense"], config=config)
        assert trace.selected == 1
        assert trace.fallback == "schema"

    def test_no_candidates(self):
        """Grounding needs candidates."""
        with pytest.raises(InputError):
            ground(QUERY, [], [], [], ScriptedVlm(["x"]), MockEmbeddingProvider())


class TestTraceOutput:
    """Tests for trace.json and trace summaries."""

    def test_write_and_summarize(self, tmp_path):
        """The trace keeps every turn; the summary counts them."""
        trace, _, _ = run([*map(name_reply, NAMES), pick(2)])
        write_trace(trace, tmp_path / "trace.json")
        data = json.loads((tmp_path / "trace.json").read_text())
        assert len(data["turns"]) == 4
        assert data["turns"][0]["schema_id"] == NAMING_SCHEMA
        summary = trace_summary(trace)
        assert "turns" not in summary
        assert summary["turn_count"] == 4
        assert summary["naming_turns"] == 3

    def test_vlm_usage(self):
        """Usage counts every turn, its images and its characters."""
        trace, _, _ = run([*map(name_reply, NAMES), pick(2)])
        usage = vlm_usage(trace)
        assert usage["turns"] == 4
        assert usage["images"] == sum(len(t.images) for t in trace.turns)
        assert usage["prompt_chars"] == sum(len(t.prompt) for t in trace.turns) > 0
        assert usage["response_chars"] == sum(len(t.response or "") for t in trace.turns)


class TestFuzzedReplies:
    """Arbitrary VLM output never escapes the candidate set."""

    def random_reply(self, rng):
        kind = rng.integers(5)
        if kind == 0:
            return pick(int(rng.integers(-3, 8)))
        if kind == 1:
            return name_reply(NAMES[rng.integers(len(NAMES))])
        if kind == 2:
            return json.dumps({"selected_id": str(rng.integers(5)), "relations": "x"})
        if kind == 3:
            return "".join(chr(c) for c in rng.integers(32, 127, size=int(rng.integers(0, 40))))
        return "```json\n" + pick(float(rng.uniform(0, 4))) + "\n```"

    @pytest.mark.parametrize("max_retries", [0, 1, 2])
    def test_selection_always_valid(self, max_retries):
        """Selections stay in range and corrections within budget."""
        rng = np.random.default_rng(max_retries)
        config = ReasonerConfig(naming_workers=1, max_retries=max_retries)
        for _ in range(100):
            n = int(rng.integers(1, 4))
            replies = [self.random_reply(rng) for _ in range(8)]
            trace, _, _ = run(replies, config=config, n=n)
            assert 1 <= trace.selected <= n
            assert trace.correction_rounds <= max_retries
