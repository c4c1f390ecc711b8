"""Provider gateway tests against a fake HTTP session."""

import json

import numpy as np
import pytest
import requests

from src.exceptions import (
    BadStatus,
    MalformedResponse,
    PayloadTooLarge,
    ProviderError,
    ProviderTimeout,
)
from src.model_gateway import (
    HttpEmbeddingProvider,
    HttpMaskProvider,
    HttpVlmProvider,
    decode_embed_request,
    decode_mask_request,
    decode_vlm_request,
    encode_embed_response,
    encode_mask_request,
    encode_mask_response,
    encode_vlm_request,
    encode_vlm_response,
    http_call,
)
from src.models import (
    EmbedRequest,
    EmbedResponse,
    MaskRequest,
    MaskResponse,
    ProviderConfig,
    ScoredMask,
    VlmRequest,
    VlmResponse,
)

ENDPOINT = "http://provider.test/v1"


class FakeResponse:
    def __init__(self, status_code=200, body=None, text=None):
        self.status_code = status_code
        self._body = body
        self._text = text

    def json(self):
        if self._text is not None:
            return json.loads(self._text)
        return self._body


class FakeSession:
    """Replays responses (or raises exceptions) and records every POST."""

    def __init__(self, *outcomes):
        self.outcomes = list(outcomes)
        self.posts = []

    def post(self, url, data=None, headers=None, timeout=None):
        self.posts.append({"url": url, "data": data, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


@pytest.fixture
def config():
    return ProviderConfig(endpoint=ENDPOINT, timeout=5.0, max_retries=2)


@pytest.fixture
def sleeps():
    return []


class TestHttpCall:
    """Tests for retries and error mapping."""

    def test_success(self, config, sleeps):
        """A 200 JSON object is returned as is."""
        session = FakeSession(FakeResponse(body={"text": "hi"}))
        assert http_call(config, {"a": 1}, session=session, sleep=sleeps.append) == {"text": "hi"}
        assert json.loads(session.posts[0]["data"]) == {"a": 1}
        assert session.posts[0]["timeout"] == 5.0
        assert sleeps == []

    def test_retries_server_errors_with_backoff(self, config, sleeps):
        """5xx answers are retried after 1 s then 2 s."""
        session = FakeSession(
            FakeResponse(503), FakeResponse(500), FakeResponse(body={"vector": [1.0]})
        )
        assert http_call(config, {}, session=session, sleep=sleeps.append) == {"vector": [1.0]}
        assert sleeps == [1.0, 2.0]
        assert len(session.posts) == 3

    def test_gives_up_after_retries(self, config, sleeps):
        """The last server error surfaces as BadStatus."""
        session = FakeSession(FakeResponse(502), FakeResponse(502), FakeResponse(502))
        with pytest.raises(BadStatus) as exc:
            http_call(config, {}, provider="vlm", session=session, sleep=sleeps.append)
        assert exc.value.code == 502
        assert exc.value.provider == "vlm"
        assert "BadStatus(502)" in str(exc.value)

    def test_client_error_not_retried(self, config, sleeps):
        """4xx answers fail immediately."""
        session = FakeSession(FakeResponse(404))
        with pytest.raises(BadStatus):
            http_call(config, {}, session=session, sleep=sleeps.append)
        assert len(session.posts) == 1
        assert sleeps == []

    def test_timeout(self, config, sleeps):
        """Repeated timeouts raise ProviderTimeout."""
        session = FakeSession(*[requests.Timeout()] * 3)
        with pytest.raises(ProviderTimeout):
            http_call(config, {}, session=session, sleep=sleeps.append)
        assert len(session.posts) == 3

    def test_transport_failure_then_success(self, config, sleeps):
        """Connection errors are retried."""
        session = FakeSession(requests.ConnectionError("reset"), FakeResponse(body={"ok": 1}))
        assert http_call(config, {}, session=session, sleep=sleeps.append) == {"ok": 1}

    def test_malformed_body(self, config, sleeps):
        """Non-JSON and non-object bodies are MalformedResponse."""
        with pytest.raises(MalformedResponse):
            http_call(config, {}, session=FakeSession(FakeResponse(text="<html>")))
        with pytest.raises(MalformedResponse):
            http_call(config, {}, session=FakeSession(FakeResponse(body=[1, 2])))

    def test_payload_limit(self, sleeps):
        """Oversized bodies are refused before any request."""
        config = ProviderConfig(endpoint=ENDPOINT, max_payload=10)
        session = FakeSession()
        with pytest.raises(PayloadTooLarge) as exc:
            http_call(config, {"text": "x" * 100}, session=session, sleep=sleeps.append)
        assert exc.value.limit == 10
        assert session.posts == []

    def test_missing_endpoint(self, sleeps):
        """A provider without endpoint cannot be called."""
        with pytest.raises(ProviderError):
            http_call(ProviderConfig(), {}, session=FakeSession(), sleep=sleeps.append)

    def test_bearer_token(self, config, sleeps, monkeypatch):
        """The token from the configured variable goes into the header."""
        monkeypatch.setenv("UG_API_TOKEN", "secret")
        session = FakeSession(FakeResponse(body={}))
        http_call(config, {}, session=session, sleep=sleeps.append)
        assert session.posts[0]["headers"]["Authorization"] == "Bearer secret"


class TestWireCodec:
    """Tests for the JSON wire format."""

    def test_mask_request(self):
        """Images travel as base64 PNG and prompts as triples."""
        image = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        request = MaskRequest(image=image, points=[(1, 2, 1), (3, 4, 0)])
        payload = encode_mask_request(request)
        assert payload["points"] == [[1, 2, 1], [3, 4, 0]]
        decoded = decode_mask_request(json.loads(json.dumps(payload)))
        np.testing.assert_array_equal(decoded.image, image)
        assert decoded.points == request.points

    def test_vlm_request_omits_work_dir(self):
        """The local work directory never goes on the wire."""
        request = VlmRequest(prompt="p", schema_id="spatial.v1", work_dir="/tmp/x")
        payload = encode_vlm_request(request)
        assert set(payload) == {"images", "prompt", "schema"}
        assert decode_vlm_request(payload).work_dir is None


class TestHttpProviders:
    """Tests for the HTTP provider classes."""

    def test_mask_provider_decodes_rle(self, config):
        """Mask answers are decoded to the request image shape."""
        mask = np.zeros((4, 6), dtype=bool)
        mask[1:3, 2:5] = True
        body = encode_mask_response(MaskResponse(masks=[ScoredMask(mask=mask, confidence=0.8)]))
        provider = HttpMaskProvider(config, session=FakeSession(FakeResponse(body=body)))
        out = provider.segment(MaskRequest(image=np.zeros((4, 6, 3), np.uint8)))
        np.testing.assert_array_equal(out.masks[0].mask, mask)
        assert provider.calls == 1

    def test_embed_image(self, config):
        """Image embeddings send the crop as base64 PNG and return a float vector."""
        body = encode_embed_response(EmbedResponse(vector=[0.6, 0.8]))
        session = FakeSession(FakeResponse(body=body))
        provider = HttpEmbeddingProvider(config, session=session)
        image = np.full((3, 4, 3), 200, dtype=np.uint8)
        out = provider.embed(EmbedRequest(image=image))
        np.testing.assert_allclose(out.vector, [0.6, 0.8])
        sent = decode_embed_request(json.loads(session.posts[0]["data"]))
        np.testing.assert_array_equal(sent.image, image)

    def test_embed_shape_error(self, config):
        """A response without a vector is malformed."""
        provider = HttpEmbeddingProvider(config, session=FakeSession(FakeResponse(body={"v": 1})))
        with pytest.raises(MalformedResponse):
            provider.embed(EmbedRequest(text="chair"))

    def test_zero_vector_rejected(self, config):
        """An all-zero embedding is malformed."""
        provider = HttpEmbeddingProvider(
            config, session=FakeSession(FakeResponse(body={"vector": [0.0, 0.0]}))
        )
        with pytest.raises(MalformedResponse):
            provider.embed(EmbedRequest(text="chair"))

    def test_vlm_text(self, config):
        """VLM answers carry a text field."""
        body = encode_vlm_response(VlmResponse(text='{"name": "chair"}'))
        session = FakeSession(FakeResponse(body=body))
        provider = HttpVlmProvider(config, session=session)
        assert provider.generate(VlmRequest(prompt="p", schema_id="naming.v1")).text.endswith("}")
        sent = json.loads(session.posts[0]["data"])
        assert sent["schema"] == "naming.v1"

    def test_vlm_image_limit(self):
        """Requests with more images than allowed are refused."""
        config = ProviderConfig(endpoint=ENDPOINT, max_images=1)
        provider = HttpVlmProvider(config, session=FakeSession())
        images = [np.zeros((2, 2, 3), np.uint8)] * 2
        with pytest.raises(ProviderError):
            provider.generate(VlmRequest(images=images, prompt="p", schema_id="spatial.v1"))
