"""
Provider contracts for the mask, embedding and VLM models, the JSON wire
codec, and the HTTP backends.

Wire schema:
    mask   {"image": b64, "points": [[u, v, label], ...]}
           -> {"masks": [{"rle": [...], "confidence": f}, ...]}
    embed  {"image": b64} | {"text": str} -> {"vector": [f, ...]}
    vlm    {"images": [b64, ...], "prompt": str, "schema": str} -> {"text": str}
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections.abc import Callable
from typing import Any, Protocol

import numpy as np
import requests
from pydantic import ValidationError

from .exceptions import (
    BadStatus,
    MalformedResponse,
    PayloadTooLarge,
    ProviderError,
    ProviderTimeout,
)
from .models import (
    EmbedRequest,
    EmbedResponse,
    MaskRequest,
    MaskResponse,
    ProviderConfig,
    ScoredMask,
    VlmRequest,
    VlmResponse,
)
from .utils import b64_to_image, image_to_b64, rle_decode, rle_encode

logger = logging.getLogger(__name__)


class MaskProvider(Protocol):
    def segment(self, request: MaskRequest) -> MaskResponse: ...


class EmbeddingProvider(Protocol):
    def embed(self, request: EmbedRequest) -> EmbedResponse: ...


class VlmProvider(Protocol):
    def generate(self, request: VlmRequest) -> VlmResponse: ...


class CountingProvider:
    """Thread-safe call counter shared by every provider implementation."""

    kind: str = "provider"

    def __init__(self) -> None:
        self._calls = 0
        self._count_lock = threading.Lock()

    def _count(self) -> None:
        with self._count_lock:
            self._calls += 1

    @property
    def calls(self) -> int:
        return self._calls


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    return provider.embed(EmbedRequest(text=text)).vector


def embed_image(provider: EmbeddingProvider, image: np.ndarray) -> np.ndarray:
    return provider.embed(EmbedRequest(image=image)).vector


# ----------------------------------------------------------------- codec


def encode_mask_request(request: MaskRequest) -> dict[str, Any]:
    return {
        "image": image_to_b64(request.image),
        "points": [[int(u), int(v), int(label)] for u, v, label in request.points],
    }


def decode_mask_request(payload: dict[str, Any]) -> MaskRequest:
    return MaskRequest(
        image=b64_to_image(payload["image"]),
        points=[(int(u), int(v), int(label)) for u, v, label in payload.get("points", [])],
    )


def encode_mask_response(response: MaskResponse) -> dict[str, Any]:
    return {
        "masks": [
            {"rle": rle_encode(m.mask), "confidence": float(m.confidence)}
            for m in response.masks
        ]
    }


def decode_mask_response(payload: dict[str, Any], shape: tuple[int, int]) -> MaskResponse:
    masks = [
        ScoredMask(mask=rle_decode(m["rle"], shape), confidence=float(m["confidence"]))
        for m in payload["masks"]
    ]
    return MaskResponse(masks=masks)


def encode_embed_request(request: EmbedRequest) -> dict[str, Any]:
    if request.image is not None:
        return {"image": image_to_b64(request.image)}
    return {"text": request.text}


def decode_embed_request(payload: dict[str, Any]) -> EmbedRequest:
    if "image" in payload:
        return EmbedRequest(image=b64_to_image(payload["image"]))
    return EmbedRequest(text=payload["text"])


def encode_embed_response(response: EmbedResponse) -> dict[str, Any]:
    return {"vector": response.vector.tolist()}


def decode_embed_response(payload: dict[str, Any]) -> EmbedResponse:
    return EmbedResponse(vector=payload["vector"])


def encode_vlm_request(request: VlmRequest) -> dict[str, Any]:
    return {
        "images": [image_to_b64(img) for img in request.images],
        "prompt": request.prompt,
        "schema": request.schema_id,
    }


def decode_vlm_request(payload: dict[str, Any]) -> VlmRequest:
    return VlmRequest(
        images=[b64_to_image(s) for s in payload.get("images", [])],
        prompt=payload["prompt"],
        schema_id=payload["schema"],
    )


def encode_vlm_response(response: VlmResponse) -> dict[str, Any]:
    return {"text": response.text}


def decode_vlm_response(payload: dict[str, Any]) -> VlmResponse:
    text = payload["text"]
    if not isinstance(text, str):
        raise TypeError("text must be a string")
    return VlmResponse(text=text)


# ------------------------------------------------------------------ http


def http_call(
    config: ProviderConfig,
    payload: dict[str, Any],
    provider: str = "http",
    session: requests.Session | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> dict[str, Any]:
    """
    POST ``payload`` as JSON and return the decoded JSON object.

    5xx answers, timeouts and transport failures are retried up to
    ``config.max_retries`` times after 1 s, 2 s, 4 s ... waits. 4xx answers
    are never retried.

    Raises:
        PayloadTooLarge: Encoded body exceeds ``config.max_payload`` (no request sent).
        ProviderTimeout: Last attempt timed out.
        BadStatus: Non-success status.
        MalformedResponse: Body is not a JSON object.
    """
    body = json.dumps(payload).encode("utf-8")
    if len(body) > config.max_payload:
        raise PayloadTooLarge(len(body), config.max_payload, provider=provider)
    if not config.endpoint:
        raise ProviderError("no endpoint configured", provider=provider)

    headers = {"Content-Type": "application/json"}
    token = os.environ.get(config.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    http = session or requests.Session()

    error: ProviderError = ProviderError("no attempt made", provider=provider)
    for attempt in range(config.max_retries + 1):
        try:
            resp = http.post(config.endpoint, data=body, headers=headers, timeout=config.timeout)
        except requests.Timeout:
            error = ProviderTimeout(f"no answer within {config.timeout}s", provider=provider)
        except requests.RequestException as e:
            error = ProviderError(f"transport failure: {e}", provider=provider)
        else:
            if resp.status_code >= 500:
                error = BadStatus(resp.status_code, provider=provider)
            elif resp.status_code >= 300:
                raise BadStatus(resp.status_code, provider=provider)
            else:
                try:
                    data = resp.json()
                except ValueError as e:
                    raise MalformedResponse(f"body is not JSON: {e}", provider=provider) from e
                if not isinstance(data, dict):
                    raise MalformedResponse("body is not a JSON object", provider=provider)
                return data

        if attempt < config.max_retries:
            delay = float(2**attempt)
            logger.warning("%s; retrying in %.0fs (attempt %d)", error, delay, attempt + 1)
            sleep(delay)
    raise error


class HttpGateway(CountingProvider):
    """Shareable handle to one HTTP provider with an in-flight cap."""

    def __init__(
        self,
        config: ProviderConfig,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__()
        self.config = config
        self.session = session or requests.Session()
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def _post(self, payload: dict[str, Any]) -> dict[str, Any]:
        self._count()
        with self._slots:
            return http_call(self.config, payload, self.kind, self.session, self.sleep)

    def _decode(self, decode: Callable[[], Any]) -> Any:
        try:
            return decode()
        except (KeyError, TypeError, ValueError, ValidationError) as e:
            raise MalformedResponse(f"unexpected response shape: {e}", provider=self.kind) from e


class HttpMaskProvider(HttpGateway):
    kind = "mask"

    def segment(self, request: MaskRequest) -> MaskResponse:
        data = self._post(encode_mask_request(request))
        return self._decode(lambda: decode_mask_response(data, request.image.shape[:2]))


class HttpEmbeddingProvider(HttpGateway):
    kind = "embed"

    def embed(self, request: EmbedRequest) -> EmbedResponse:
        data = self._post(encode_embed_request(request))
        return self._decode(lambda: decode_embed_response(data))


class HttpVlmProvider(HttpGateway):
    kind = "vlm"

    def generate(self, request: VlmRequest) -> VlmResponse:
        if len(request.images) > self.config.max_images:
            raise ProviderError(
                f"{len(request.images)} images exceed the limit of {self.config.max_images}",
                provider=self.kind,
            )
        data = self._post(encode_vlm_request(request))
        return self._decode(lambda: decode_vlm_response(data))
