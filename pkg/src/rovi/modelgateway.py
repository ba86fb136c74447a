"""Uniform clients for the external model services.

Three service kinds share one transport: chat completion (VLM/LLM, with
one-token logprob alternatives), open-vocabulary detectors, and an optional
aesthetic scorer.  The client adds retry with exponential backoff and full
jitter, a bounded in-flight budget per backend, and a response cache keyed
by (backend id, request digest).

Wire protocol (JSON over POST):

  chat:     {model_name, messages: [{role, parts: [{type: "text", text} |
             {type: "image", data: <base64>}]}], max_tokens, temperature,
             logprobs, top_alternatives}
         -> {content, alternatives: [[{token_text, logprob}, ...] per token],
             finish_reason}
  detector: {image: <base64>, categories: [...], score_threshold}
         -> {detections: [{bbox: [x1,y1,x2,y2], category, score}]}
  scorer:   {image: <base64>} -> {score}
"""

from __future__ import annotations

import base64
import hashlib
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

from .datamodel import canonical_json


class GatewayError(RuntimeError):
    """Transport or service failure surviving all retries."""


class ProtocolError(GatewayError):
    """The service answered, but the body violates the wire contract."""


@dataclass
class BackendSpec:
    kind: str  # chat | detector | scorer
    endpoint: str
    model_name: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    backoff_base: float = 0.5
    max_in_flight: int = 8
    bearer_token: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("chat", "detector", "scorer"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.timeout <= 0 or self.max_retries < 0:
            raise ValueError("timeout must be > 0 and max_retries >= 0")


def text_part(text: str) -> dict:
    return {"type": "text", "text": text}


def image_part(image_bytes: bytes) -> dict:
    return {"type": "image", "data": base64.b64encode(image_bytes).decode("ascii")}


@dataclass
class ChatRequest:
    messages: list[dict]
    max_tokens: int = 256
    temperature: float = 0.0  # all pipeline calls are deterministic
    logprobs: bool = False
    top_alternatives: int = 0
    model_name: str = ""

    def to_wire(self) -> dict:
        return {
            "model_name": self.model_name,
            "messages": self.messages,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "logprobs": self.logprobs,
            "top_alternatives": self.top_alternatives,
        }

    def text(self) -> str:
        """All text parts concatenated, for tests and fixtures."""
        chunks = []
        for msg in self.messages:
            for part in msg.get("parts", []):
                if part.get("type") == "text":
                    chunks.append(part["text"])
        return "\n".join(chunks)

    def digest(self) -> str:
        return request_digest(self.to_wire())


@dataclass
class ChatResponse:
    content: str
    alternatives: list[list[tuple[str, float]]] = field(default_factory=list)
    finish_reason: str = "stop"
    retries: int = 0


def request_digest(body: dict) -> str:
    """Stable hex digest of a wire-protocol request body."""
    return hashlib.blake2b(canonical_json(body).encode("utf-8"), digest_size=16).hexdigest()


def _post_with_retries(backend: BackendSpec, body: dict, rng: random.Random) -> tuple[dict, int]:
    """POST the body, retrying transient failures; return (json, retries)."""
    headers = {"Content-Type": "application/json"}
    if backend.bearer_token:
        headers["Authorization"] = f"Bearer {backend.bearer_token}"
    payload = canonical_json(body).encode("utf-8")
    last_error: Exception | None = None
    for attempt in range(backend.max_retries + 1):
        if attempt > 0:
            # exponential backoff with full jitter
            time.sleep(rng.uniform(0.0, backend.backoff_base * (2 ** (attempt - 1))))
        try:
            resp = requests.post(
                backend.endpoint, data=payload, headers=headers, timeout=backend.timeout
            )
            if resp.status_code != 200:
                raise GatewayError(f"{backend.endpoint}: HTTP {resp.status_code}: {resp.text[:200]}")
            return resp.json(), attempt
        except (requests.RequestException, ValueError, GatewayError) as exc:
            last_error = exc
    raise GatewayError(
        f"{backend.endpoint}: failed after {backend.max_retries + 1} attempts: {last_error}"
    ) from last_error


def _parse_chat_response(obj: dict, retries: int) -> ChatResponse:
    try:
        alternatives = [
            [(alt["token_text"], float(alt["logprob"])) for alt in token_alts]
            for token_alts in obj.get("alternatives", [])
        ]
        return ChatResponse(
            content=obj["content"],
            alternatives=alternatives,
            finish_reason=obj.get("finish_reason", "stop"),
            retries=retries,
        )
    except (KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed chat response: {exc}") from exc


def _parse_detections(obj: dict, categories: list[str], backend: BackendSpec):
    allowed = set(categories)
    out = []
    try:
        for det in obj["detections"]:
            bbox = det["bbox"]
            category = det["category"]
            score = float(det["score"])
            if category not in allowed:
                raise ProtocolError(
                    f"{backend.endpoint}: category {category!r} not in request list"
                )
            if not 0.0 <= score <= 1.0:
                raise ProtocolError(f"{backend.endpoint}: score {score} outside [0,1]")
            out.append(((float(bbox[0]), float(bbox[1]), float(bbox[2]), float(bbox[3])), category, score))
    except (KeyError, TypeError, IndexError) as exc:
        raise ProtocolError(f"{backend.endpoint}: malformed detector response: {exc}") from exc
    return out


def chat_complete(req: ChatRequest, backend: BackendSpec, rng: random.Random | None = None) -> ChatResponse:
    """One completed chat response, or GatewayError after retries."""
    if backend.kind != "chat":
        raise ValueError(f"backend kind {backend.kind!r} is not chat")
    body = req.to_wire()
    if not body["model_name"]:
        body["model_name"] = backend.model_name
    obj, retries = _post_with_retries(backend, body, rng or random.Random())
    return _parse_chat_response(obj, retries)


def detect_request(
    image_bytes: bytes,
    categories: list[str],
    threshold: float,
    backend: BackendSpec,
    rng: random.Random | None = None,
) -> list[tuple[tuple[float, float, float, float], str, float]]:
    """Send one detection request; returns (box, category, score) triples."""
    if backend.kind != "detector":
        raise ValueError(f"backend kind {backend.kind!r} is not detector")
    if not categories:
        raise ValueError("categories must be non-empty")
    body = {
        "image": base64.b64encode(image_bytes).decode("ascii"),
        "categories": list(categories),
        "score_threshold": threshold,
    }
    obj, _ = _post_with_retries(backend, body, rng or random.Random())
    return _parse_detections(obj, list(categories), backend)


class Gateway:
    """Share-safe multi-backend client with caching and in-flight budgets."""

    def __init__(self, backends: dict[str, BackendSpec], cache: bool = True):
        self.backends = dict(backends)
        self._semaphores = {
            bid: threading.BoundedSemaphore(spec.max_in_flight)
            for bid, spec in self.backends.items()
        }
        self._cache: Optional[dict] = {} if cache else None
        self._cache_lock = threading.Lock()
        self._rng = random.Random()

    def backend(self, backend_id: str) -> BackendSpec:
        try:
            return self.backends[backend_id]
        except KeyError:
            raise GatewayError(f"no backend configured with id {backend_id!r}") from None

    def _cached(self, backend_id: str, digest: str):
        if self._cache is None:
            return None
        with self._cache_lock:
            return self._cache.get((backend_id, digest))

    def _store(self, backend_id: str, digest: str, value) -> None:
        if self._cache is None:
            return
        with self._cache_lock:
            self._cache[(backend_id, digest)] = value

    def chat_complete(self, req: ChatRequest, backend_id: str) -> ChatResponse:
        backend = self.backend(backend_id)
        body = req.to_wire()
        if not body["model_name"]:
            body["model_name"] = backend.model_name
        digest = request_digest(body)
        hit = self._cached(backend_id, digest)
        if hit is not None:
            return hit
        with self._semaphores[backend_id]:
            obj, retries = _post_with_retries(backend, body, self._rng)
        resp = _parse_chat_response(obj, retries)
        self._store(backend_id, digest, resp)
        return resp

    def detect(self, image_bytes: bytes, categories: list[str], threshold: float, backend_id: str):
        backend = self.backend(backend_id)
        body = {
            "image": base64.b64encode(image_bytes).decode("ascii"),
            "categories": list(categories),
            "score_threshold": threshold,
        }
        digest = request_digest(body)
        hit = self._cached(backend_id, digest)
        if hit is not None:
            return hit
        with self._semaphores[backend_id]:
            obj, _ = _post_with_retries(backend, body, self._rng)
        dets = _parse_detections(obj, list(categories), backend)
        self._store(backend_id, digest, dets)
        return dets

    def score(self, image_bytes: bytes, backend_id: str) -> float:
        backend = self.backend(backend_id)
        if backend.kind != "scorer":
            raise ValueError(f"backend kind {backend.kind!r} is not scorer")
        body = {"image": base64.b64encode(image_bytes).decode("ascii")}
        digest = request_digest(body)
        hit = self._cached(backend_id, digest)
        if hit is not None:
            return hit
        with self._semaphores[backend_id]:
            obj, _ = _post_with_retries(backend, body, self._rng)
        try:
            score = float(obj["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed scorer response: {exc}") from exc
        self._store(backend_id, digest, score)
        return score
