"""Deterministic mock model services for offline tests and demos.

One HTTP server hosts every service kind the pipeline talks to:

  POST /chat            chat-completion protocol (VLM describe, LLM
                        summarize, verifier yes/no)
  POST /detect/<name>   one detector personality per name
  POST /score           aesthetic scorer

Responses are resolved in order: exact fixture file (keyed by request
digest), then the fallback mode: "template" synthesizes a deterministic
response from the request content alone, "error" answers 500.  Every
request is appended to a JSONL log for test assertions.
"""

from __future__ import annotations

import base64
import io
import json
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from .datamodel import canonical_json
from .modelgateway import request_digest
from .resample import fnv1a64

MOCK_STYLES = [
    "digital photograph",
    "black and white photograph",
    "oil painting",
    "watercolor illustration",
]

# Multi-word entries first so pass-1 scanning prefers compound phrases.
MOCK_OBJECTS = [
    "wallpaper mural",
    "chocolate cake",
    "wooden chair",
    "stone bridge",
    "red bicycle",
    "glass vase",
    "striped cat",
    "leather sofa",
    "yellow umbrella",
    "brick wall",
    "green lamp",
    "cockatoo",
]


def _pick(rng: np.random.Generator, items: list[str], k: int) -> list[str]:
    idx = rng.choice(len(items), size=k, replace=False)
    return [items[i] for i in sorted(idx)]


def synth_describe(image_b64: str) -> str:
    rng = np.random.default_rng(fnv1a64(b"describe|" + image_b64.encode("ascii")))
    style = MOCK_STYLES[int(rng.integers(len(MOCK_STYLES)))]
    objects = _pick(rng, MOCK_OBJECTS, 3 + int(rng.integers(2)))
    sentences = [f"This is a {style} of a quiet scene."]
    for i, obj in enumerate(objects):
        place = ["near the center", "on the left", "on the right", "in the background"][i % 4]
        sentences.append(f"The image shows a {obj} {place}.")
    sentences.append("There are no visible people in the frame.")
    return " ".join(sentences)


def synth_pass1(text: str) -> str:
    lowered = text.lower()
    found = [obj for obj in MOCK_OBJECTS if obj in lowered]
    return "\n".join(found)


def synth_pass2(text: str) -> str:
    phrases = [
        line[2:].strip()
        for line in text.splitlines()
        if line.startswith("- ") and line[2:].strip()
    ]
    out: list[str] = []
    for phrase in phrases:
        for word in phrase.split():
            if len(word) > 2 and word not in out:
                out.append(word)
    return "\n".join(out)


def synth_verify(body: dict) -> dict:
    h = fnv1a64(canonical_json(body).encode("utf-8"))
    mode = h % 10
    if mode == 0:
        p_yes, p_no = 0.30, 0.10  # low mass -> indeterminate downstream
    elif mode <= 2:
        p_yes, p_no = 0.10, 0.80
    else:
        p_yes, p_no = 0.80, 0.10
    alts = [
        ("Yes", math.log(p_yes * 0.7)),
        (" yes", math.log(p_yes * 0.3)),
        ("No", math.log(p_no * 0.8)),
        (" no", math.log(p_no * 0.2)),
        (".", math.log(0.01)),
    ]
    content = "Yes" if p_yes > p_no else "No"
    return {
        "content": content,
        "alternatives": [[{"token_text": t, "logprob": lp} for t, lp in alts]],
        "finish_reason": "length",
    }


def synth_chat(body: dict) -> dict:
    text = "\n".join(
        part["text"]
        for msg in body.get("messages", [])
        for part in msg.get("parts", [])
        if part.get("type") == "text"
    )
    images = [
        part["data"]
        for msg in body.get("messages", [])
        for part in msg.get("parts", [])
        if part.get("type") == "image"
    ]
    if body.get("max_tokens") == 1:
        return synth_verify(body)
    if images:
        return {"content": synth_describe(images[0]), "finish_reason": "stop"}
    if "constituent parts" in text:
        return {"content": synth_pass2(text), "finish_reason": "stop"}
    return {"content": synth_pass1(text), "finish_reason": "stop"}


def synth_detections(name: str, body: dict) -> dict:
    image_b64 = body["image"]
    img = Image.open(io.BytesIO(base64.b64decode(image_b64)))
    width, height = img.size
    img_digest = fnv1a64(image_b64.encode("ascii"))
    threshold = float(body.get("score_threshold", 0.0))
    detections = []
    for category in body["categories"]:
        seed = fnv1a64(f"{name}|{img_digest}|{category}".encode("utf-8"))
        rng = np.random.default_rng(seed)
        for _ in range(int(rng.integers(0, 3))):
            bw = (0.12 + 0.38 * rng.random()) * width
            bh = (0.12 + 0.38 * rng.random()) * height
            cx = bw / 2 + rng.random() * (width - bw)
            cy = bh / 2 + rng.random() * (height - bh)
            score = 0.05 + 0.93 * rng.random()
            if score < threshold:
                continue
            detections.append(
                {
                    "bbox": [
                        round(cx - bw / 2, 2),
                        round(cy - bh / 2, 2),
                        round(cx + bw / 2, 2),
                        round(cy + bh / 2, 2),
                    ],
                    "category": category,
                    "score": round(score, 4),
                }
            )
    return {"detections": detections}


def synth_score(body: dict) -> dict:
    h = fnv1a64(body["image"].encode("ascii"))
    return {"score": 5.0 + (h % 300) / 100.0}


class MockService:
    """Running mock server; deterministic given fixtures and request bodies."""

    def __init__(self, fixture_dir, port: int = 0, fallback: str = "template"):
        if fallback not in ("template", "error"):
            raise ValueError("fallback must be 'template' or 'error'")
        self.fixture_dir = Path(fixture_dir)
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        self.fallback = fallback
        self.log_path = self.fixture_dir / "requests.log.jsonl"
        self._log_lock = threading.Lock()
        self._fail_lock = threading.Lock()
        flaky = self.fixture_dir / "flaky.json"
        self._fail_remaining = (
            json.loads(flaky.read_text())["fail_first"] if flaky.exists() else 0
        )
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # quiet
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw)
                except json.JSONDecodeError:
                    self._reply(400, {"error": "malformed JSON"})
                    return
                status, payload = service.handle(self.path, body)
                self._reply(status, payload)

            def _reply(self, status, payload):
                data = json.dumps(payload).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self.port = self._server.server_address[1]
        self.base_url = f"http://127.0.0.1:{self.port}"
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def start(self) -> "MockService":
        self._thread.start()
        return self

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def url(self, path: str) -> str:
        return self.base_url + path

    def request_log(self) -> list[dict]:
        if not self.log_path.exists():
            return []
        return [json.loads(line) for line in self.log_path.read_text().splitlines()]

    def handle(self, path: str, body: dict) -> tuple[int, dict]:
        digest = request_digest(body)
        with self._log_lock:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"path": path, "digest": digest}) + "\n")
        with self._fail_lock:
            if self._fail_remaining > 0:
                self._fail_remaining -= 1
                return 500, {"error": "injected failure"}
        fixture = self.fixture_dir / path.lstrip("/") / f"{digest}.json"
        if fixture.exists():
            return 200, json.loads(fixture.read_text(encoding="utf-8"))
        if self.fallback == "error":
            return 500, {"error": f"no fixture for digest {digest}"}
        try:
            if path == "/chat":
                return 200, synth_chat(body)
            if path.startswith("/detect/"):
                return 200, synth_detections(path.split("/", 2)[2], body)
            if path == "/score":
                return 200, synth_score(body)
        except (KeyError, ValueError, OSError) as exc:
            return 400, {"error": f"bad request: {exc}"}
        return 404, {"error": f"unknown path {path}"}


def serve_mocks(fixture_dir, port: int = 0, fallback: str = "template") -> MockService:
    """Start a mock service; caller owns shutdown via .close()."""
    return MockService(fixture_dir, port=port, fallback=fallback).start()
