"""Client for OpenAI-compatible multimodal chat-completions endpoints.

Transports are plain callables ``(url, headers, body, timeout_s) -> (status,
body_bytes)`` so tests can swap in :class:`MockTransport` without a network.
"""

from __future__ import annotations

import base64
import json
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union
from urllib.parse import urlparse

from .errors import InputError, ProtocolError, RequestError, TransportError, ValidationError

ROLES = ("system", "user", "assistant")
INLINE_LIMIT = 20 * 1024 * 1024
BACKOFF_BASE_S = 0.5
BACKOFF_FACTOR = 2.0


class TransportFailure(Exception):
    """Connection-level failure raised by a transport; always retried."""


@dataclass(frozen=True)
class ImageSlot:
    image_ref: str


Part = Union[str, ImageSlot]


@dataclass
class ChatRequest:
    model: str
    messages: list
    temperature: float = 0.0
    max_tokens: int = 64

    def __post_init__(self):
        roles = [m["role"] for m in self.messages]
        if any(r not in ROLES for r in roles):
            raise ValidationError(f"roles must be in {ROLES}")
        if roles.count("system") > 1 or ("system" in roles and roles[0] != "system"):
            raise ValidationError("at most one system message, and it must come first")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be positive")

    def to_body(self) -> dict:
        return {
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }

    def encode(self) -> bytes:
        return json.dumps(self.to_body(), ensure_ascii=False, separators=(",", ":")).encode("utf-8")

    @property
    def n_images(self) -> int:
        return sum(p.get("type") == "image_url" for m in self.messages for p in m["content"])


@dataclass
class ClientConfig:
    base_url: str = "http://127.0.0.1:8000/v1"
    api_key_env: str = "OPENAI_API_KEY"
    timeout_ms: int = 60000
    max_retries: int = 3
    max_concurrency: int = 4
    model: str = "llava-llama-2-13b"

    def __post_init__(self):
        parsed = urlparse(self.base_url)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ValidationError(f"base_url must be an absolute http(s) URL: {self.base_url!r}")
        if self.timeout_ms <= 0 or self.max_retries < 0 or self.max_concurrency < 1:
            raise ValidationError("timeout_ms > 0, max_retries >= 0, max_concurrency >= 1 required")


def httpx_transport(url: str, headers: dict, body: bytes, timeout_s: float) -> tuple[int, bytes]:
    import httpx

    try:
        resp = httpx.post(url, content=body, headers=headers, timeout=timeout_s)
    except httpx.HTTPError as exc:
        raise TransportFailure(str(exc)) from exc
    return resp.status_code, resp.content


def chat_response(text: str, finish_reason: str = "stop") -> bytes:
    """Minimal chat-completions response body carrying ``text``."""
    body = {
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": finish_reason}],
    }
    return json.dumps(body).encode("utf-8")


class MockTransport:
    """Scripted transport for tests.

    ``script`` items are reply strings (served as 200 responses), ``(status,
    body)`` tuples, or exceptions to raise. ``responder`` instead computes a
    reply from the decoded request body. Calls and peak concurrency are recorded.
    """

    def __init__(self, script: Sequence = (), responder: Optional[Callable[[dict], object]] = None,
                 delay_s: float = 0.0):
        self._script = list(script)
        self._responder = responder
        self._delay = delay_s
        self._lock = threading.Lock()
        self.calls: list[dict] = []
        self.in_flight = 0
        self.peak_in_flight = 0

    def __call__(self, url, headers, body, timeout_s):
        with self._lock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            request = json.loads(body)
            self.calls.append({"url": url, "headers": dict(headers), "body": request})
            item = self._script.pop(0) if self._script else None
        try:
            if self._delay:
                time.sleep(self._delay)
            if item is None:
                if self._responder is None:
                    raise AssertionError("mock transport script exhausted")
                item = self._responder(request)
            if isinstance(item, BaseException):
                raise item
            if isinstance(item, tuple):
                status, payload = item
                return status, payload if isinstance(payload, bytes) else str(payload).encode()
            return 200, chat_response(str(item))
        finally:
            with self._lock:
                self.in_flight -= 1


def backoff_schedule(max_retries: int, base_s: float = BACKOFF_BASE_S, factor: float = BACKOFF_FACTOR) -> list[float]:
    """Pre-jitter delays before each retry."""
    return [base_s * factor**i for i in range(max_retries)]


def _parse_response(payload: bytes) -> tuple[str, str]:
    try:
        data = json.loads(payload)
        choice = data["choices"][0]
        content = choice["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"malformed chat response: {payload[:200]!r}") from exc
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if content is None:
        content = ""
    return str(content), str(choice.get("finish_reason") or "")


class ChatClient:
    """Thread-safe chat client with retry/backoff and a concurrency bound."""

    def __init__(self, config: ClientConfig, transport=None, sleep: Callable[[float], None] = time.sleep,
                 jitter: Optional[random.Random] = None, image_loader=None):
        self.config = config
        self.transport = transport or httpx_transport
        self.sleep = sleep
        self.jitter = jitter or random.Random()
        self.image_loader = image_loader
        self._gate = threading.BoundedSemaphore(config.max_concurrency)
        self._lock = threading.Lock()
        self.retries = 0
        self.requests = 0

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: ChatRequest) -> tuple[str, str]:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        body = request.encode()
        delays = backoff_schedule(self.config.max_retries)
        last = "no attempt made"
        with self._gate:
            for attempt in range(self.config.max_retries + 1):
                with self._lock:
                    self.requests += 1
                    if attempt:
                        self.retries += 1
                try:
                    status, payload = self.transport(url, self._headers(), body, self.config.timeout_ms / 1000.0)
                except TransportFailure as exc:
                    last = f"transport failure: {exc}"
                else:
                    if status == 200:
                        return _parse_response(payload)
                    excerpt = payload[:300].decode("utf-8", "replace")
                    if status != 429 and status < 500:
                        raise RequestError(status, excerpt)
                    last = f"HTTP {status}: {excerpt}"
                if attempt < len(delays):
                    self.sleep(delays[attempt] * (1.0 + 0.25 * self.jitter.random()))
        raise TransportError(f"gave up after {self.config.max_retries} retries; last error: {last}")

    def chat(self, script, temperature: float = 0.0, max_tokens: int = 64) -> tuple[str, str]:
        request = render_script(script, self.image_loader, model=self.config.model,
                                temperature=temperature, max_tokens=max_tokens)
        return self.complete(request)


def complete(request: ChatRequest, config: ClientConfig, transport=None, **kwargs) -> tuple[str, str]:
    return ChatClient(config, transport=transport, **kwargs).complete(request)


_MAGIC = (
    (b"\x89PNG\r\n\x1a\n", "image/png"),
    (b"\xff\xd8\xff", "image/jpeg"),
    (b"GIF87a", "image/gif"),
    (b"GIF89a", "image/gif"),
    (b"BM", "image/bmp"),
)


def detect_media_type(data: bytes) -> str:
    for magic, media in _MAGIC:
        if data.startswith(magic):
            return media
    if data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "image/webp"
    raise InputError("unrecognized image format")


def file_image_loader(root: Union[str, Path, None] = None) -> Callable[[str], bytes]:
    root = Path(root) if root else None

    def load(ref: str) -> bytes:
        path = Path(ref) if root is None or Path(ref).is_absolute() else root / ref
        try:
            return path.read_bytes()
        except OSError as exc:
            raise InputError(f"cannot read image {path}: {exc}") from exc

    load.root = root
    return load


def _image_part(ref: str, loader) -> dict:
    if urlparse(ref).scheme in ("http", "https", "data"):
        return {"type": "image_url", "image_url": {"url": ref}}
    root = getattr(loader, "root", None)
    path = Path(ref) if root is None or Path(ref).is_absolute() else root / ref
    if path.is_file() and path.stat().st_size >= INLINE_LIMIT:
        return {"type": "image_url", "image_url": {"url": path.resolve().as_uri()}}
    data = loader(ref)
    if len(data) >= INLINE_LIMIT:
        return {"type": "image_url", "image_url": {"url": path.resolve().as_uri()}}
    encoded = base64.b64encode(data).decode("ascii")
    return {"type": "image_url", "image_url": {"url": f"data:{detect_media_type(data)};base64,{encoded}"}}


def render_script(script, image_loader=None, model: str = "default", temperature: float = 0.0,
                  max_tokens: int = 64) -> ChatRequest:
    """Turn a prompt script (ordered ``(role, parts)`` turns) into a request.

    Local images below 20 MB are inlined as base64 data URLs; larger files and
    remote references are passed by URL.
    """
    loader = image_loader or file_image_loader()
    messages = []
    for role, parts in script.turns:
        content = []
        for part in parts:
            if isinstance(part, ImageSlot):
                content.append(_image_part(part.image_ref, loader))
            else:
                content.append({"type": "text", "text": str(part)})
        messages.append({"role": role, "content": content})
    return ChatRequest(model=model, messages=messages, temperature=temperature, max_tokens=max_tokens)
