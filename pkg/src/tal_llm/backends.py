"""Chat-completion backends: OpenAI-compatible HTTP, replay, mocks, and a response cache.

Every backend answers :class:`ChatRequest` with :class:`ChatResponse`. Use
:func:`complete` / :func:`complete_batch` rather than calling ``generate``
directly; they enforce capabilities and the retry policy.
"""

from __future__ import annotations

import base64
import hashlib
import importlib
import io
import json
import logging
import os
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

logger = logging.getLogger(__name__)

TEXT = "text"
IMAGE = "image"
VIDEO = "video"
ALL_CAPABILITIES = frozenset({TEXT, IMAGE, VIDEO})

DEFAULT_LONG_EDGE = 512
DEFAULT_MAX_TOKENS = 512


class BackendError(RuntimeError):
    pass


class TransientBackendError(BackendError):
    """Failure worth retrying (rate limit, 5xx, dropped connection)."""


class BackendUnavailable(BackendError):
    pass


class CapabilityMismatch(BackendError):
    pass


class ContextOverflow(BackendError):
    def __init__(self, message: str, prompt_chars: int | None = None):
        self.prompt_chars = prompt_chars
        super().__init__(message)


class UnknownDigest(BackendError):
    def __init__(self, digest: str):
        self.digest = digest
        super().__init__(f"no recorded response for request digest {digest}")


class CacheCorrupt(BackendError):
    def __init__(self, key: str, reason: str = "digest mismatch"):
        self.key = key
        super().__init__(f"cache entry {key}: {reason}")


@lru_cache(maxsize=4096)
def _image_payload(path: str, mtime_ns: int, long_edge: int | None) -> tuple[bytes, str]:
    from PIL import Image

    raw = Path(path).read_bytes()
    with Image.open(io.BytesIO(raw)) as im:
        fmt = (im.format or "JPEG").upper()
        if long_edge is None or max(im.size) <= long_edge:
            return raw, Image.MIME.get(fmt, "image/jpeg")
        scale = long_edge / max(im.size)
        size = (max(1, round(im.width * scale)), max(1, round(im.height * scale)))
        resized = im.convert("RGB").resize(size, Image.Resampling.LANCZOS)
    buf = io.BytesIO()
    resized.save(buf, format="JPEG", quality=90)
    return buf.getvalue(), "image/jpeg"


@dataclass(frozen=True)
class ImageInput:
    """An image file, downscaled to ``long_edge`` pixels before it is hashed or sent."""

    path: Path
    long_edge: int | None = DEFAULT_LONG_EDGE

    def payload(self) -> tuple[bytes, str]:
        p = Path(self.path)
        return _image_payload(str(p), p.stat().st_mtime_ns, self.long_edge)

    def sha256(self) -> str:
        return hashlib.sha256(self.payload()[0]).hexdigest()

    def data_url(self) -> str:
        data, mime = self.payload()
        return f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    text: str
    image: ImageInput | None = None
    video: str | None = None
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")

    def required_capabilities(self) -> set[str]:
        caps = {TEXT}
        if self.image is not None:
            caps.add(IMAGE)
        if self.video is not None:
            caps.add(VIDEO)
        return caps

    def identity(self) -> dict[str, Any]:
        """The hashed fields; this is also the ``request`` block of cache entries."""
        out: dict[str, Any] = {"model_id": self.model_id, "text": self.text}
        if self.image is not None:
            out["image_sha256"] = self.image.sha256()
        if self.video is not None:
            out["video"] = self.video
        out["max_tokens"] = self.max_tokens
        out["temperature"] = self.temperature
        return out

    def digest(self) -> str:
        return identity_digest(self.identity())


def identity_digest(identity: dict[str, Any]) -> str:
    canonical = json.dumps(identity, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    model_id: str
    latency_ms: int = 0
    cached: bool = False


class ChatBackend:
    """Base class. Subclasses implement :meth:`generate`."""

    model_id: str = "unknown"
    capabilities: frozenset[str] = frozenset({TEXT})

    def generate(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def check(self, request: ChatRequest) -> None:
        missing = request.required_capabilities() - set(self.capabilities)
        if missing:
            raise CapabilityMismatch(
                f"backend {self.model_id!r} lacks {sorted(missing)} (has {sorted(self.capabilities)})"
            )

    def request(self, text: str, **kwargs: Any) -> ChatRequest:
        return ChatRequest(model_id=self.model_id, text=text, **kwargs)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_delay: float = 1.0
    multiplier: float = 2.0
    max_delay: float = 30.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if self.base_delay < 0 or self.multiplier < 1 or self.max_delay < 0:
            raise ValueError("backoff parameters must be non-negative with multiplier >= 1")

    def delays(self) -> list[float]:
        """Sleep before attempt 2, 3, ...; non-decreasing and capped."""
        return [
            min(self.max_delay, self.base_delay * self.multiplier**i) for i in range(self.max_attempts - 1)
        ]


NO_RETRY = RetryPolicy(max_attempts=1)


def complete(
    backend: ChatBackend,
    request: ChatRequest,
    retry: RetryPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> ChatResponse:
    retry = retry or RetryPolicy()
    backend.check(request)
    delays = retry.delays()
    for attempt in range(retry.max_attempts):
        try:
            return backend.generate(request)
        except TransientBackendError as exc:
            if attempt == retry.max_attempts - 1:
                raise BackendUnavailable(
                    f"{backend.model_id}: gave up after {retry.max_attempts} attempts: {exc}"
                ) from exc
            logger.warning("%s: attempt %d failed (%s), retrying", backend.model_id, attempt + 1, exc)
            sleep(delays[attempt])
    raise AssertionError("unreachable")


def complete_batch(
    backend: ChatBackend,
    requests: Sequence[ChatRequest],
    max_in_flight: int = 4,
    retry: RetryPolicy | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[ChatResponse | BackendError]:
    """Order-preserving batch; failed items come back as exception objects."""
    if max_in_flight < 1:
        raise ValueError("max_in_flight must be at least 1")

    def one(req: ChatRequest) -> ChatResponse | BackendError:
        try:
            return complete(backend, req, retry=retry, sleep=sleep)
        except BackendError as exc:
            return exc

    if max_in_flight == 1 or len(requests) <= 1:
        return [one(r) for r in requests]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(one, requests))


# --- cache and replay -------------------------------------------------------


class ResponseCache:
    """One JSON file per request digest, written atomically."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> ChatResponse | None:
        path = self.path_for(key)
        try:
            raw = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            entry = json.loads(raw)
            stored = entry["digest"]
            recomputed = identity_digest(entry["request"])
            response = entry["response"]
            text, latency = response["text"], int(response.get("latency_ms", 0))
            model_id = entry["request"]["model_id"]
        except (ValueError, KeyError, TypeError) as exc:
            raise CacheCorrupt(key, f"unreadable entry ({exc})") from exc
        if stored != key or recomputed != key:
            raise CacheCorrupt(key)
        return ChatResponse(text=text, model_id=model_id, latency_ms=latency, cached=True)

    def put(self, request: ChatRequest, response: ChatResponse) -> str:
        identity = request.identity()
        key = identity_digest(identity)
        entry = {
            "digest": key,
            "request": identity,
            "response": {"text": response.text, "latency_ms": response.latency_ms},
        }
        data = json.dumps(entry, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{key[:12]}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(data)
            os.replace(tmp, self.path_for(key))
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        return key

    def keys(self) -> list[str]:
        return sorted(p.stem for p in self.directory.glob("*.json"))

    def entries(self) -> Iterable[dict]:
        for key in self.keys():
            yield json.loads(self.path_for(key).read_text(encoding="utf-8"))


def cache_get(cache: ResponseCache, key: str) -> ChatResponse | None:
    return cache.get(key)


def cache_put(cache: ResponseCache, request: ChatRequest, response: ChatResponse) -> str:
    return cache.put(request, response)


class CachedBackend(ChatBackend):
    """Serves repeated requests from a :class:`ResponseCache`, calling ``inner`` on a miss."""

    def __init__(self, inner: ChatBackend, cache: ResponseCache | str | Path):
        self.inner = inner
        self.cache = cache if isinstance(cache, ResponseCache) else ResponseCache(cache)
        self.model_id = inner.model_id
        self.capabilities = inner.capabilities
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def check(self, request: ChatRequest) -> None:
        self.inner.check(request)

    def generate(self, request: ChatRequest) -> ChatResponse:
        key = request.digest()
        hit = self.cache.get(key)
        with self._lock:
            if hit is not None:
                self.hits += 1
            else:
                self.misses += 1
        if hit is not None:
            return hit
        response = self.inner.generate(request)
        self.cache.put(request, response)
        return response


class RecordingBackend(CachedBackend):
    """Live backend whose every answer is persisted as a replay fixture."""


def record_replay_session(live_backend: ChatBackend, out_dir: str | Path) -> RecordingBackend:
    return RecordingBackend(live_backend, out_dir)


class ReplayBackend(ChatBackend):
    """Answers only requests recorded in ``directory``; anything else raises UnknownDigest."""

    def __init__(
        self,
        directory: str | Path,
        model_id: str | None = None,
        capabilities: Iterable[str] = ALL_CAPABILITIES,
    ):
        self.cache = ResponseCache(directory)
        self.capabilities = frozenset(capabilities)
        if model_id is None:
            models = {entry["request"]["model_id"] for entry in self.cache.entries()}
            if len(models) != 1:
                raise ValueError(
                    f"replay dir {directory} holds models {sorted(models)}; pass model_id explicitly"
                )
            model_id = models.pop()
        self.model_id = model_id

    def generate(self, request: ChatRequest) -> ChatResponse:
        key = request.digest()
        hit = self.cache.get(key)
        if hit is None:
            raise UnknownDigest(key)
        return hit


# --- mocks --------------------------------------------------------------------


class EchoBackend(ChatBackend):
    """Returns the prompt text unchanged."""

    def __init__(self, model_id: str = "echo", capabilities: Iterable[str] = ALL_CAPABILITIES):
        self.model_id = model_id
        self.capabilities = frozenset(capabilities)

    def generate(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(text=request.text, model_id=self.model_id)


class ScriptedBackend(ChatBackend):
    """Answers with ``fn(request)``; ``fn`` may raise backend errors to inject faults."""

    def __init__(
        self,
        fn: Callable[[ChatRequest], str],
        model_id: str = "scripted",
        capabilities: Iterable[str] = frozenset({TEXT}),
    ):
        self.fn = fn
        self.model_id = model_id
        self.capabilities = frozenset(capabilities)

    def generate(self, request: ChatRequest) -> ChatResponse:
        return ChatResponse(text=self.fn(request), model_id=self.model_id)


class CountingBackend(ChatBackend):
    """Counts calls that reach ``inner`` and tracks peak concurrency."""

    def __init__(self, inner: ChatBackend):
        self.inner = inner
        self.model_id = inner.model_id
        self.capabilities = inner.capabilities
        self.calls = 0
        self.in_flight = 0
        self.peak_in_flight = 0
        self.requests: list[ChatRequest] = []
        self._lock = threading.Lock()

    def generate(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
            self.requests.append(request)
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
        try:
            return self.inner.generate(request)
        finally:
            with self._lock:
                self.in_flight -= 1


# --- OpenAI-compatible HTTP ---------------------------------------------------

_OVERFLOW_MARKERS = (
    "context_length_exceeded",
    "context length",
    "maximum context",
    "too many tokens",
    "prompt is too long",
    "input is too long",
)


@dataclass
class HttpBackendConfig:
    base_url: str
    model_id: str
    api_key_env: str | None = "OPENAI_API_KEY"
    capabilities: frozenset[str] = field(default_factory=lambda: frozenset({TEXT}))
    timeout: float = 120.0
    max_attempts: int = 4
    max_in_flight: int = 4
    max_tokens: int = DEFAULT_MAX_TOKENS
    temperature: float = 0.0
    image_long_edge: int | None = DEFAULT_LONG_EDGE

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HttpBackendConfig":
        data = dict(data)
        if "capabilities" in data:
            data["capabilities"] = frozenset(data["capabilities"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**data)

    def retry_policy(self) -> RetryPolicy:
        return RetryPolicy(max_attempts=self.max_attempts)


def load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if path.suffix == ".toml":
        if sys.version_info >= (3, 11):
            import tomllib
        else:
            import tomli as tomllib
        with path.open("rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text(encoding="utf-8"))


class OpenAIChatBackend(ChatBackend):
    """``POST {base_url}/chat/completions`` with optional base64 image content."""

    def __init__(self, config: HttpBackendConfig, client: Any = None):
        import httpx

        self.config = config
        self.model_id = config.model_id
        self.capabilities = frozenset(config.capabilities) | {TEXT}
        self._client = client or httpx.Client(timeout=config.timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def payload(self, request: ChatRequest) -> dict[str, Any]:
        if request.image is None and request.video is None:
            content: Any = request.text
        else:
            content = [{"type": "text", "text": request.text}]
            if request.image is not None:
                content.append({"type": "image_url", "image_url": {"url": request.image.data_url()}})
            if request.video is not None:
                content.append({"type": "video_url", "video_url": {"url": request.video}})
        return {
            "model": request.model_id,
            "messages": [{"role": "user", "content": content}],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }

    def generate(self, request: ChatRequest) -> ChatResponse:
        import httpx

        url = self.config.base_url.rstrip("/") + "/chat/completions"
        started = time.perf_counter()
        try:
            resp = self._client.post(url, headers=self._headers(), json=self.payload(request))
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        latency = int((time.perf_counter() - started) * 1000)
        status = resp.status_code
        if status == 429 or status >= 500:
            raise TransientBackendError(f"HTTP {status}: {resp.text[:200]}")
        if status >= 400:
            body = resp.text
            if status == 413 or any(m in body.lower() for m in _OVERFLOW_MARKERS):
                raise ContextOverflow(f"HTTP {status}: {body[:200]}", prompt_chars=len(request.text))
            raise BackendError(f"HTTP {status}: {body[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"unexpected response body: {resp.text[:200]}") from exc
        if choice.get("finish_reason") == "length" and not text:
            logger.warning("%s returned an empty, length-truncated completion", self.model_id)
        return ChatResponse(text=text, model_id=self.model_id, latency_ms=latency)


# --- backend specs --------------------------------------------------------------

_REGISTRY: dict[str, Callable[[str | None], ChatBackend]] = {}


def register_backend(name: str, factory: Callable[[str | None], ChatBackend]) -> None:
    """Make ``name`` or ``name:<arg>`` usable as a backend spec."""
    _REGISTRY[name] = factory


def resolve_backend(spec: str) -> ChatBackend:
    """Build a backend from a spec string.

    ``echo``, ``replay:<dir>[#<model_id>]``, ``openai:<config.toml|json>``,
    a registered name, or ``py:<module>:<factory>[:<arg>]``.
    """
    name, _, arg = spec.partition(":")
    arg_or_none = arg or None
    if name == "echo":
        return EchoBackend(model_id=arg or "echo")
    if name == "replay":
        directory, _, model_id = arg.partition("#")
        return ReplayBackend(directory, model_id=model_id or None)
    if name == "openai":
        config = HttpBackendConfig.from_dict(load_config_file(arg))
        return OpenAIChatBackend(config)
    if name == "py":
        module, _, rest = arg.partition(":")
        attr, _, factory_arg = rest.partition(":")
        factory = getattr(importlib.import_module(module), attr)
        return factory(factory_arg) if factory_arg else factory()
    if name in _REGISTRY:
        return _REGISTRY[name](arg_or_none)
    raise ValueError(f"unknown backend spec {spec!r}")
