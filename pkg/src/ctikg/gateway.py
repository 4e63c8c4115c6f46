"""Chat-completion and embedding access with record/replay fixtures.

A :class:`Gateway` runs in one of three modes:

``live``
    every request goes to the configured HTTP backend.
``record``
    like ``live``, and each response is persisted as one JSON fixture file
    named after its request hash.
``replay``
    responses come from the fixture directory. In strict mode a miss raises
    :class:`MissingFixture`; otherwise the gateway falls through to the live
    backend and records the result.

Every call, served live or from a fixture, is appended to ``Gateway.calls`` so
that usage totals can be audited against the fixture files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

import httpx

from .model import DecodingParams, dumps_canonical

log = logging.getLogger(__name__)

MODES = ("live", "record", "replay")


class GatewayError(RuntimeError):
    pass


class BackendUnavailable(GatewayError):
    """Transport failure that survived the retry budget, or a hard HTTP error."""


class MissingFixture(GatewayError):
    def __init__(self, request_hash: str, kind: str = "chat"):
        super().__init__(f"no recorded {kind} fixture for request hash {request_hash}")
        self.request_hash = request_hash
        self.kind = kind


class TransientBackendError(Exception):
    """Raised by backends for failures worth retrying (timeouts, 429, 5xx)."""


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True, slots=True)
class UsageRecord:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cost_estimate: float = 0.0
    latency: float = 0.0

    def __post_init__(self) -> None:
        if min(self.prompt_tokens, self.completion_tokens) < 0 or self.cost_estimate < 0 or self.latency < 0:
            raise ValueError(f"usage fields must be non-negative: {self}")

    def __add__(self, other: UsageRecord) -> UsageRecord:
        return UsageRecord(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.cost_estimate + other.cost_estimate,
            self.latency + other.latency,
        )

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "cost_estimate": self.cost_estimate,
            "latency": self.latency,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> UsageRecord:
        return cls(
            int(d.get("prompt_tokens", 0)),
            int(d.get("completion_tokens", 0)),
            float(d.get("cost_estimate", 0.0)),
            float(d.get("latency", 0.0)),
        )


def aggregate_usage(records: Iterable[UsageRecord]) -> UsageRecord:
    total = UsageRecord()
    for r in records:
        total = total + r
    return total


@dataclass(frozen=True, slots=True)
class CompletionRequest:
    prompt: str
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("completion prompt must be non-empty")


@dataclass(frozen=True, slots=True)
class CompletionResult:
    text: str
    usage: UsageRecord
    request_hash: str = ""


@dataclass(frozen=True, slots=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("embedding must have at least one dimension")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding values must be finite")

    @classmethod
    def of(cls, values: Iterable[float]) -> EmbeddingVector:
        return cls(tuple(float(v) for v in values))

    @property
    def dims(self) -> int:
        return len(self.values)


@dataclass(frozen=True, slots=True)
class CallRecord:
    kind: str
    request_hash: str
    usage: UsageRecord
    tag: str
    served_from: str


@dataclass(frozen=True, slots=True)
class Pricing:
    """Per-token rates. Configuration files give prices per million tokens."""

    rate_in: float = 0.0
    rate_out: float = 0.0

    @classmethod
    def per_million(cls, input_price: float = 0.0, output_price: float = 0.0) -> Pricing:
        return cls(input_price / 1e6, output_price / 1e6)

    def cost(self, prompt_tokens: int, completion_tokens: int) -> float:
        return prompt_tokens * self.rate_in + completion_tokens * self.rate_out


def request_hash(kind: str, prompt: str, params: dict[str, Any]) -> str:
    payload = dumps_canonical({"kind": kind, "params": params, "prompt": prompt}, indent=None)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# backends


class ChatBackend(Protocol):
    model: str

    def complete(self, prompt: str, decoding: DecodingParams) -> tuple[str, int, int]:
        """Return (text, prompt_tokens, completion_tokens)."""


class EmbeddingBackend(Protocol):
    model: str

    def embed(self, texts: Sequence[str]) -> tuple[list[list[float]], int]:
        """Return (one vector per text, total prompt tokens)."""


@dataclass
class BackendConfig:
    base_url: str = "https://api.openai.com/v1"
    chat_model: str = "gpt-4"
    embedding_model: str = "text-embedding-3-large"
    api_key_env: str = "OPENAI_API_KEY"
    input_price_per_mtok: float = 0.0
    output_price_per_mtok: float = 0.0
    embedding_price_per_mtok: float = 0.0
    timeout: float = 120.0
    retries: int = 3
    backoff: float = 1.0
    max_in_flight: int = 4

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BackendConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` and ``/embeddings`` client."""

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(base_url=base_url.rstrip("/") + "/", headers=headers, timeout=timeout, transport=transport)

    def _post(self, path: str, body: dict[str, Any]) -> dict[str, Any]:
        try:
            resp = self._client.post(path, json=body)
        except httpx.TransportError as exc:
            raise TransientBackendError(f"{path}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendUnavailable(f"{path}: HTTP {resp.status_code}: {resp.text[:300]}")
        return resp.json()

    def complete(self, prompt: str, decoding: DecodingParams) -> tuple[str, int, int]:
        data = self._post(
            "chat/completions",
            {
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": decoding.temperature,
                "max_tokens": decoding.max_output_tokens,
            },
        )
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed chat response: {str(data)[:300]}") from exc
        usage = data.get("usage") or {}
        return text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))

    def embed(self, texts: Sequence[str]) -> tuple[list[list[float]], int]:
        data = self._post("embeddings", {"model": self.model, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda item: item["index"])
            vectors = [list(item["embedding"]) for item in items]
        except (KeyError, TypeError) as exc:
            raise BackendUnavailable(f"malformed embedding response: {str(data)[:300]}") from exc
        if len(vectors) != len(texts):
            raise BackendUnavailable(f"asked for {len(texts)} embeddings, got {len(vectors)}")
        usage = data.get("usage") or {}
        return vectors, int(usage.get("prompt_tokens", usage.get("total_tokens", 0)))


def split_tokens(total: int, texts: Sequence[str]) -> list[int]:
    """Apportion a batch token count across texts by length (largest remainder)."""
    weights = [max(len(t), 1) for t in texts]
    wsum = sum(weights)
    shares = [total * w // wsum for w in weights]
    remainders = sorted(range(len(texts)), key=lambda i: (-(total * weights[i] % wsum), i))
    for i in remainders[: total - sum(shares)]:
        shares[i] += 1
    return shares


# ---------------------------------------------------------------------------
# fixture store


class FixtureStore:
    """One JSON file per request hash. Reads are lock-free; writes serialize."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._write_lock = threading.Lock()

    def path_for(self, h: str) -> Path:
        return self.directory / f"{h}.json"

    def read(self, h: str) -> dict[str, Any] | None:
        path = self.path_for(h)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def write(self, record: dict[str, Any]) -> Path:
        path = self.path_for(record["request_hash"])
        with self._write_lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(dumps_canonical(record))
            os.replace(tmp, path)
        return path

    def hashes(self) -> list[str]:
        if not self.directory.exists():
            return []
        return sorted(p.stem for p in self.directory.glob("*.json"))

    def records(self) -> Iterable[dict[str, Any]]:
        for h in self.hashes():
            rec = self.read(h)
            if rec is not None:
                yield rec


# ---------------------------------------------------------------------------
# gateway


class Gateway:
    """Uniform entry point for completions and embeddings.

    ``tag`` arguments label call-log entries (the pipeline uses
    ``"<report id>/<phase>"``) so usage can be broken down afterwards.
    """

    def __init__(
        self,
        mode: str = "live",
        *,
        store: FixtureStore | None = None,
        chat: ChatBackend | None = None,
        embedder: EmbeddingBackend | None = None,
        chat_model: str | None = None,
        embedding_model: str | None = None,
        chat_pricing: Pricing = Pricing(),
        embedding_pricing: Pricing = Pricing(),
        strict: bool = True,
        retries: int = 3,
        backoff: float = 1.0,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.perf_counter,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown gateway mode {mode!r}")
        if mode != "live" and store is None:
            raise ValueError(f"{mode} mode needs a fixture store")
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self.mode = mode
        self.store = store
        self.chat = chat
        self.embedder = embedder
        self.chat_model = chat_model or (chat.model if chat is not None else "unknown")
        self.embedding_model = embedding_model or (embedder.model if embedder is not None else "unknown")
        self.chat_pricing = chat_pricing
        self.embedding_pricing = embedding_pricing
        self.strict = strict
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._clock = clock
        self._in_flight = threading.BoundedSemaphore(max(1, max_in_flight))
        self._lock = threading.Lock()
        self._embed_cache: dict[str, EmbeddingVector] = {}
        self._dims: int | None = None
        self.calls: list[CallRecord] = []

    @classmethod
    def from_config(
        cls,
        cfg: BackendConfig,
        mode: str,
        cache_dir: str | Path | None = None,
        strict: bool = True,
        transport: httpx.BaseTransport | None = None,
    ) -> Gateway:
        store = FixtureStore(cache_dir) if cache_dir is not None else None
        chat = embedder = None
        needs_live = mode in ("live", "record") or (mode == "replay" and not strict)
        if needs_live:
            api_key = os.environ.get(cfg.api_key_env)
            chat = HttpBackend(cfg.base_url, cfg.chat_model, api_key, cfg.timeout, transport)
            embedder = HttpBackend(cfg.base_url, cfg.embedding_model, api_key, cfg.timeout, transport)
        return cls(
            mode,
            store=store,
            chat=chat,
            embedder=embedder,
            chat_model=cfg.chat_model,
            embedding_model=cfg.embedding_model,
            chat_pricing=Pricing.per_million(cfg.input_price_per_mtok, cfg.output_price_per_mtok),
            embedding_pricing=Pricing.per_million(cfg.embedding_price_per_mtok),
            strict=strict,
            retries=cfg.retries,
            backoff=cfg.backoff,
            max_in_flight=cfg.max_in_flight,
        )

    # -- bookkeeping -------------------------------------------------------

    def _log(self, kind: str, h: str, usage: UsageRecord, tag: str, served_from: str) -> None:
        with self._lock:
            self.calls.append(CallRecord(kind, h, usage, tag, served_from))

    def usage(self, tag_prefix: str | None = None, kind: str | None = None) -> UsageRecord:
        with self._lock:
            calls = list(self.calls)
        return aggregate_usage(
            c.usage
            for c in calls
            if (tag_prefix is None or c.tag.startswith(tag_prefix)) and (kind is None or c.kind == kind)
        )

    def completion_count(self, tag_prefix: str | None = None) -> int:
        with self._lock:
            return sum(1 for c in self.calls if c.kind == "chat" and (tag_prefix is None or c.tag.startswith(tag_prefix)))

    def _retrying(self, fn: Callable[[], Any]) -> Any:
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                with self._in_flight:
                    return fn()
            except TransientBackendError as exc:
                last = exc
                log.warning("backend attempt %d/%d failed: %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    self._sleep(self.backoff * 2**attempt)
        raise BackendUnavailable(f"backend failed after {self.retries} attempts: {last}")

    def _uses_fixtures(self) -> bool:
        return self.mode == "replay"

    def _persists(self) -> bool:
        return self.mode == "record" or (self.mode == "replay" and not self.strict)

    # -- completion --------------------------------------------------------

    def chat_params(self, decoding: DecodingParams) -> dict[str, Any]:
        return {"model": self.chat_model, **decoding.canonical()}

    def hash_request(self, req: CompletionRequest) -> str:
        return request_hash("chat", req.prompt, self.chat_params(req.decoding))

    def complete(self, req: CompletionRequest, tag: str = "") -> CompletionResult:
        params = self.chat_params(req.decoding)
        h = request_hash("chat", req.prompt, params)
        if self._uses_fixtures():
            rec = self.store.read(h)  # type: ignore[union-attr]
            if rec is not None:
                usage = UsageRecord.from_dict(rec["usage"])
                self._log("chat", h, usage, tag, "fixture")
                return CompletionResult(rec["response_text"], usage, h)
            if self.strict:
                raise MissingFixture(h, "chat")
        if self.chat is None:
            raise BackendUnavailable("no live chat backend configured")
        chat = self.chat
        start = self._clock()
        text, pt, ct = self._retrying(lambda: chat.complete(req.prompt, req.decoding))
        latency = max(0.0, self._clock() - start)
        usage = UsageRecord(pt, ct, self.chat_pricing.cost(pt, ct), latency)
        if self._persists():
            self.store.write(  # type: ignore[union-attr]
                {
                    "request_hash": h,
                    "kind": "chat",
                    "prompt": req.prompt,
                    "params": params,
                    "response_text": text,
                    "usage": usage.to_dict(),
                }
            )
        self._log("chat", h, usage, tag, "live")
        return CompletionResult(text, usage, h)

    # -- embeddings --------------------------------------------------------

    def hash_text(self, text: str) -> str:
        return request_hash("embedding", text, {"model": self.embedding_model})

    def _admit(self, vec: EmbeddingVector) -> EmbeddingVector:
        with self._lock:
            if self._dims is None:
                self._dims = vec.dims
            elif vec.dims != self._dims:
                raise GatewayError(f"embedding dims changed from {self._dims} to {vec.dims}")
        return vec

    def embed(self, texts: Sequence[str], tag: str = "") -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        if any(not t for t in texts):
            raise ValueError("embed() texts must be non-empty")
        hashes = [self.hash_text(t) for t in texts]
        pending: dict[str, str] = {}
        for t, h in zip(texts, hashes):
            with self._lock:
                cached = h in self._embed_cache
            if not cached and h not in pending:
                pending[h] = t

        if pending and self._uses_fixtures():
            for h in list(pending):
                rec = self.store.read(h)  # type: ignore[union-attr]
                if rec is None:
                    continue
                vec = self._admit(EmbeddingVector.of(rec["response_vector"]))
                with self._lock:
                    self._embed_cache[h] = vec
                self._log("embedding", h, UsageRecord.from_dict(rec["usage"]), tag, "fixture")
                del pending[h]
            if pending and self.strict:
                raise MissingFixture(next(iter(pending)), "embedding")

        if pending:
            if self.embedder is None:
                raise BackendUnavailable("no live embedding backend configured")
            embedder = self.embedder
            batch = list(pending.values())
            start = self._clock()
            vectors, tokens = self._retrying(lambda: embedder.embed(batch))
            latency = max(0.0, self._clock() - start)
            shares = split_tokens(tokens, batch)
            for i, (h, text) in enumerate(pending.items()):
                vec = self._admit(EmbeddingVector.of(vectors[i]))
                usage = UsageRecord(shares[i], 0, self.embedding_pricing.cost(shares[i], 0), latency if i == 0 else 0.0)
                if self._persists():
                    self.store.write(  # type: ignore[union-attr]
                        {
                            "request_hash": h,
                            "kind": "embedding",
                            "prompt": text,
                            "params": {"model": self.embedding_model},
                            "response_vector": list(vec.values),
                            "usage": usage.to_dict(),
                        }
                    )
                with self._lock:
                    self._embed_cache[h] = vec
                self._log("embedding", h, usage, tag, "live")

        with self._lock:
            return [self._embed_cache[h] for h in hashes]
