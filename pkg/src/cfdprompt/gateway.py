"""Chat and embedding backends behind one retrying, rate-bounded gateway.

Two backends ship: :class:`OpenAICompatibleBackend` speaks the usual
``/chat/completions`` + ``/embeddings`` HTTP JSON protocol, and
:class:`ScriptedBackend` answers from a fixture so whole pipeline runs are
reproducible offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

HASHED_BOW_DIM = 256
_TOKEN = re.compile(r"\w+")


class BackendError(RuntimeError):
    pass


class TransientError(BackendError):
    """Worth retrying: rate limits, timeouts, 5xx."""


class RetryBudgetExhausted(BackendError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class FixtureMiss(BackendError):
    def __init__(self, template_id: str, key: str, repetition: int | None = None):
        where = f"({template_id!r}, {key!r}" + (f", rep {repetition})" if repetition is not None else ")")
        super().__init__(f"scripted fixture has no reply for {where}")
        self.template_id = template_id
        self.key = key
        self.repetition = repetition


# --- templates -------------------------------------------------------------

@dataclass(frozen=True)
class Template:
    id: str
    version: int
    temperature: str  # "sampling" or "extraction"
    reply_format: str
    body: str

    def render(self, variables: Mapping[str, Any]) -> str:
        try:
            return self.body.format(**variables)
        except KeyError as exc:
            raise BackendError(f"template {self.id!r} needs variable {exc.args[0]!r}") from None


@lru_cache(maxsize=None)
def load_template(template_id: str) -> Template:
    try:
        text = resources.files("cfdprompt.templates").joinpath(f"{template_id}.txt").read_text()
    except FileNotFoundError:
        raise BackendError(f"unknown template {template_id!r}") from None
    header, _, body = text.partition("\n---\n")
    meta: dict[str, str] = {}
    last = None
    for line in header.splitlines():
        line = line.lstrip("#").rstrip()
        m = re.match(r"\s*([\w-]+):\s*(.*)", line)
        if m:
            last = m.group(1)
            meta[last] = m.group(2)
        elif last:
            meta[last] += " " + line.strip()
    return Template(
        id=meta.get("template", template_id),
        version=int(meta.get("version", "1")),
        temperature=meta.get("temperature", "extraction"),
        reply_format=meta.get("reply-format", ""),
        body=body.strip() + "\n",
    )


def request_key(template_id: str, variables: Mapping[str, Any]) -> str:
    """Content address of a rendered request, used as the fixture lookup key."""
    blob = json.dumps({"template": template_id, "vars": variables}, sort_keys=True,
                      ensure_ascii=False)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ChatRequest:
    template_id: str
    variables: Mapping[str, Any]
    repetition: int = 0
    temperature: float = 0.0
    max_tokens: int = 512
    seed: int | None = None

    @property
    def key(self) -> str:
        return request_key(self.template_id, self.variables)

    def messages(self) -> list[dict[str, str]]:
        return [{"role": "user", "content": load_template(self.template_id).render(self.variables)}]


@dataclass(frozen=True)
class ChatReply:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    attempts: int = 1


class ChatBackend(Protocol):
    name: str

    def chat(self, request: ChatRequest) -> ChatReply: ...


class EmbeddingBackend(Protocol):
    name: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


# --- offline backends --------------------------------------------------------

def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


class HashedBowEncoder:
    """Deterministic test encoder.

    Text is lowercased and split on ``\\w+``; each token adds 1.0 to bucket
    ``blake2b(token, digest_size=8) as little-endian uint64 mod dim``. The
    raw count vector is returned; callers normalize.
    """

    def __init__(self, dim: int = HASHED_BOW_DIM):
        self.dim = dim
        self.name = f"hashed-bow-{dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for tok in _TOKEN.findall(text.lower()):
                out[i, _bucket(tok, self.dim)] += 1.0
        return out


@dataclass
class ScriptedFixture:
    """Canned replies keyed by (template id, request key, repetition index)."""

    chat: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    embeddings: dict[str, list[float]] = field(default_factory=dict)
    encoder_dim: int = HASHED_BOW_DIM

    def add_chat(self, template_id: str, variables: Mapping[str, Any],
                 replies: Iterable[str]) -> str:
        key = request_key(template_id, variables)
        self.chat.setdefault(template_id, {})[key] = list(replies)
        return key

    def lookup(self, template_id: str, key: str, repetition: int) -> str:
        replies = self.chat.get(template_id, {}).get(key)
        if replies is None or repetition >= len(replies):
            raise FixtureMiss(template_id, key, repetition)
        return replies[repetition]

    def to_dict(self) -> dict:
        return {"chat": self.chat, "embeddings": self.embeddings,
                "encoder": {"kind": "hashed-bow", "dim": self.encoder_dim}}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScriptedFixture":
        enc = data.get("encoder", {})
        return cls(chat={t: {k: list(v) for k, v in m.items()} for t, m in data.get("chat", {}).items()},
                   embeddings=dict(data.get("embeddings", {})),
                   encoder_dim=int(enc.get("dim", HASHED_BOW_DIM)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedFixture":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _count_tokens(text: str) -> int:
    return len(text.split())


class ScriptedBackend:
    name = "scripted"

    def __init__(self, fixture: ScriptedFixture):
        self.fixture = fixture
        self._bow = HashedBowEncoder(fixture.encoder_dim)
        self.name = f"scripted/{self._bow.name}"

    def chat(self, request: ChatRequest) -> ChatReply:
        text = self.fixture.lookup(request.template_id, request.key, request.repetition)
        prompt = request.messages()[0]["content"]
        return ChatReply(text, _count_tokens(prompt), _count_tokens(text))

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        derived = self._bow.embed(texts)
        rows = []
        for text, row in zip(texts, derived):
            given = self.fixture.embeddings.get(text)
            rows.append(np.asarray(given, dtype=float) if given is not None else row)
        dims = {r.shape for r in rows}
        if len(dims) > 1:
            raise BackendError(f"embedding dimensions disagree within a batch: {sorted(dims)}")
        return np.stack(rows)


# --- wire backend -------------------------------------------------------------

class OpenAICompatibleBackend:
    """Chat-completions / embeddings over HTTP+JSON."""

    def __init__(self, base_url: str, api_key: str | None, model: str,
                 embedding_model: str | None = None, timeout: float = 60.0, client=None):
        import httpx

        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                              timeout=timeout)
        self._httpx = httpx
        self.model = model
        self.embedding_model = embedding_model or model
        self.name = f"wire/{model}"

    @classmethod
    def from_env(cls, model: str | None = None, embedding_model: str | None = None,
                 base_url: str | None = None) -> "OpenAICompatibleBackend":
        base = base_url or os.environ.get("CFD_API_BASE")
        if not base:
            raise BackendError("set CFD_API_BASE (or pass base_url) to use the wire backend")
        return cls(base, os.environ.get("CFD_API_KEY"),
                   model or os.environ.get("CFD_CHAT_MODEL", "gpt-3.5-turbo"),
                   embedding_model or os.environ.get("CFD_EMBED_MODEL"))

    def _post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(path, json=payload)
        except self._httpx.TransportError as exc:
            raise TransientError(f"{path}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def chat(self, request: ChatRequest) -> ChatReply:
        payload = {"model": self.model, "messages": request.messages(),
                   "temperature": request.temperature, "max_tokens": request.max_tokens}
        if request.seed is not None:
            payload["seed"] = request.seed
        data = self._post("/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed chat reply: {str(data)[:200]}") from exc
        usage = data.get("usage") or {}
        return ChatReply(text, int(usage.get("prompt_tokens", 0)),
                         int(usage.get("completion_tokens", 0)))

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        data = self._post("/embeddings", {"model": self.embedding_model, "input": list(texts)})
        items = sorted(data.get("data", []), key=lambda d: d.get("index", 0))
        if len(items) != len(texts):
            raise BackendError(f"asked for {len(texts)} embeddings, got {len(items)}")
        vecs = [np.asarray(d["embedding"], dtype=float) for d in items]
        if len({v.shape for v in vecs}) > 1:
            raise BackendError("embedding dimensions disagree within a batch")
        return np.stack(vecs)


# --- trace and gateway ---------------------------------------------------------

class Trace:
    """Per-attempt request log. Timings are kept apart so traces compare equal."""

    def __init__(self, timing: bool = False):
        self.timing = timing
        self._records: list[dict] = []
        self._lock = threading.Lock()

    def add(self, record: dict) -> None:
        with self._lock:
            self._records.append(record)

    @property
    def records(self) -> list[dict]:
        with self._lock:
            return list(self._records)

    def canonical(self) -> list[dict]:
        rows = [{k: v for k, v in r.items() if k not in ("start", "end")} for r in self.records]
        return sorted(rows, key=lambda r: json.dumps(r, sort_keys=True))

    def drain(self) -> list[dict]:
        with self._lock:
            out, self._records = self._records, []
        return out

    def count(self, kind: str, status: str | None = None) -> int:
        return sum(1 for r in self.records
                   if r["kind"] == kind and (status is None or r["status"] == status))


class Gateway:
    def __init__(self, backend: ChatBackend, encoder: EmbeddingBackend | None = None, *,
                 retries: int = 3, backoff: float = 1.0, backoff_factor: float = 2.0,
                 jitter: float = 0.25, parallelism: int = 4, cache_dir: str | Path | None = None,
                 trace: Trace | None = None, seed: int = 0, sleep=time.sleep):
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self.backend = backend
        self.encoder = encoder if encoder is not None else backend
        self.retries = retries
        self.backoff = backoff
        self.backoff_factor = backoff_factor
        self.jitter = jitter
        self.parallelism = parallelism
        self.trace = trace if trace is not None else Trace()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._sleep = sleep
        self._jitter_rng = random.Random(seed)
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(parallelism)
        self._cache: dict[str, np.ndarray] = {}
        self.usage = {"prompt_tokens": 0, "completion_tokens": 0, "requests": 0}

    def _delay(self, attempt: int) -> float:
        with self._lock:
            u = self._jitter_rng.random()
        return self.backoff * self.backoff_factor ** (attempt - 1) * (1 + self.jitter * u)

    def _call(self, kind: str, ident: dict, fn):
        attempt = 0
        while True:
            attempt += 1
            with self._slots:
                start = time.monotonic()
                try:
                    result = fn()
                except TransientError as exc:
                    self._record(kind, ident, attempt, "transient", str(exc), start)
                    if attempt > self.retries:
                        raise RetryBudgetExhausted(
                            f"{kind} {ident} failed after {attempt} attempts: {exc}", attempt
                        ) from exc
                    err = exc
                except BackendError as exc:
                    self._record(kind, ident, attempt, "error", str(exc), start)
                    raise
                else:
                    self._record(kind, ident, attempt, "ok", None, start)
                    return result, attempt
            log.debug("retrying %s %s after %s", kind, ident, err)
            self._sleep(self._delay(attempt))

    def _record(self, kind, ident, attempt, status, detail, start):
        rec = {"kind": kind, **ident, "attempt": attempt, "status": status}
        if detail:
            rec["detail"] = detail
        if self.trace.timing:
            rec["start"], rec["end"] = start, time.monotonic()
        self.trace.add(rec)

    def chat(self, request: ChatRequest) -> ChatReply:
        ident = {"template": request.template_id, "key": request.key, "rep": request.repetition}
        reply, attempts = self._call("chat", ident, lambda: self.backend.chat(request))
        with self._lock:
            self.usage["requests"] += 1
            self.usage["prompt_tokens"] += reply.prompt_tokens
            self.usage["completion_tokens"] += reply.completion_tokens
        return ChatReply(reply.text, reply.prompt_tokens, reply.completion_tokens, attempts)

    def chat_many(self, requests: Sequence[ChatRequest], return_exceptions: bool = False) -> list:
        """Order-preserving fan-out.

        With ``return_exceptions`` a failed request leaves its BackendError in
        its slot instead of raising.
        """
        def one(req):
            try:
                return self.chat(req)
            except BackendError as exc:
                if return_exceptions:
                    return exc
                raise

        if len(requests) <= 1 or self.parallelism == 1:
            return [one(r) for r in requests]
        with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
            return list(pool.map(one, requests))

    def _cache_key(self, text: str) -> str:
        return hashlib.sha256(f"{self.encoder.name}\0{text}".encode()).hexdigest()

    def _cache_get(self, key: str) -> np.ndarray | None:
        vec = self._cache.get(key)
        if vec is None and self.cache_dir is not None:
            path = self.cache_dir / f"{key}.npy"
            if path.exists():
                vec = np.load(path)
                self._cache[key] = vec
        return vec

    def _cache_put(self, key: str, vec: np.ndarray) -> None:
        self._cache[key] = vec
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = self.cache_dir / f"{key}.{threading.get_ident()}.tmp.npy"
            np.save(tmp, vec)
            os.replace(tmp, self.cache_dir / f"{key}.npy")

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("embed_batch needs at least one text")
        keys = [self._cache_key(t) for t in texts]
        missing: dict[str, str] = {}
        for k, t in zip(keys, texts):
            if self._cache_get(k) is None and k not in missing:
                missing[k] = t
        if missing:
            todo = list(missing.items())
            ident = {"encoder": self.encoder.name, "size": len(todo),
                     "digest": hashlib.sha256("".join(k for k, _ in todo).encode()).hexdigest()[:16]}
            vecs, _ = self._call("embed", ident, lambda: self.encoder.embed([t for _, t in todo]))
            for (k, _), v in zip(todo, np.asarray(vecs, dtype=float)):
                self._cache_put(k, v)
        out = [self._cache_get(k) for k in keys]
        if len({v.shape for v in out}) > 1:
            raise BackendError("embedding dimensions disagree within a batch")
        return np.stack(out)
