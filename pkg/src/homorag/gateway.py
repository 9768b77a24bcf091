"""Clients for the three model roles: token scorer, embedder, and generator.

Real backends speak a small JSON-over-HTTP protocol:

  scorer     POST {model, prompt, target}            -> {tokens: [...], probs: [...]}
  embedder   POST {model, input: [texts]}            -> {embeddings: [[...], ...]}
  generator  POST {model, prompt, <sampling params>} -> {text: "..."}

`mock:<name>` endpoints are deterministic in-process stand-ins so every
pipeline path runs offline:

  mock:uniform(p)        scorer; every target token gets probability p
  mock:keyword-boost     scorer; probability hi (0.9) when the prompt contains
                         any target token of >= 4 characters, else lo (0.4)
  mock:hash(dim=N)       embedder; L2-normalized signed bag of crc32-hashed
                         lowercase word tokens, projected to N buckets
  mock:echo              generator; echoes the prompt's "Homolog ..." context
                         lines verbatim

Responses are cached on disk keyed by a digest of the canonicalized request;
requests are retried up to max_retries times and at most max_in_flight run
concurrently per backend.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

from .config import BackendConfig, ENV_API_KEY_VAR, GenerationParams
from .tag_filter import TokenProbSequence

_MOCK_RE = re.compile(r"^mock:([a-z][a-z0-9\-]*)(?:\((.*)\))?$")
_MOCK_WORD_RE = re.compile(r"[a-z0-9]+")

KEYWORD_BOOST_HI = 0.9
KEYWORD_BOOST_LO = 0.4
KEYWORD_MIN_LEN = 4
DEFAULT_MOCK_DIM = 32
ECHO_PREFIX = "Based on the retrieved evidence, the protein is characterized as follows:"
ECHO_EMPTY = "No supporting evidence was retrieved; no sequence-grounded answer is available."


class GatewayError(RuntimeError):
    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass(frozen=True)
class CacheKey:
    role: str
    model: str
    digest: str

    @classmethod
    def for_request(cls, cfg: BackendConfig, kind: str, payload: dict) -> "CacheKey":
        blob = json.dumps(
            {"role": cfg.role, "model": cfg.model, "kind": kind, "payload": payload},
            sort_keys=True,
            separators=(",", ":"),
        )
        return cls(
            role=cfg.role,
            model=cfg.model,
            digest=hashlib.sha256(blob.encode("utf-8")).hexdigest(),
        )

    def filename(self) -> str:
        return f"{self.role}-{self.digest}.json"


def _http_post_json(url: str, payload: dict, timeout: float, headers: dict) -> dict:
    import requests

    resp = requests.post(url, json=payload, timeout=timeout, headers=headers)
    resp.raise_for_status()
    return resp.json()


def _parse_mock_endpoint(endpoint: str) -> tuple[str, dict]:
    m = _MOCK_RE.match(endpoint)
    if not m:
        raise GatewayError(f"unrecognized mock endpoint {endpoint!r}")
    name, argstr = m.group(1), m.group(2)
    args: dict = {}
    if argstr:
        for pos, part in enumerate(argstr.split(",")):
            part = part.strip()
            if not part:
                continue
            if "=" in part:
                key, _, val = part.partition("=")
                args[key.strip()] = val.strip()
            elif pos == 0:
                args["_0"] = part
    return name, args


def mock_hash_embedding(text: str, dim: int = DEFAULT_MOCK_DIM) -> list[float]:
    """Deterministic hash projection used by the mock embedder.

    Each lowercase word token adds +-1 (sign from bit 16 of its crc32) to
    bucket crc32 % dim; the vector is then L2-normalized. The signs keep
    hash collisions from inflating similarity between unrelated texts.
    """
    vec = [0.0] * dim
    for token in _MOCK_WORD_RE.findall(text.lower()):
        h = zlib.crc32(token.encode("utf-8"))
        vec[h % dim] += 1.0 if (h >> 16) & 1 else -1.0
    norm = sum(v * v for v in vec) ** 0.5
    if norm > 0:
        vec = [v / norm for v in vec]
    return vec


class Gateway:
    """Shared client for all backends; safe to use from concurrent tasks."""

    def __init__(self, cache_dir: Optional[str | Path] = None, transport=None):
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.transport = transport or _http_post_json
        self.retry_backoff = 0.05
        self._semaphores: dict[tuple[str, str], threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()

    # -- caching -----------------------------------------------------------

    def _cache_path(self, key: CacheKey) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / key.filename()

    def _cache_read(self, key: CacheKey) -> Optional[dict]:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        with open(path, "rb") as fh:
            return json.loads(fh.read().decode("utf-8"))

    def _cache_write(self, key: CacheKey, response: dict):
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = json.dumps(response, sort_keys=True, separators=(",", ":")).encode("utf-8")
        tmp = path.with_suffix(f".tmp-{os.getpid()}-{threading.get_ident()}")
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)

    # -- transport ---------------------------------------------------------

    def _semaphore(self, cfg: BackendConfig) -> threading.BoundedSemaphore:
        key = (cfg.role, cfg.endpoint)
        with self._lock:
            sem = self._semaphores.get(key)
            if sem is None or sem._initial_value != cfg.max_in_flight:  # type: ignore[attr-defined]
                sem = threading.BoundedSemaphore(cfg.max_in_flight)
                self._semaphores[key] = sem
            return sem

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(ENV_API_KEY_VAR)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _request(self, cfg: BackendConfig, kind: str, payload: dict) -> dict:
        key = CacheKey.for_request(cfg, kind, payload)
        cached = self._cache_read(key)
        if cached is not None:
            return cached
        if cfg.endpoint.startswith("mock:"):
            response = self._mock_response(cfg, kind, payload)
        else:
            response = self._http_request(cfg, payload)
        self._cache_write(key, response)
        return response

    def _http_request(self, cfg: BackendConfig, payload: dict) -> dict:
        attempts = cfg.max_retries + 1
        last_error: Optional[Exception] = None
        sem = self._semaphore(cfg)
        body = dict(payload)
        body["model"] = cfg.model
        for attempt in range(attempts):
            try:
                with sem:
                    return self.transport(cfg.endpoint, body, cfg.timeout, self._headers())
            except Exception as exc:  # noqa: BLE001 - every transport failure is retried
                last_error = exc
                if attempt < attempts - 1:
                    time.sleep(self.retry_backoff * (attempt + 1))
        raise GatewayError(
            f"{cfg.role} request to {cfg.endpoint} failed after {attempts} attempts: "
            f"{last_error}",
            attempts=attempts,
        )

    # -- mocks -------------------------------------------------------------

    def _mock_response(self, cfg: BackendConfig, kind: str, payload: dict) -> dict:
        name, args = _parse_mock_endpoint(cfg.endpoint)
        if kind == "score":
            tokens = payload["target"].split()
            if name == "uniform":
                p = float(args.get("p", args.get("_0", 0.5)))
                probs = [p] * len(tokens)
            elif name == "keyword-boost":
                hi = float(args.get("hi", KEYWORD_BOOST_HI))
                lo = float(args.get("lo", KEYWORD_BOOST_LO))
                prompt_lower = payload["prompt"].lower()
                keywords = [
                    t for t in _MOCK_WORD_RE.findall(payload["target"].lower())
                    if len(t) >= KEYWORD_MIN_LEN
                ]
                boosted = any(k in prompt_lower for k in keywords)
                probs = [hi if boosted else lo] * len(tokens)
            else:
                raise GatewayError(f"mock {name!r} cannot serve scorer requests")
            return {"tokens": tokens, "probs": probs}
        if kind == "embed":
            if name != "hash":
                raise GatewayError(f"mock {name!r} cannot serve embedding requests")
            dim = int(args.get("dim", args.get("_0", DEFAULT_MOCK_DIM)))
            return {"embeddings": [mock_hash_embedding(t, dim) for t in payload["input"]]}
        if kind == "generate":
            if name != "echo":
                raise GatewayError(f"mock {name!r} cannot serve generation requests")
            lines = [l for l in payload["prompt"].splitlines() if l.startswith("Homolog ")]
            if not lines:
                return {"text": ECHO_EMPTY}
            return {"text": ECHO_PREFIX + "\n" + "\n".join(lines)}
        raise GatewayError(f"unknown request kind {kind!r}")

    # -- public operations ---------------------------------------------------

    def score_tokens(self, cfg: BackendConfig, prompt: str, target: str) -> TokenProbSequence:
        """Per-token probabilities of the target continuation under the prompt."""
        response = self._request(cfg, "score", {"prompt": prompt, "target": target})
        tokens = response.get("tokens")
        probs = response.get("probs")
        if tokens is None or probs is None:
            raise GatewayError(f"scorer response missing tokens/probs: {response}")
        return TokenProbSequence(tokens=tuple(tokens), probs=tuple(float(p) for p in probs))

    def generate(
        self,
        cfg: BackendConfig,
        prompt: str,
        params: Optional[GenerationParams] = None,
    ) -> str:
        """Generate text for a prompt; unset params fall back to the defaults."""
        if not prompt:
            raise GatewayError("generation prompt must be non-empty")
        if len(prompt) > cfg.max_prompt_chars:
            raise GatewayError(
                f"prompt length {len(prompt)} exceeds limit {cfg.max_prompt_chars}"
            )
        params = params or GenerationParams()
        payload = {"prompt": prompt, **asdict(params)}
        response = self._request(cfg, "generate", payload)
        text = response.get("text")
        if text is None:
            raise GatewayError(f"generator response missing text: {response}")
        return text

    def embed(self, cfg: BackendConfig, texts: Sequence[str]) -> list[list[float]]:
        """Embed a batch of texts; order is preserved."""
        texts = list(texts)
        if not texts:
            return []
        response = self._request(cfg, "embed", {"input": texts})
        vectors = response.get("embeddings")
        if vectors is None or len(vectors) != len(texts):
            raise GatewayError(
                f"embedder returned {None if vectors is None else len(vectors)} vectors "
                f"for {len(texts)} texts"
            )
        return [[float(v) for v in vec] for vec in vectors]

    # -- role handles --------------------------------------------------------

    def scorer_handle(self, cfg: BackendConfig) -> "ScorerHandle":
        return ScorerHandle(self, cfg)

    def embedder_handle(self, cfg: BackendConfig) -> "EmbedderHandle":
        return EmbedderHandle(self, cfg)


@dataclass
class ScorerHandle:
    gateway: Gateway
    cfg: BackendConfig

    def score_tokens(self, prompt: str, target: str) -> TokenProbSequence:
        return self.gateway.score_tokens(self.cfg, prompt, target)


@dataclass
class EmbedderHandle:
    gateway: Gateway
    cfg: BackendConfig

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return self.gateway.embed(self.cfg, texts)
