"""LLM and embedding providers.

The wire protocol is OpenAI-compatible (chat completions + embeddings JSON
bodies) because it is the broadest server surface and trivially stubbed.
Deterministic test providers live here too:

* ``TokenHashEmbedder``    - maps each token to a seeded pseudo-random unit
  vector and returns the L2-normalized sum; shared tokens mean higher cosine.
* ``ReplayLlmProvider``    - replays fixture files keyed by request hash.
* ``OracleExtractorLlm``   - answers pair-generation prompts by extracting
  the pairs a synthetic corpus planted in the document text, and answers
  synonym-merge prompts from a known surface-to-canonical table. Enables
  full-pipeline tests without any model.

Every call is logged with request hash, latency, and token counts so stage
reports can account for cost.

Env vars: ``PAIRSEM_API_KEY``, ``PAIRSEM_API_BASE``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import requests

logger = logging.getLogger(__name__)

ENV_API_KEY = "PAIRSEM_API_KEY"
ENV_API_BASE = "PAIRSEM_API_BASE"

# Fixed template used by the synthetic corpus generator; the oracle
# extractor recovers pairs from it.
PLANTED_PAIR_RE = re.compile(r"ENTITY: (.+?) \| ASPECT: (.+?)\.")


def planted_pair_sentence(entity: str, aspect: str) -> str:
    return f"ENTITY: {entity} | ASPECT: {aspect}."


class ProviderError(Exception):
    """Transport or provider-side failure, surfaced with the response body."""


class UnrecordedRequestError(ProviderError):
    """Replay provider was asked for a request hash with no fixture."""


@dataclass(frozen=True)
class LlmRequest:
    system_prompt: str
    user_content: str
    temperature: float = 0.0
    max_tokens: int = 2048

    def __post_init__(self) -> None:
        if not self.system_prompt or not self.user_content:
            raise ValueError("prompts must be non-empty")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def canonical_json(self) -> str:
        return json.dumps(
            {
                "system_prompt": self.system_prompt,
                "user_content": self.user_content,
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
            },
            ensure_ascii=False,
            sort_keys=True,
        )

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


@dataclass
class CallRecord:
    kind: str  # "llm" or "embed"
    request_hash: str
    latency_s: float
    prompt_tokens: int
    completion_tokens: int


def approx_tokens(text: str) -> int:
    return len(text.split())


class LlmProvider:
    """Base class; subclasses implement _generate and inherit call logging."""

    def __init__(self) -> None:
        self.calls: list[CallRecord] = []

    def generate(self, req: LlmRequest) -> str:
        start = time.monotonic()
        text, prompt_toks, completion_toks = self._generate(req)
        self.calls.append(
            CallRecord(
                kind="llm",
                request_hash=req.hash(),
                latency_s=time.monotonic() - start,
                prompt_tokens=prompt_toks,
                completion_tokens=completion_toks,
            )
        )
        return text

    def _generate(self, req: LlmRequest) -> tuple[str, int, int]:
        raise NotImplementedError


class ReplayLlmProvider(LlmProvider):
    """Replays responses from ``<fixtures_dir>/<request-hash>.txt``.

    With a ``fallback`` provider, unseen requests are forwarded once and the
    response is recorded, so fixtures can be captured from a live server.
    """

    def __init__(self, fixtures_dir, fallback: LlmProvider | None = None):
        super().__init__()
        self.fixtures_dir = str(fixtures_dir)
        self.fallback = fallback

    def _fixture_path(self, req: LlmRequest) -> str:
        return os.path.join(self.fixtures_dir, req.hash() + ".txt")

    def _generate(self, req: LlmRequest) -> tuple[str, int, int]:
        path = self._fixture_path(req)
        if os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        elif self.fallback is not None:
            text = self.fallback.generate(req)
            os.makedirs(self.fixtures_dir, exist_ok=True)
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        else:
            raise UnrecordedRequestError(f"unrecorded request {req.hash()}")
        prompt = req.system_prompt + "\n" + req.user_content
        return text, approx_tokens(prompt), approx_tokens(text)


class HttpLlmProvider(LlmProvider):
    """OpenAI-compatible chat-completions client with bounded parallelism."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "gpt-4.1-mini",
        max_attempts: int = 3,
        backoff_s: float = 0.25,
        timeout_s: float = 60.0,
        parallelism: int = 4,
        session: requests.Session | None = None,
    ):
        super().__init__()
        self.base_url = (base_url or os.environ.get(ENV_API_BASE, "")).rstrip("/")
        if not self.base_url:
            raise ValueError(f"no base URL configured (set {ENV_API_BASE})")
        self.api_key = api_key if api_key is not None else os.environ.get(ENV_API_KEY, "")
        self.model = model
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self._slot = threading.Semaphore(parallelism)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        return headers

    def _post(self, path: str, body: dict) -> dict:
        url = self.base_url + path
        last_err: Exception | None = None
        for attempt in range(self.max_attempts):
            if attempt:
                time.sleep(self.backoff_s * (2 ** (attempt - 1)))
            try:
                with self._slot:
                    resp = self.session.post(
                        url, json=body, headers=self._headers(), timeout=self.timeout_s
                    )
            except requests.RequestException as exc:
                last_err = exc
                continue
            if resp.status_code == 200:
                return resp.json()
            if resp.status_code in (429, 500, 502, 503, 504):
                last_err = ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
                continue
            raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        raise ProviderError(
            f"request to {url} failed after {self.max_attempts} attempts: {last_err}"
        )

    def _generate(self, req: LlmRequest) -> tuple[str, int, int]:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        }
        data = self._post("/v1/chat/completions", body)
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"malformed completion response: {data!r}") from exc
        usage = data.get("usage") or {}
        return (
            text,
            int(usage.get("prompt_tokens", approx_tokens(req.user_content))),
            int(usage.get("completion_tokens", approx_tokens(text))),
        )


class OracleExtractorLlm(LlmProvider):
    """Deterministic stand-in that answers from planted ground truth.

    Pair prompts: extracts every ``ENTITY: e | ASPECT: a.`` sentence from the
    document text in the request. Candidate-augmented prompts additionally
    map surfaces to their known canonical forms, mimicking a model that obeys
    the candidate lists. Synonym-merge prompts group the listed items by
    their known canonical concept.
    """

    def __init__(
        self,
        entity_canon: dict[str, str] | None = None,
        aspect_canon: dict[str, str] | None = None,
    ):
        super().__init__()
        self.entity_canon = dict(entity_canon or {})
        self.aspect_canon = dict(aspect_canon or {})

    def _generate(self, req: LlmRequest) -> tuple[str, int, int]:
        sys_p = req.system_prompt
        if "find sets of synonyms" in sys_p:
            text = self._merge_synonyms(req.user_content)
        elif "find all relevant entities from" in sys_p:
            text = self._extract_pairs(req.user_content, canonicalize=True)
        else:
            text = self._extract_pairs(req.user_content, canonicalize=False)
        prompt = sys_p + "\n" + req.user_content
        return text, approx_tokens(prompt), approx_tokens(text)

    def _extract_pairs(self, doc_text: str, canonicalize: bool) -> str:
        out: list[str] = []
        seen: set[tuple[str, str]] = set()
        for ent, asp in PLANTED_PAIR_RE.findall(doc_text):
            if canonicalize:
                ent = self.entity_canon.get(ent.lower(), ent)
                asp = self.aspect_canon.get(asp.lower(), asp)
            if (ent, asp) in seen:
                continue
            seen.add((ent, asp))
            out.append(f"<pair><entity>{ent}</entity><aspect>{asp}</aspect></pair>")
        return "\n".join(out)

    def _merge_synonyms(self, cluster_text: str) -> str:
        members = [m.strip() for m in cluster_text.split(",") if m.strip()]
        groups: dict[str, list[str]] = {}
        for m in members:
            rep = self.entity_canon.get(m.lower()) or self.aspect_canon.get(m.lower(), m)
            groups.setdefault(rep, []).append(m)
        sets = []
        for rep, surfs in groups.items():
            joined = ", ".join(surfs)
            sets.append(f"<set><entities>{joined}</entities><rep>{rep}</rep></set>")
        return "\n".join(sets)


class EmbeddingProvider:
    """Base class for embedding backends; logs every batch call."""

    def __init__(self, dim: int):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.calls: list[CallRecord] = []

    def embed(self, texts: list[str]) -> np.ndarray:
        if not texts:
            raise ValueError("embed() requires at least one text")
        start = time.monotonic()
        matrix = self._embed(texts)
        if matrix.shape != (len(texts), self.dim):
            raise ProviderError(
                f"embedding batch returned shape {matrix.shape}, "
                f"expected {(len(texts), self.dim)}"
            )
        self.calls.append(
            CallRecord(
                kind="embed",
                request_hash=hashlib.sha256(
                    json.dumps(texts, ensure_ascii=False).encode("utf-8")
                ).hexdigest(),
                latency_s=time.monotonic() - start,
                prompt_tokens=sum(approx_tokens(t) for t in texts),
                completion_tokens=0,
            )
        )
        return matrix

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]

    def _embed(self, texts: list[str]) -> np.ndarray:
        raise NotImplementedError


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class TokenHashEmbedder(EmbeddingProvider):
    """Deterministic dense stand-in for a trained retriever.

    Each distinct token maps to a fixed pseudo-random unit vector seeded
    from a stable hash of (seed, token); a text embeds to the L2-normalized
    sum over its distinct tokens. Summation runs in sorted token order, so
    permuting (or repeating) tokens yields a bit-identical embedding.

    Texts with no tokens get a fixed fallback unit vector and are counted
    in ``empty_count``.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        super().__init__(dim)
        self.seed = seed
        self.empty_count = 0
        self._token_cache: dict[str, np.ndarray] = {}
        self._fallback = self._token_vector("\x00empty\x00")

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self.seed}\x00{token}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
            raw = rng.standard_normal(self.dim)
            vec = raw / np.linalg.norm(raw)
            self._token_cache[token] = vec
        return vec

    def _embed(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            tokens = sorted(set(_TOKEN_RE.findall(text.lower())))
            if not tokens:
                self.empty_count += 1
                logger.warning("embedding empty-token text; using fallback vector")
                out[i] = self._fallback
                continue
            acc = np.zeros(self.dim, dtype=np.float64)
            for tok in tokens:
                acc += self._token_vector(tok)
            norm = np.linalg.norm(acc)
            if norm == 0.0:  # opposing token vectors cannot cancel exactly, but be safe
                self.empty_count += 1
                out[i] = self._fallback
            else:
                out[i] = acc / norm
        return out


class HttpEmbeddingProvider(EmbeddingProvider):
    """OpenAI-compatible embeddings client; results reordered to input order."""

    def __init__(
        self,
        dim: int,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "text-embedding-3-small",
        batch_size: int = 64,
        max_attempts: int = 3,
        backoff_s: float = 0.25,
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
    ):
        super().__init__(dim)
        if batch_size <= 0:
            raise ValueError("batch_size must be positive")
        self.batch_size = batch_size
        self._http = HttpLlmProvider(
            base_url=base_url,
            api_key=api_key,
            model=model,
            max_attempts=max_attempts,
            backoff_s=backoff_s,
            timeout_s=timeout_s,
        )
        if session is not None:
            self._http.session = session
        self.model = model

    def _embed(self, texts: list[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for lo in range(0, len(texts), self.batch_size):
            chunk = texts[lo : lo + self.batch_size]
            data = self._http._post(
                "/v1/embeddings", {"model": self.model, "input": chunk}
            )
            items = data.get("data")
            if not isinstance(items, list) or len(items) != len(chunk):
                raise ProviderError(f"malformed embeddings response: {data!r}")
            for item in items:
                vec = np.asarray(item["embedding"], dtype=np.float64)
                if vec.shape != (self.dim,):
                    raise ProviderError(
                        f"remote returned dim {vec.shape} != configured {self.dim}"
                    )
                out[lo + int(item["index"])] = vec
        return out


@dataclass
class ProviderUsage:
    """Aggregated cost counters for one pipeline stage."""

    llm_calls: int = 0
    embed_calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    total_latency_s: float = 0.0

    @classmethod
    def from_calls(cls, calls: list[CallRecord]) -> "ProviderUsage":
        usage = cls()
        for rec in calls:
            if rec.kind == "llm":
                usage.llm_calls += 1
            else:
                usage.embed_calls += 1
            usage.prompt_tokens += rec.prompt_tokens
            usage.completion_tokens += rec.completion_tokens
            usage.total_latency_s += rec.latency_s
        return usage

    def to_record(self) -> dict:
        return {
            "llm_calls": self.llm_calls,
            "embed_calls": self.embed_calls,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "total_latency_s": round(self.total_latency_s, 6),
        }
