"""Query-likelihood scoring through pluggable logprob providers.

A provider is any callable taking a LikelihoodRequest and returning a
LikelihoodResult with the provider's own tokenization of the continuation.
The relevance score of a (document, query) pair is the mean per-token log
probability of the query continuation given the rendered prompt.

Two providers ship here: an HTTP client for a remote logprobs endpoint and
a deterministic add-one-smoothed bigram model for offline use and testing.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, MutableMapping

import requests

from .corpus import Document, Query, Run
from .prompts import (
    DEFAULT_DOC_MAX_CHARS,
    FewShotExample,
    PromptTemplate,
    render_fewshot,
    render_prompt,
)

logger = logging.getLogger(__name__)

DEFAULT_LOGPROB_FLOOR = -100.0
DEFAULT_MAX_WORKERS = 8

UNK = "<unk>"
_WORD_RE = re.compile(r"[a-z0-9]+")


class ProviderError(RuntimeError):
    """Base for likelihood-provider failures."""


class TransportError(ProviderError):
    """HTTP/network failure that persisted through retries."""


class ProtocolError(ProviderError):
    """The endpoint answered, but not with a valid logprobs payload."""


@dataclass(frozen=True)
class LikelihoodRequest:
    """Context (rendered prompt) and the continuation to be scored."""

    context: str
    continuation: str

    def __post_init__(self) -> None:
        if not self.continuation:
            raise ValueError("continuation must be non-empty")


def make_request(context: str, continuation: str) -> LikelihoodRequest:
    """Build a request, inserting one space between context and continuation
    unless the context already ends in whitespace. Without it, tokenizers
    glue the first query token onto the prompt's last word."""
    if context and not context[-1].isspace() and not continuation[:1].isspace():
        continuation = " " + continuation
    return LikelihoodRequest(context=context, continuation=continuation)


@dataclass(frozen=True)
class LikelihoodResult:
    """Per-token log probabilities of the continuation, as tokenized by the
    provider. All values must be finite (providers floor -inf)."""

    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.logprobs):
            raise ProtocolError(
                f"{len(self.tokens)} tokens but {len(self.logprobs)} logprobs"
            )
        for lp in self.logprobs:
            if not math.isfinite(lp):
                raise ProtocolError(f"non-finite logprob {lp!r}")


Provider = Callable[[LikelihoodRequest], LikelihoodResult]


def score_query_likelihood(result: LikelihoodResult) -> float:
    """Mean per-token log probability: the relevance score of the pair."""
    if not result.logprobs:
        raise ValueError("cannot score an empty likelihood result")
    return sum(result.logprobs) / len(result.logprobs)


def floor_logprobs(values: list[float], floor: float = DEFAULT_LOGPROB_FLOOR) -> list[float]:
    """Replace -inf/NaN with the floor and clamp below it, warning once per call."""
    floored = []
    clamped = 0
    for v in values:
        if math.isnan(v) or v < floor:
            clamped += 1
            v = floor
        floored.append(v)
    if clamped:
        logger.warning("floored %d non-finite or sub-floor logprobs to %g", clamped, floor)
    return floored


# ---------------------------------------------------------------------------
# Remote provider
# ---------------------------------------------------------------------------

class RemoteProvider:
    """Client for the logprobs wire protocol.

    POST {endpoint}/v1/loglikelihood with {"context", "continuation"}
    and expect {"tokens": [...], "logprobs": [...]}. Transient failures
    (connection errors, 5xx, 429) are retried with exponential backoff;
    other non-200 answers and malformed payloads fail immediately.
    """

    def __init__(
        self,
        endpoint: str,
        auth_token: str | None = None,
        attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
        logprob_floor: float = DEFAULT_LOGPROB_FLOOR,
        session: requests.Session | None = None,
    ):
        if attempts < 1:
            raise ValueError("attempts must be >= 1")
        self.url = endpoint.rstrip("/") + "/v1/loglikelihood"
        self.auth_token = auth_token
        self.attempts = attempts
        self.backoff = backoff
        self.timeout = timeout
        self.logprob_floor = logprob_floor
        self.session = session or requests.Session()

    def __call__(self, request: LikelihoodRequest) -> LikelihoodResult:
        headers = {"Content-Type": "application/json"}
        if self.auth_token:
            headers["Authorization"] = f"Bearer {self.auth_token}"
        body = {"context": request.context, "continuation": request.continuation}

        last_error: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                response = self.session.post(self.url, json=body, headers=headers,
                                             timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                logger.warning("request to %s failed (attempt %d/%d): %s",
                               self.url, attempt + 1, self.attempts, exc)
                continue
            if response.status_code == 200:
                return self._decode(response)
            if response.status_code >= 500 or response.status_code == 429:
                last_error = TransportError(
                    f"{self.url} answered {response.status_code}"
                )
                logger.warning("%s (attempt %d/%d)", last_error, attempt + 1, self.attempts)
                continue
            raise TransportError(f"{self.url} answered {response.status_code}")
        raise TransportError(
            f"{self.url} unreachable after {self.attempts} attempts: {last_error}"
        )

    def _decode(self, response: requests.Response) -> LikelihoodResult:
        try:
            payload = response.json()
            tokens = payload["tokens"]
            logprobs = [float(v) for v in payload["logprobs"]]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProtocolError(f"malformed response from {self.url}: {exc}") from exc
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise ProtocolError(f"malformed tokens array from {self.url}")
        return LikelihoodResult(
            tokens=tuple(tokens),
            logprobs=tuple(floor_logprobs(logprobs, self.logprob_floor)),
        )


# ---------------------------------------------------------------------------
# Bigram reference language model
# ---------------------------------------------------------------------------

def _words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


class BigramLm:
    """Add-one-smoothed word bigram model: a deterministic offline provider.

    Training appends a terminal UNK to every text so each token occurrence
    contributes exactly one bigram; that makes P(.|w) a proper distribution
    over vocabulary + UNK:  P(v|w) = (c(w,v) + 1) / (c(w) + V + 1).
    """

    def __init__(self, unigrams: Counter[str], bigrams: Counter[tuple[str, str]]):
        self.unigrams = unigrams
        self.bigrams = bigrams
        self.vocab = set(unigrams)
        self.vocab_size = len(self.vocab)

    @classmethod
    def train(cls, texts: list[str]) -> BigramLm:
        unigrams: Counter[str] = Counter()
        bigrams: Counter[tuple[str, str]] = Counter()
        any_tokens = False
        for text in texts:
            tokens = _words(text)
            if not tokens:
                continue
            any_tokens = True
            unigrams.update(tokens)
            for prev, cur in zip(tokens, tokens[1:] + [UNK]):
                bigrams[(prev, cur)] += 1
        if not any_tokens:
            raise ValueError("cannot train a bigram model on an empty corpus")
        return cls(unigrams, bigrams)

    def _canon(self, word: str) -> str:
        return word if word in self.vocab else UNK

    def logprob(self, word: str, prev: str | None) -> float:
        """ln P(word | prev); prev=None means no usable context (UNK path)."""
        w = self._canon(prev) if prev is not None else UNK
        v = self._canon(word)
        # c(w) counts w's occurrences as a bigram context; terminal UNKs
        # never precede anything, so their context count is 0.
        context_count = self.unigrams[w] if w != UNK else 0
        pair_count = self.bigrams[(w, v)]
        return math.log((pair_count + 1) / (context_count + self.vocab_size + 1))

    def __call__(self, request: LikelihoodRequest) -> LikelihoodResult:
        tokens = _words(request.continuation)
        if not tokens:
            raise ValueError("continuation has no word tokens")
        context_words = _words(request.context)
        prev = context_words[-1] if context_words else None
        logprobs = []
        for token in tokens:
            logprobs.append(self.logprob(token, prev))
            prev = token
        return LikelihoodResult(tokens=tuple(tokens), logprobs=tuple(logprobs))


# ---------------------------------------------------------------------------
# Re-ranking
# ---------------------------------------------------------------------------

class ProviderStats:
    """Provider call accounting for cost visibility. Safe to update from
    concurrent scoring workers."""

    def __init__(self) -> None:
        self.requests = 0
        self.cache_hits = 0
        self._lock = threading.Lock()

    def add_request(self) -> None:
        with self._lock:
            self.requests += 1

    def add_cache_hit(self) -> None:
        with self._lock:
            self.cache_hits += 1

    def hit_rate(self) -> float:
        total = self.requests + self.cache_hits
        return self.cache_hits / total if total else 0.0


ScoreCache = MutableMapping[tuple[str, str, str], float]


def template_fingerprint(template: PromptTemplate,
                         fewshot: list[FewShotExample] | None,
                         doc_max_chars: int) -> str:
    """Stable hash of everything that shapes the rendered prompt."""
    material = {
        "system_prefix": template.system_prefix,
        "body": template.body,
        "suffix": template.suffix,
        "doc_max_chars": doc_max_chars,
        "fewshot": [
            [t.document, t.good_question, t.bad_question] for t in fewshot
        ] if fewshot else None,
    }
    blob = json.dumps(material, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def rerank(
    provider: Provider,
    template: PromptTemplate,
    query: Query,
    candidates: list[tuple[str, float]],
    doc_lookup: dict[str, Document],
    doc_max_chars: int = DEFAULT_DOC_MAX_CHARS,
    fewshot: list[FewShotExample] | None = None,
    cache: ScoreCache | None = None,
    stats: ProviderStats | None = None,
    max_workers: int = DEFAULT_MAX_WORKERS,
    on_error: str = "fail",
    logprob_floor: float = DEFAULT_LOGPROB_FLOOR,
    tag: str = "qlm",
) -> Run:
    """Re-score one query's candidates by query likelihood.

    The output run holds exactly the input candidate set, re-sorted by mean
    query-token logprob; results do not depend on request scheduling order.
    on_error="fail" propagates the first provider failure, on_error="floor"
    scores the failing document at the logprob floor instead.
    """
    if on_error not in ("fail", "floor"):
        raise ValueError(f"on_error must be 'fail' or 'floor', got {on_error!r}")
    docs = []
    for did, _ in candidates:
        if did not in doc_lookup:
            raise KeyError(f"candidate doc id {did!r} not in the document lookup")
        docs.append(doc_lookup[did])

    fingerprint = template_fingerprint(template, fewshot, doc_max_chars)

    def score_doc(doc: Document) -> float:
        key = (fingerprint, doc.id, query.id)
        if cache is not None and key in cache:
            if stats is not None:
                stats.add_cache_hit()
            return cache[key]
        if fewshot is not None:
            prompt = render_fewshot(template, fewshot, doc, doc_max_chars)
        else:
            prompt = render_prompt(template, doc, doc_max_chars)
        request = make_request(prompt, query.text)
        try:
            result = provider(request)
            score = score_query_likelihood(result)
        except ProviderError:
            if on_error == "fail":
                raise
            logger.warning("provider failed on doc %s, query %s; scoring at floor %g",
                           doc.id, query.id, logprob_floor)
            score = logprob_floor
        if stats is not None:
            stats.add_request()
        if cache is not None:
            cache[key] = score
        return score

    if max_workers > 1 and len(docs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            scores = list(pool.map(score_doc, docs))
    else:
        scores = [score_doc(doc) for doc in docs]

    return Run({query.id: list(zip((d.id for d in docs), scores))}, tag=tag)


def rerank_run(
    provider: Provider,
    template: PromptTemplate,
    queries: list[Query],
    first_stage: Run,
    doc_lookup: dict[str, Document],
    depth: int = 100,
    **kwargs,
) -> Run:
    """Re-rank the top `depth` candidates of every query in a run.

    Queries without first-stage candidates are omitted; extra keyword
    arguments pass through to rerank().
    """
    tag = kwargs.pop("tag", "qlm")
    merged: dict[str, list[tuple[str, float]]] = {}
    for query in queries:
        candidates = first_stage.entries.get(query.id, [])[:depth]
        if not candidates:
            continue
        single = rerank(provider, template, query, candidates, doc_lookup,
                        tag=tag, **kwargs)
        merged[query.id] = single.entries[query.id]
    return Run(merged, tag=tag)
