"""Internet retrieval: search, chunk, embed, rank, and answer synthesis.

The answer path is: rewrite the user query, fetch documents, split them
into chunks, embed the chunks into an in-memory vector store, rank the
chunks against the query, run a map-reduce extraction over the top
chunks, and resolve the merged candidates against the entities visible
in the user's image.

The map phase emits one candidate per line in the fixed grammar
``candidate<TAB>confidence`` (confidence in [0, 1]); the reduce phase
merges candidates by normalized text and combines per-chunk confidences
with a noisy-OR (1 - prod(1 - c)), which is monotone in supporting
evidence and independent of chunk order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime

import numpy as np

from .core import DetectedEntity, FeatureVector, RasterImage, cosine_similarity, normalize
from .errors import RetrievalUnavailableError
from .ports import ImageSearcherPort, TextEmbedderPort, TextGeneratorPort
from .textnorm import normalize_text, squash, tokens_match

logger = logging.getLogger(__name__)

QUERY_REWRITE_TEMPLATE = (
    "Rewrite the question below as up to {n} short web search queries, "
    "one per line, keeping the key entities.\n"
    "Question: {query}"
)

MAP_TEMPLATE = (
    "From the passage below, list the entities that could answer the "
    "question. Output one per line as: name<TAB>confidence, with "
    "confidence in [0, 1]. Output nothing else.\n"
    "Question: {query}\n"
    "Passage:\n{chunk}"
)

_REWRITE_MAX_LEN = 512
_MAP_MAX_LEN = 2048


@dataclass(frozen=True)
class WebDocument:
    """One search result: url, optional timestamp, snippet, full body."""

    url: str
    published_at: datetime | None = None
    snippet: str = ""
    body: str = ""

    def __post_init__(self) -> None:
        if not self.url:
            raise ValueError("WebDocument requires a non-empty url")


def parse_timestamp(raw: str | None) -> datetime | None:
    """ISO-8601 parser tolerating a trailing Z; None/empty stays None."""
    if not raw:
        return None
    return datetime.fromisoformat(raw.replace("Z", "+00:00"))


@dataclass(frozen=True)
class Chunk:
    text: str
    source_url: str
    index_in_doc: int


@dataclass(frozen=True)
class AnswerCandidate:
    text: str
    confidence: float
    supporting_urls: tuple[str, ...] = ()


@dataclass(frozen=True)
class AnswerSummary:
    """Candidates in descending confidence; may be empty on retrieval
    failure."""

    candidates: tuple[AnswerCandidate, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.candidates

    def top(self) -> AnswerCandidate:
        return self.candidates[0]


@dataclass(frozen=True)
class ResolvedAnswer:
    text: str
    matched_entity: DetectedEntity | None
    resolution: str  # "entity_match" | "confidence_fallback"

    def __post_init__(self) -> None:
        if (self.matched_entity is not None) != (self.resolution == "entity_match"):
            raise ValueError("matched_entity must be present iff resolution == 'entity_match'")


class VectorStore:
    """Immutable list of (unit vector, chunk) pairs with linear scan
    search; linear scan is exact and fast enough at this scale."""

    def __init__(self, entries: list[tuple[FeatureVector, Chunk]], d: int) -> None:
        for vec, _ in entries:
            if vec.d != d:
                raise ValueError(f"store dimension {d} but entry has {vec.d}")
        self._entries = tuple(entries)
        self.d = d

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[tuple[FeatureVector, Chunk], ...]:
        return self._entries


def generate_search_queries(user_query: str, llm: TextGeneratorPort, n: int) -> list[str]:
    """Up to n distinct queries, always including the verbatim user query.

    On LLM failure the user query alone is returned.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    queries = [user_query]
    if n > 1:
        try:
            output = llm.generate(QUERY_REWRITE_TEMPLATE.format(n=n - 1, query=user_query), _REWRITE_MAX_LEN)
        except Exception:
            logger.warning("query rewriting failed; falling back to the raw query")
            return queries
        for line in output.splitlines():
            rewrite = line.strip()
            if rewrite and rewrite not in queries:
                queries.append(rewrite)
            if len(queries) >= n:
                break
    return queries


def split_chunks(doc: WebDocument, chunk_size: int, overlap: int) -> list[Chunk]:
    """Slide a window of ``chunk_size`` characters with ``overlap`` shared
    between consecutive chunks.

    Falls back to the snippet when the body is empty; returns [] when
    both are empty.  Dropping the first ``overlap`` characters of every
    chunk after the first and concatenating reproduces the source text
    exactly.
    """
    if not (chunk_size > overlap >= 0):
        raise ValueError(f"need chunk_size > overlap >= 0, got {chunk_size}, {overlap}")
    text = doc.body if doc.body else doc.snippet
    if not text:
        return []
    chunks: list[Chunk] = []
    pos = 0
    while True:
        chunks.append(Chunk(text=text[pos : pos + chunk_size], source_url=doc.url, index_in_doc=len(chunks)))
        if pos + chunk_size >= len(text):
            break
        pos += chunk_size - overlap
    return chunks


def build_vector_store(chunks: list[Chunk], embedder: TextEmbedderPort) -> VectorStore:
    """Embed chunks (normalized, order preserved), skipping chunks whose
    embedding fails; raises RetrievalUnavailableError if every chunk
    failed."""
    if not chunks:
        raise ValueError("build_vector_store requires at least one chunk")
    entries: list[tuple[FeatureVector, Chunk]] = []
    for chunk in chunks:
        try:
            entries.append((normalize(embedder.embed(chunk.text)), chunk))
        except Exception:
            logger.warning("embedding failed for a chunk of %s; skipping it", chunk.source_url)
    if not entries:
        raise RetrievalUnavailableError("every chunk failed to embed")
    return VectorStore(entries, d=embedder.d)


def retrieve_top_k(store: VectorStore, query_vec: FeatureVector, k: int) -> list[Chunk]:
    """The k chunks most cosine-similar to the query, descending, with
    ties broken by insertion order (earlier wins); empty store gives []."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(store) == 0:
        return []
    if query_vec.d != store.d:
        raise ValueError(f"query dimension {query_vec.d} does not match store dimension {store.d}")
    sims = np.array([cosine_similarity(query_vec, vec) for vec, _ in store.entries])
    order = np.argsort(-sims, kind="stable")
    return [store.entries[i][1] for i in order[:k]]


def _parse_map_output(output: str) -> list[tuple[str, float]]:
    parsed: list[tuple[str, float]] = []
    for line in output.splitlines():
        name, sep, conf_text = line.partition("\t")
        if not sep:
            continue
        name = name.strip()
        try:
            confidence = float(conf_text.strip())
        except ValueError:
            continue
        if name and 0.0 <= confidence <= 1.0:
            parsed.append((name, confidence))
    return parsed


def map_reduce_answer(chunks: list[Chunk], user_query: str, llm: TextGeneratorPort) -> AnswerSummary:
    """MAP each chunk to candidate lines, then REDUCE by normalized text.

    Per-candidate confidence is the noisy-OR of its per-chunk scores
    (within one chunk, duplicates keep the max).  The merged summary is
    invariant under chunk permutation: contributions are sorted before
    folding, display text is the lexicographically smallest variant, and
    supporting urls are sorted.
    """
    merged: dict[str, dict] = {}
    for chunk in chunks:
        prompt = MAP_TEMPLATE.format(query=user_query, chunk=chunk.text)
        try:
            output = llm.generate(prompt, _MAP_MAX_LEN)
        except Exception:
            logger.warning("map phase failed for a chunk of %s; it contributes nothing", chunk.source_url)
            continue
        per_chunk: dict[str, tuple[str, float]] = {}
        for name, confidence in _parse_map_output(output):
            # squash fallback keeps degenerate names (a bare article) alive
            key = normalize_text(name) or squash(name)
            if not key:
                continue
            if key not in per_chunk or confidence > per_chunk[key][1]:
                per_chunk[key] = (name, confidence)
        for key, (name, confidence) in per_chunk.items():
            slot = merged.setdefault(key, {"variants": set(), "confidences": [], "urls": set()})
            slot["variants"].add(name)
            slot["confidences"].append(confidence)
            slot["urls"].add(chunk.source_url)
    candidates = []
    for key, slot in merged.items():
        miss = 1.0
        for confidence in sorted(slot["confidences"], reverse=True):
            miss *= 1.0 - confidence
        candidates.append(
            AnswerCandidate(
                text=min(slot["variants"]),
                confidence=1.0 - miss,
                supporting_urls=tuple(sorted(slot["urls"])),
            )
        )
    candidates.sort(key=lambda c: (-c.confidence, normalize_text(c.text)))
    return AnswerSummary(candidates=tuple(candidates))


def resolve_answer(
    summary: AnswerSummary,
    entities: list[DetectedEntity],
    match_threshold: float = 1.0,
) -> ResolvedAnswer:
    """Scan candidates in descending confidence and return the first one
    whose tokens match a detected entity label; with no match the top
    candidate wins by confidence alone."""
    if summary.empty:
        raise ValueError("resolve_answer requires a non-empty summary")
    for candidate in summary.candidates:
        for entity in entities:
            if entity.label and tokens_match(candidate.text, entity.label, match_threshold):
                return ResolvedAnswer(text=candidate.text, matched_entity=entity, resolution="entity_match")
    return ResolvedAnswer(text=summary.top().text, matched_entity=None, resolution="confidence_fallback")


def fetch_reference_images(answer: ResolvedAnswer, searcher: ImageSearcherPort, k: int) -> list[RasterImage]:
    """Images for the resolved answer text; failures degrade to []."""
    if k < 1:
        raise ValueError("k must be >= 1")
    try:
        return list(searcher.search(answer.text, k))[:k]
    except Exception:
        logger.warning("image search failed for %r; continuing without references", answer.text)
        return []
