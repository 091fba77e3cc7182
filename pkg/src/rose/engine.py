"""Automated dataset engine: trending queries + news -> evaluation samples.

Per query the engine (1) drops terms that do not name a segmentable
entity, (2) enhances the query so image search returns multi-entity
scenes, (3) collects a clustered single-entity reference set and a
detector-filtered multi-entity set, (4) dedups the news stream by time
window and snippet similarity, (5) generates questions whose answer is
the query term without leaking it, and (6) auto-labels each multi-entity
image by prototype similarity, reusing the exact verification/correction
procedure the pipeline runs at inference time.

Every drop is counted by reason, and emitted + dropped must reconcile
exactly with attempted at each level (query, draft, image pair).
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from pathlib import Path
from typing import Protocol

from . import vpe
from .config import EngineConfig, RoseConfig
from .core import BinaryMask, RasterImage, rle_encode
from .engine_prompts import (
    CO_ENTITY_TEMPLATE,
    QUESTION_RETRY_SUFFIX,
    QUESTION_TEMPLATE,
    SEGMENTABLE_TEMPLATE,
)
from .errors import ConfigurationError
from .irag import WebDocument, parse_timestamp
from .ports import (
    ImageSearcherPort,
    ObjectDetectorPort,
    PortSuite,
    PromptableMaskGeneratorPort,
    TextGeneratorPort,
    VisualEmbedderPort,
)
from .textnorm import contains_squashed, normalize_tokens, slugify, squash

logger = logging.getLogger(__name__)

DATASET_FIELDS = (
    "id",
    "image_path",
    "question",
    "answer",
    "mask_rle",
    "mask_shape",
    "category",
    "entity_type",
    "collected_at",
    "source_url",
)

ENTITY_TYPES = ("novel", "emerging")

_GEN_MAX_LEN = 512


@dataclass(frozen=True)
class TrendQuery:
    """One trending term with its news metadata."""

    term: str
    category: str = ""
    related_terms: tuple[str, ...] = ()
    news: tuple[WebDocument, ...] = ()

    def __post_init__(self) -> None:
        if not self.term:
            raise ValueError("TrendQuery requires a non-empty term")


@dataclass(frozen=True)
class QueryPair:
    original: str
    enhanced: str

    def __post_init__(self) -> None:
        if self.enhanced == self.original:
            raise ValueError("enhanced query must differ from the original")


@dataclass(frozen=True)
class VqaDraft:
    question: str
    answer: str
    source_doc: WebDocument

    def __post_init__(self) -> None:
        if contains_squashed(self.question, self.answer):
            raise ValueError("question leaks the answer")


@dataclass(frozen=True)
class NestSample:
    """One benchmark record: image, question, answer, mask, split tag."""

    id: str
    image: RasterImage
    question: str
    answer: str
    mask: BinaryMask
    category: str
    entity_type: str
    collected_at: str
    source_url: str

    def __post_init__(self) -> None:
        if not self.id or not self.question or not self.answer:
            raise ValueError("id, question, and answer must be non-empty")
        if self.entity_type not in ENTITY_TYPES:
            raise ValueError(f"entity_type must be one of {ENTITY_TYPES}")
        if self.mask.shape != self.image.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match image shape {self.image.shape}")


class EntityTypeClassifier(Protocol):
    """Assigns the novel/emerging split tag to an answer term."""

    def classify(self, term: str) -> str: ...


class KnownTermsClassifier:
    """Terms on the configured knowledge list are 'emerging'; everything
    unknown to the wrapped model's era is 'novel'."""

    def __init__(self, known_terms: list[str] | tuple[str, ...]) -> None:
        self._known = {squash(t) for t in known_terms if squash(t)}

    def classify(self, term: str) -> str:
        return "emerging" if squash(term) in self._known else "novel"


def build_entity_classifier(config: EngineConfig) -> KnownTermsClassifier:
    terms = list(config.known_terms)
    if config.known_terms_path:
        path = Path(config.known_terms_path)
        if not path.is_file():
            raise ConfigurationError(f"known_terms_path not found: {path}")
        terms.extend(line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip())
    return KnownTermsClassifier(terms)


@dataclass
class BuildReport:
    """Exact drop accounting at query, draft, and image-pair level."""

    queries_total: int = 0
    queries_passed: int = 0
    query_drops: dict[str, int] = field(default_factory=dict)
    drafts_attempted: int = 0
    drafts_ok: int = 0
    draft_drops: dict[str, int] = field(default_factory=dict)
    pairs_attempted: int = 0
    samples_emitted: int = 0
    pair_drops: dict[str, int] = field(default_factory=dict)

    def drop_query(self, reason: str) -> None:
        self.query_drops[reason] = self.query_drops.get(reason, 0) + 1

    def drop_draft(self, reason: str) -> None:
        self.draft_drops[reason] = self.draft_drops.get(reason, 0) + 1

    def drop_pair(self, reason: str) -> None:
        self.pair_drops[reason] = self.pair_drops.get(reason, 0) + 1

    @property
    def total_drops(self) -> int:
        return (
            sum(self.query_drops.values())
            + sum(self.draft_drops.values())
            + sum(self.pair_drops.values())
        )

    def reconciles(self) -> bool:
        return (
            self.queries_total == self.queries_passed + sum(self.query_drops.values())
            and self.drafts_attempted == self.drafts_ok + sum(self.draft_drops.values())
            and self.pairs_attempted == self.samples_emitted + sum(self.pair_drops.values())
        )

    def to_dict(self) -> dict:
        return {
            "queries_total": self.queries_total,
            "queries_passed": self.queries_passed,
            "query_drops": dict(sorted(self.query_drops.items())),
            "drafts_attempted": self.drafts_attempted,
            "drafts_ok": self.drafts_ok,
            "draft_drops": dict(sorted(self.draft_drops.items())),
            "pairs_attempted": self.pairs_attempted,
            "samples_emitted": self.samples_emitted,
            "pair_drops": dict(sorted(self.pair_drops.items())),
            "reconciles": self.reconciles(),
        }


def filter_segmentable_queries(queries: list[TrendQuery], llm: TextGeneratorPort) -> list[TrendQuery]:
    """Keep queries the LLM classifies as naming a concrete segmentable
    entity; anything unparseable or failing is dropped (fail-closed)."""
    kept: list[TrendQuery] = []
    for query in queries:
        prompt = SEGMENTABLE_TEMPLATE.format(term=query.term)
        try:
            output = llm.generate(prompt, 16)
        except Exception:
            logger.warning("segmentability check failed for %r; dropping it", query.term)
            continue
        match = re.search(r"\b(yes|no)\b", output, re.IGNORECASE)
        if match is not None and match.group(1).lower() == "yes":
            kept.append(query)
    return kept


def _propose_co_entities(term: str, llm: TextGeneratorPort, retry: bool) -> str | None:
    prompt = CO_ENTITY_TEMPLATE.format(term=term)
    if retry:
        prompt += " Suggest different entities than before."
    try:
        output = llm.generate(prompt, 256)
    except Exception:
        return None
    proposal = " ".join(output.strip().splitlines()[0].split()) if output.strip() else ""
    if not proposal:
        return None
    if set(normalize_tokens(proposal)) <= set(normalize_tokens(term)):
        return None  # echoed the term; adds nothing
    return proposal


def enhance_query(q: str, llm: TextGeneratorPort) -> QueryPair:
    """Append LLM-proposed co-occurring entities so image search returns
    multi-entity scenes; retries once, then falls back to a fixed
    suffix."""
    if not q:
        raise ValueError("enhance_query requires a non-empty query")
    proposal = _propose_co_entities(q, llm, retry=False)
    if proposal is None:
        proposal = _propose_co_entities(q, llm, retry=True)
    if proposal is None:
        return QueryPair(original=q, enhanced=f"{q} with others")
    return QueryPair(original=q, enhanced=f"{q} {proposal}")


def collect_and_filter_images(
    pair: QueryPair,
    isearch: ImageSearcherPort,
    vembedder: VisualEmbedderPort,
    detector: ObjectDetectorPort,
    k: int,
) -> tuple[list[RasterImage], list[RasterImage]]:
    """(largest-cluster single-entity images, multi-entity images).

    Single-entity candidates come from the original query and keep only
    the largest embedding cluster; multi-entity candidates come from the
    enhanced query and keep only images with at least two detections.
    Either list may come back empty; the caller drops the query then.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    try:
        singles = isearch.search(pair.original, k)
    except Exception:
        logger.warning("image search failed for %r", pair.original)
        singles = []
    single_entity = vpe.cluster_largest(singles, vembedder) if singles else []
    try:
        multi_candidates = isearch.search(pair.enhanced, k)
    except Exception:
        logger.warning("image search failed for %r", pair.enhanced)
        multi_candidates = []
    multi_entity = []
    for image in multi_candidates:
        try:
            if len(detector.detect(image)) >= 2:
                multi_entity.append(image)
        except Exception:
            logger.warning("detector failed on %r; skipping it", image.id)
    return single_entity, multi_entity


def _snippet_jaccard(a: WebDocument, b: WebDocument) -> float:
    ta, tb = set(normalize_tokens(a.snippet)), set(normalize_tokens(b.snippet))
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


def dedup_news(items: list[WebDocument], window_days: int, sim_threshold: float) -> list[WebDocument]:
    """One representative (the earliest) per time window, then drop
    near-duplicate snippets across representatives.

    Items without timestamps sort last and skip the windowing stage (they
    still face the snippet filter).
    """
    timestamped = sorted(
        (d for d in items if d.published_at is not None), key=lambda d: d.published_at
    )
    untimestamped = [d for d in items if d.published_at is None]
    representatives: list[WebDocument] = []
    window_end: datetime | None = None
    for doc in timestamped:
        if window_end is None or doc.published_at >= window_end:
            representatives.append(doc)
            window_end = doc.published_at + timedelta(days=window_days)
    representatives.extend(untimestamped)
    kept: list[WebDocument] = []
    for doc in representatives:
        if any(_snippet_jaccard(doc, earlier) >= sim_threshold for earlier in kept):
            continue
        kept.append(doc)
    return kept


def generate_question(doc: WebDocument, answer: str, llm: TextGeneratorPort) -> VqaDraft | None:
    """Ask for a question answerable by ``answer`` that never mentions it;
    one retry, then the draft is dropped."""
    if not answer:
        raise ValueError("generate_question requires a non-empty answer")
    source = doc.body if doc.body else doc.snippet
    base_prompt = QUESTION_TEMPLATE.format(answer=answer, snippet=source)
    for prompt in (base_prompt, base_prompt + QUESTION_RETRY_SUFFIX):
        try:
            output = llm.generate(prompt, _GEN_MAX_LEN)
        except Exception:
            continue
        question = output.strip().splitlines()[0].strip() if output.strip() else ""
        if question and not contains_squashed(question, answer):
            return VqaDraft(question=question, answer=answer, source_doc=doc)
    logger.warning("question generation kept leaking %r; dropping the draft", answer)
    return None


def auto_label(
    image: RasterImage,
    reference_images: list[RasterImage],
    detector: ObjectDetectorPort,
    vembedder: VisualEmbedderPort,
    maskgen: PromptableMaskGeneratorPort,
    accept_threshold: float,
) -> BinaryMask | None:
    """Prototype-match the reference set against detector proposals and
    box-prompt the winner into a mask; None when the gate fails.

    This is the pipeline's correction procedure applied verbatim, so
    engine labels and inference-time corrections can never diverge.
    """
    if not reference_images:
        raise ValueError("auto_label requires at least one reference image")
    proto = vpe.make_prototype(reference_images, vembedder)
    result = vpe.correct_segmentation(image, proto, detector, vembedder, maskgen, accept_threshold)
    return result.mask if result.corrected else None


@dataclass
class _QueryOutcome:
    """Everything one query contributed, merged into the report in input
    order so parallel builds stay deterministic."""

    dropped_reason: str | None = None
    drafts_attempted: int = 0
    drafts_ok: int = 0
    draft_drops: dict[str, int] = field(default_factory=dict)
    pairs_attempted: int = 0
    pair_drops: dict[str, int] = field(default_factory=dict)
    samples: list[NestSample] = field(default_factory=list)


def build_dataset(
    queries: list[TrendQuery],
    ports: PortSuite,
    config: RoseConfig,
    classifier: EntityTypeClassifier | None = None,
) -> tuple[list[NestSample], BuildReport]:
    """Compose all engine stages per query; one sample per (question
    draft, labeled multi-entity image) pair.

    Queries are independent and run on ``config.runtime.workers`` threads;
    outcomes merge in input order, so results do not depend on the worker
    count.  Per-query failures are isolated and counted; an empty result
    is legal."""
    report = BuildReport(queries_total=len(queries))
    if classifier is None:
        classifier = build_entity_classifier(config.engine)
    kept = filter_segmentable_queries(queries, ports.text_generator)
    kept_ids = {id(q) for q in kept}
    for query in queries:
        if id(query) not in kept_ids:
            report.drop_query("not_segmentable")

    def one(query: TrendQuery) -> _QueryOutcome:
        try:
            return _build_for_query(query, ports, config, classifier)
        except Exception as exc:
            logger.warning("query %r failed: %s", query.term, exc)
            return _QueryOutcome(dropped_reason="error")

    workers = config.runtime.workers
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, kept))
    else:
        outcomes = [one(query) for query in kept]

    samples: list[NestSample] = []
    used_ids: set[str] = set()
    for outcome in outcomes:
        if outcome.dropped_reason is not None:
            report.drop_query(outcome.dropped_reason)
            continue
        report.queries_passed += 1
        report.drafts_attempted += outcome.drafts_attempted
        report.drafts_ok += outcome.drafts_ok
        for reason, count in outcome.draft_drops.items():
            report.draft_drops[reason] = report.draft_drops.get(reason, 0) + count
        report.pairs_attempted += outcome.pairs_attempted
        for reason, count in outcome.pair_drops.items():
            report.pair_drops[reason] = report.pair_drops.get(reason, 0) + count
        for sample in outcome.samples:
            unique = _unique_id(sample.id, used_ids)
            samples.append(sample if unique == sample.id else replace(sample, id=unique))
            report.samples_emitted += 1
    return samples, report


def _build_for_query(
    query: TrendQuery,
    ports: PortSuite,
    config: RoseConfig,
    classifier: EntityTypeClassifier,
) -> _QueryOutcome:
    outcome = _QueryOutcome()
    pair = enhance_query(query.term, ports.text_generator)
    single_entity, multi_entity = collect_and_filter_images(
        pair, ports.image_searcher, ports.visual_embedder, ports.object_detector, config.engine.image_fanout
    )
    if not single_entity:
        logger.info("dropping %r: image search found nothing for the original query", query.term)
        return _QueryOutcome(dropped_reason="no_images")
    if not multi_entity:
        logger.info("dropping %r: no multi-entity images survived the detector filter", query.term)
        return _QueryOutcome(dropped_reason="no_multi_entity_images")
    docs = dedup_news(list(query.news), config.engine.news_window_days, config.engine.snippet_sim_threshold)
    if not docs:
        logger.info("dropping %r: no news to build questions from", query.term)
        return _QueryOutcome(dropped_reason="no_news")
    drafts: list[VqaDraft] = []
    for doc in docs:
        outcome.drafts_attempted += 1
        draft = generate_question(doc, query.term, ports.text_generator)
        if draft is None:
            outcome.draft_drops["question_invalid"] = outcome.draft_drops.get("question_invalid", 0) + 1
        else:
            outcome.drafts_ok += 1
            drafts.append(draft)
    entity_type = classifier.classify(query.term)
    for draft_index, draft in enumerate(drafts):
        for image_index, image in enumerate(multi_entity):
            outcome.pairs_attempted += 1
            mask = auto_label(
                image, single_entity, ports.object_detector, ports.visual_embedder,
                ports.mask_generator, config.vpe.accept_threshold,
            )
            if mask is None:
                outcome.pair_drops["no_confident_mask"] = outcome.pair_drops.get("no_confident_mask", 0) + 1
                continue
            if mask.is_empty:
                outcome.pair_drops["empty_mask"] = outcome.pair_drops.get("empty_mask", 0) + 1
                continue
            outcome.samples.append(
                NestSample(
                    id=f"{slugify(query.term)}-d{draft_index}-i{image_index}",
                    image=image,
                    question=draft.question,
                    answer=query.term,
                    mask=mask,
                    category=query.category,
                    entity_type=entity_type,
                    collected_at=draft.source_doc.published_at.isoformat() if draft.source_doc.published_at else "",
                    source_url=draft.source_doc.url,
                )
            )
    return outcome


def _unique_id(base: str, used: set[str]) -> str:
    candidate = base
    suffix = 2
    while candidate in used:
        candidate = f"{base}-{suffix}"
        suffix += 1
    used.add(candidate)
    return candidate


# --- dataset and trends files ----------------------------------------------

def write_dataset(samples: list[NestSample], out_dir: str | Path, filename: str = "nest.jsonl") -> Path:
    """Write images beside a line-delimited record file.

    The record file is written to a temp file and atomically renamed, so
    readers never see a partial dataset.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    written: set[str] = set()
    lines = []
    for sample in samples:
        image_rel = f"images/{sample.image.id}.png"
        if sample.image.id not in written:
            Image.fromarray(sample.image.pixels).save(out_dir / image_rel, format="PNG")
            written.add(sample.image.id)
        record = {
            "id": sample.id,
            "image_path": image_rel,
            "question": sample.question,
            "answer": sample.answer,
            "mask_rle": rle_encode(sample.mask),
            "mask_shape": list(sample.mask.shape),
            "category": sample.category,
            "entity_type": sample.entity_type,
            "collected_at": sample.collected_at,
            "source_url": sample.source_url,
        }
        lines.append(json.dumps(record, ensure_ascii=False))
    target = out_dir / filename
    fd, tmp_name = tempfile.mkstemp(dir=out_dir, prefix=filename, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as handle:
        for line in lines:
            handle.write(line + "\n")
    os.replace(tmp_name, target)
    return target


def load_trend_queries(path: str | Path) -> list[TrendQuery]:
    """Parse the line-delimited trends ingest file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"trends file not found: {path}")
    queries: list[TrendQuery] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            news = tuple(
                WebDocument(
                    url=item["url"],
                    published_at=parse_timestamp(item.get("published_at")),
                    snippet=item.get("snippet", ""),
                    body=item.get("body", ""),
                )
                for item in raw.get("news", [])
            )
            queries.append(
                TrendQuery(
                    term=raw["term"],
                    category=raw.get("category", ""),
                    related_terms=tuple(raw.get("related_terms", [])),
                    news=news,
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"{path}:{line_no}: malformed trends record: {exc}") from exc
    return queries
