"""Plug-and-play orchestration: gate, retrieve, enhance, segment, verify.

Every stage appends a trace record, and any retrieval-path failure
degrades to segmenting the raw query instead of aborting, so the worst
outcome of a failure is the plain baseline behavior.  The wrapped
segmenter failing is the one fatal error (there is no mask without it).

Results serialize deterministically: timing fields are excluded from the
canonical form so reruns over the same fixture compare byte-identical.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import irag, tpe, vpe, websense
from .config import RoseConfig
from .core import BinaryMask, RasterImage, rle_encode
from .errors import SegmenterError
from .ports import PortSuite
from .websense import RetrievalDecision

logger = logging.getLogger(__name__)

STAGE_ORDER = ("gate", "retrieval", "prompt", "segment", "verify", "correct")


@dataclass(frozen=True)
class UserRequest:
    image: RasterImage
    query: str

    def __post_init__(self) -> None:
        if not self.query:
            raise ValueError("query must be non-empty")


@dataclass(frozen=True)
class StageRecord:
    stage: str
    status: str  # ok | skipped | degraded | error
    detail: str = ""
    data: dict = field(default_factory=dict)
    duration_s: float = 0.0

    def to_dict(self, include_timings: bool = False) -> dict:
        record = {"stage": self.stage, "status": self.status, "detail": self.detail, "data": self.data}
        if include_timings:
            record["duration_s"] = self.duration_s
        return record


@dataclass
class RoseResult:
    mask: BinaryMask
    answer: str | None
    decision: RetrievalDecision
    verification: vpe.VerificationReport | None
    correction: vpe.CorrectionResult | None
    stage_timings: dict[str, float]
    trace: list[StageRecord]

    def to_dict(self, include_timings: bool = False) -> dict:
        """Canonical serialized form (timings excluded by default so two
        runs over the same fixture serialize identically)."""
        record = {
            "mask_rle": rle_encode(self.mask),
            "answer": self.answer,
            "decision": {
                "retrieve": self.decision.retrieve,
                "tier": self.decision.tier,
                "matched_rule": self.decision.matched_rule,
            },
            "verification": None
            if self.verification is None
            else {
                "similarity": self.verification.similarity,
                "passed": self.verification.passed,
                "threshold_used": self.verification.threshold_used,
            },
            "correction": None
            if self.correction is None
            else {
                "corrected": self.correction.corrected,
                "best_similarity": self.correction.best_similarity,
                "chosen_box": None
                if self.correction.chosen_entity is None
                else list(self.correction.chosen_entity.box.as_tuple()),
            },
            "trace": [record.to_dict(include_timings) for record in self.trace],
        }
        if include_timings:
            record["stage_timings"] = dict(self.stage_timings)
        return record

    def trace_lines(self, include_timings: bool = False) -> list[str]:
        """One JSON object per trace record, ready for an ndjson file."""
        return [json.dumps(r.to_dict(include_timings), sort_keys=True) for r in self.trace]


class _Tracer:
    def __init__(self) -> None:
        self.records: list[StageRecord] = []
        self.timings: dict[str, float] = {}
        self._stage_start: dict[str, float] = {}

    def start(self, stage: str) -> None:
        self._stage_start[stage] = time.perf_counter()

    def add(self, stage: str, status: str, detail: str = "", **data) -> None:
        started = self._stage_start.get(stage)
        duration = time.perf_counter() - started if started is not None else 0.0
        self.timings[stage] = self.timings.get(stage, 0.0) + duration
        self._stage_start.pop(stage, None)
        self.records.append(StageRecord(stage=stage, status=status, detail=detail, data=data, duration_s=duration))


@dataclass(frozen=True)
class _RetrievalOutcome:
    answer: irag.ResolvedAnswer
    summary: irag.AnswerSummary
    reference_images: list[RasterImage]


def _segment(ports: PortSuite, image: RasterImage, prompt: str) -> BinaryMask:
    try:
        mask = ports.segmenter.segment(image, prompt)
    except Exception as exc:
        raise SegmenterError(f"segmenter failed: {exc}") from exc
    if mask.shape != image.shape:
        raise SegmenterError(f"segmenter returned mask of shape {mask.shape} for image {image.shape}")
    return mask


def _gate(request: UserRequest, ports: PortSuite, config: RoseConfig,
          ruleset: list[websense.Rule] | None, tracer: _Tracer) -> RetrievalDecision:
    tracer.start("gate")
    if not config.runtime.enable_irag:
        decision = RetrievalDecision(retrieve=False, tier="rule", matched_rule="irag_disabled")
        tracer.add("gate", "skipped", "retrieval disabled by configuration")
        return decision
    if not config.runtime.enable_websense:
        decision = RetrievalDecision(retrieve=True, tier="rule", matched_rule="gate_disabled")
        tracer.add("gate", "skipped", "gate disabled by configuration; retrieval forced")
        return decision
    if ruleset is None:
        ruleset = load_gate_ruleset(config)
    decision = websense.decide(request.query, ruleset, ports.text_generator, config.websense.cutoff_year)
    tracer.add(
        "gate", "ok",
        f"{'retrieve' if decision.retrieve else 'skip'} via {decision.tier} tier",
        tier=decision.tier, matched_rule=decision.matched_rule, retrieve=decision.retrieve,
    )
    return decision


def load_gate_ruleset(config: RoseConfig) -> list[websense.Rule]:
    """The configured ruleset file, or the embedded defaults."""
    if config.websense.ruleset_path:
        return websense.load_ruleset(config.websense.ruleset_path)
    return websense.default_ruleset(config.websense.cutoff_year)


def _run_retrieval(request: UserRequest, ports: PortSuite, config: RoseConfig,
                   tracer: _Tracer) -> _RetrievalOutcome | None:
    """The IRAG stage; returns None (with a degraded trace record) when
    nothing usable came back."""
    cfg = config.irag
    tracer.start("retrieval")
    queries = irag.generate_search_queries(request.query, ports.text_generator, cfg.query_rewrites + 1)
    documents = []
    seen_urls: set[str] = set()
    for query in queries:
        try:
            results = ports.web_searcher.search(query, cfg.search_fanout)
        except Exception:
            logger.warning("web search failed for %r", query)
            continue
        for doc in results:
            if doc.url not in seen_urls:
                seen_urls.add(doc.url)
                documents.append(doc)
    if not documents:
        tracer.add("retrieval", "degraded", "web search returned no documents", queries=len(queries))
        return None
    chunks = [
        chunk
        for doc in documents
        for chunk in irag.split_chunks(doc, cfg.chunk_size, cfg.chunk_overlap)
    ]
    if not chunks:
        tracer.add("retrieval", "degraded", "documents contained no text", documents=len(documents))
        return None
    try:
        store = irag.build_vector_store(chunks, ports.text_embedder)
        query_vec = ports.text_embedder.embed(request.query)
    except Exception as exc:
        tracer.add("retrieval", "degraded", f"embedding unavailable: {exc}", chunks=len(chunks))
        return None
    top_chunks = irag.retrieve_top_k(store, query_vec, cfg.top_k)
    summary = irag.map_reduce_answer(top_chunks, request.query, ports.text_generator)
    if summary.empty:
        tracer.add("retrieval", "degraded", "map-reduce produced no answer candidates", chunks=len(top_chunks))
        return None
    try:
        entities = ports.entity_extractor.extract(request.image)
    except Exception:
        logger.warning("entity extraction failed; resolving by confidence alone")
        entities = []
    answer = irag.resolve_answer(summary, entities, cfg.match_threshold)
    references = irag.fetch_reference_images(answer, ports.image_searcher, cfg.reference_images)
    tracer.add(
        "retrieval", "ok",
        f"answer {answer.text!r} via {answer.resolution}",
        documents=len(documents), chunks=len(chunks), candidates=len(summary.candidates),
        answer=answer.text, resolution=answer.resolution, reference_images=len(references),
    )
    return _RetrievalOutcome(answer=answer, summary=summary, reference_images=references)


def run_sample(
    request: UserRequest,
    ports: PortSuite,
    config: RoseConfig,
    ruleset: list[websense.Rule] | None = None,
) -> RoseResult:
    """Run the full pipeline on one request.

    Raises SegmenterError only; every other failure degrades in-trace.
    """
    tracer = _Tracer()
    decision = _gate(request, ports, config, ruleset, tracer)

    if not decision.retrieve:
        tracer.start("segment")
        mask = _segment(ports, request.image, request.query)
        tracer.add("segment", "ok", "raw query (retrieval skipped)", prompt=request.query)
        return RoseResult(mask=mask, answer=None, decision=decision, verification=None,
                          correction=None, stage_timings=tracer.timings, trace=tracer.records)

    outcome = None
    try:
        outcome = _run_retrieval(request, ports, config, tracer)
    except Exception as exc:  # belt and braces: no retrieval error is fatal
        tracer.add("retrieval", "degraded", f"unexpected retrieval failure: {exc}")
    if outcome is None:
        tracer.start("segment")
        mask = _segment(ports, request.image, request.query)
        tracer.add("segment", "ok", "raw query (retrieval degraded)", prompt=request.query)
        return RoseResult(mask=mask, answer=None, decision=decision, verification=None,
                          correction=None, stage_timings=tracer.timings, trace=tracer.records)

    answer = outcome.answer
    tracer.start("prompt")
    if config.runtime.enable_tpe:
        try:
            background = tpe.fetch_background(
                answer, ports.web_searcher, ports.text_generator, config.tpe.background_max_chars
            )
        except Exception:
            background = tpe.BackgroundKnowledge()
        prompt = tpe.build_prompt(request.query, answer, background, config.tpe.template or None).text
        tracer.add("prompt", "ok", "enhanced prompt", prompt=prompt, background_chars=len(background.text))
    else:
        prompt = tpe.directive(answer.text)
        tracer.add("prompt", "ok", "plain directive", prompt=prompt)

    tracer.start("segment")
    mask = _segment(ports, request.image, prompt)
    tracer.add("segment", "ok", "segmented with prompt", prompt=prompt, mask_pixels=mask.count)

    verification = None
    correction = None
    if config.runtime.enable_vpe:
        tracer.start("verify")
        if not outcome.reference_images:
            tracer.add("verify", "skipped", "no reference images; keeping segmenter mask")
        else:
            try:
                members = vpe.cluster_largest(
                    outcome.reference_images, ports.visual_embedder, config.vpe.cluster_delta
                )
                proto = vpe.make_prototype(members, ports.visual_embedder)
                verification = vpe.verify_foreground(
                    request.image, mask, proto, ports.visual_embedder, config.vpe.verify_threshold
                )
                tracer.add(
                    "verify", "ok",
                    f"similarity {verification.similarity:.3f} ({'pass' if verification.passed else 'fail'})",
                    similarity=verification.similarity, passed=verification.passed,
                    prototype_support=proto.support_count,
                )
                if not verification.passed:
                    tracer.start("correct")
                    correction = vpe.correct_segmentation(
                        request.image, proto, ports.object_detector, ports.visual_embedder,
                        ports.mask_generator, config.vpe.accept_threshold,
                    )
                    if correction.corrected:
                        mask = correction.mask
                        tracer.add("correct", "ok", "mask replaced by corrected proposal",
                                   best_similarity=correction.best_similarity)
                    else:
                        tracer.add("correct", "degraded", "no proposal above threshold; keeping original mask",
                                   best_similarity=correction.best_similarity)
            except Exception as exc:
                tracer.add("verify", "degraded", f"verification unavailable: {exc}; keeping original mask")

    return RoseResult(mask=mask, answer=answer.text, decision=decision, verification=verification,
                      correction=correction, stage_timings=tracer.timings, trace=tracer.records)


def _error_result(request: UserRequest, exc: Exception) -> RoseResult:
    record = StageRecord(stage="segment", status="error", detail=str(exc))
    return RoseResult(
        mask=BinaryMask.zeros(request.image.shape),
        answer=None,
        decision=RetrievalDecision(retrieve=False, tier="rule", matched_rule="fatal_error"),
        verification=None,
        correction=None,
        stage_timings={},
        trace=[record],
    )


def run_batch(
    samples: list[UserRequest],
    ports: PortSuite,
    config: RoseConfig,
    workers: int | None = None,
) -> list[RoseResult]:
    """Run samples (possibly in parallel); results stay positionally
    aligned with the inputs and per-sample fatal errors are captured as
    error records rather than failing the batch."""
    workers = workers if workers is not None else config.runtime.workers
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if not samples:
        return []
    ruleset = load_gate_ruleset(config) if config.runtime.enable_websense else None

    def one(request: UserRequest) -> RoseResult:
        try:
            return run_sample(request, ports, config, ruleset)
        except SegmenterError as exc:
            logger.warning("sample failed fatally: %s", exc)
            return _error_result(request, exc)

    if workers == 1:
        return [one(request) for request in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))
