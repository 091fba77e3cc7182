"""Metrics, dataset loading/validation, and system evaluation.

Two segmentation metrics plus answer accuracy:

* gIoU — the mean of per-sample IoU (every sample weighs the same).
* cIoU — cumulative intersection over cumulative union (large objects
  weigh more).
* Acc. — fraction of answers matching ground truth under the same
  normalized-token rule used to resolve answers against image entities,
  so "Lionel Messi" counts for ground truth "Messi".

Rendered reports show IoU values x100 with one decimal; stored values
stay raw in [0, 1].
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RoseConfig
from .core import BinaryMask, RasterImage, mask_iou, rle_decode
from .engine import DATASET_FIELDS, ENTITY_TYPES, NestSample
from .errors import DatasetValidationError, MalformedAnnotationError
from .pipeline import RoseResult, UserRequest
from .ports import ReferringSegmenterPort, TextGeneratorPort
from .textnorm import tokens_match
from .tpe import directive

logger = logging.getLogger(__name__)

_ANSWER_MAX_LEN = 256


@dataclass(frozen=True)
class SplitMetrics:
    n: int
    giou: float
    ciou: float
    accuracy: float


@dataclass(frozen=True)
class SampleRow:
    id: str
    iou: float
    answer_correct: bool
    entity_type: str
    error: str = ""


@dataclass(frozen=True)
class EvalReport:
    overall: SplitMetrics
    splits: dict[str, SplitMetrics]
    rows: tuple[SampleRow, ...]


def compute_giou(pairs: list[tuple[BinaryMask, BinaryMask]]) -> float:
    """Mean per-sample IoU."""
    if not pairs:
        raise ValueError("compute_giou requires at least one pair")
    return sum(mask_iou(pred, gt) for pred, gt in pairs) / len(pairs)


def compute_ciou(pairs: list[tuple[BinaryMask, BinaryMask]]) -> float:
    """Cumulative intersection over cumulative union."""
    if not pairs:
        raise ValueError("compute_ciou requires at least one pair")
    inter = 0
    union = 0
    for pred, gt in pairs:
        if pred.shape != gt.shape:
            raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
        inter += int(np.logical_and(pred.bits, gt.bits).sum())
        union += int(np.logical_or(pred.bits, gt.bits).sum())
    if union == 0:
        raise ValueError("compute_ciou undefined when every union is empty")
    return inter / union


def answers_match(pred: str | None, gt: str, threshold: float = 1.0) -> bool:
    """The shared normalized-token rule; a missing prediction is wrong."""
    if pred is None:
        return False
    return tokens_match(pred, gt, threshold)


def compute_answer_accuracy(pred_answers: list[str | None], gt_answers: list[str]) -> float:
    if len(pred_answers) != len(gt_answers):
        raise ValueError(f"length mismatch: {len(pred_answers)} predictions vs {len(gt_answers)} answers")
    if not gt_answers:
        raise ValueError("compute_answer_accuracy requires at least one pair")
    hits = sum(1 for pred, gt in zip(pred_answers, gt_answers) if answers_match(pred, gt))
    return hits / len(gt_answers)


def load_dataset(path: str | Path) -> list[NestSample]:
    """Parse and validate every record; the first invalid record raises
    DatasetValidationError naming its line."""
    from PIL import Image

    path = Path(path)
    if not path.is_file():
        raise DatasetValidationError(f"dataset file not found: {path}")
    base_dir = path.parent
    samples: list[NestSample] = []
    seen_ids: set[str] = set()
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetValidationError(f"invalid JSON: {exc}", line_no) from exc
        if not isinstance(record, dict):
            raise DatasetValidationError("record is not an object", line_no)
        missing = [f for f in DATASET_FIELDS if f not in record]
        extra = [f for f in record if f not in DATASET_FIELDS]
        if missing:
            raise DatasetValidationError(f"missing fields {missing}", line_no)
        if extra:
            raise DatasetValidationError(f"unexpected fields {extra}", line_no)
        if not record["id"]:
            raise DatasetValidationError("empty id", line_no)
        if record["id"] in seen_ids:
            raise DatasetValidationError(f"duplicate id {record['id']!r}", line_no)
        if not record["question"] or not record["answer"]:
            raise DatasetValidationError("question and answer must be non-empty", line_no)
        if record["entity_type"] not in ENTITY_TYPES:
            raise DatasetValidationError(f"entity_type must be one of {ENTITY_TYPES}", line_no)
        shape = record["mask_shape"]
        if not (isinstance(shape, list) and len(shape) == 2 and all(isinstance(v, int) for v in shape)):
            raise DatasetValidationError(f"mask_shape must be [H, W], got {shape!r}", line_no)
        try:
            mask = rle_decode(record["mask_rle"], (shape[0], shape[1]))
        except MalformedAnnotationError as exc:
            raise DatasetValidationError(f"bad mask: {exc}", line_no) from exc
        if mask.is_empty:
            raise DatasetValidationError("mask is empty", line_no)
        image_path = base_dir / record["image_path"]
        with Image.open(image_path) as handle:  # unreadable file raises OSError
            pixels = np.asarray(handle.convert("RGB"), dtype=np.uint8)
        # the file stem identifies the image; the record id identifies the
        # sample (several samples may share one image)
        image = RasterImage(pixels=pixels, id=image_path.stem, source_uri=str(image_path))
        if image.shape != mask.shape:
            raise DatasetValidationError(
                f"image shape {image.shape} does not match mask shape {mask.shape}", line_no
            )
        seen_ids.add(record["id"])
        samples.append(
            NestSample(
                id=record["id"],
                image=image,
                question=record["question"],
                answer=record["answer"],
                mask=mask,
                category=record["category"],
                entity_type=record["entity_type"],
                collected_at=record["collected_at"],
                source_url=record["source_url"],
            )
        )
    return samples


def _score(
    dataset: list[NestSample],
    predictions: list[tuple[BinaryMask, str | None, str]],
) -> EvalReport:
    """Aggregate (mask, answer, error) predictions per split and overall."""
    rows = []
    by_split: dict[str, list[int]] = {}
    pairs: list[tuple[BinaryMask, BinaryMask]] = []
    for index, (sample, (mask, answer, error)) in enumerate(zip(dataset, predictions)):
        iou = mask_iou(mask, sample.mask)
        rows.append(
            SampleRow(
                id=sample.id,
                iou=iou,
                answer_correct=answers_match(answer, sample.answer),
                entity_type=sample.entity_type,
                error=error,
            )
        )
        pairs.append((mask, sample.mask))
        by_split.setdefault(sample.entity_type, []).append(index)

    def metrics(indexes: list[int]) -> SplitMetrics:
        split_pairs = [pairs[i] for i in indexes]
        return SplitMetrics(
            n=len(indexes),
            giou=compute_giou(split_pairs),
            ciou=compute_ciou(split_pairs),
            accuracy=sum(1 for i in indexes if rows[i].answer_correct) / len(indexes),
        )

    return EvalReport(
        overall=metrics(list(range(len(dataset)))),
        splits={split: metrics(indexes) for split, indexes in sorted(by_split.items())},
        rows=tuple(rows),
    )


def evaluate_system(
    dataset: list[NestSample],
    system: Callable[[UserRequest], RoseResult],
    config: RoseConfig,
) -> EvalReport:
    """Run the system over every sample and aggregate per entity-type
    split; a per-sample failure scores IoU 0 with a wrong answer."""
    if not dataset:
        raise ValueError("evaluate_system requires a non-empty dataset")

    def one(sample: NestSample) -> tuple[BinaryMask, str | None, str]:
        try:
            result = system(UserRequest(image=sample.image, query=sample.question))
            return result.mask, result.answer, ""
        except Exception as exc:
            logger.warning("system failed on %s: %s", sample.id, exc)
            return BinaryMask.zeros(sample.image.shape), None, str(exc)

    workers = config.runtime.workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(one, dataset))
    else:
        predictions = [one(sample) for sample in dataset]
    return _score(dataset, predictions)


def run_two_stage_baseline(
    dataset: list[NestSample],
    answerer: TextGeneratorPort,
    segmenter: ReferringSegmenterPort,
) -> EvalReport:
    """The plain comparator: a search-capable answerer produces the
    answer, the segmenter is prompted with the fixed directive built from
    it, and scoring is identical to evaluate_system."""
    if not dataset:
        raise ValueError("run_two_stage_baseline requires a non-empty dataset")
    predictions: list[tuple[BinaryMask, str | None, str]] = []
    for sample in dataset:
        try:
            answer = answerer.generate(sample.question, _ANSWER_MAX_LEN).strip()
            mask = segmenter.segment(sample.image, directive(answer))
            predictions.append((mask, answer or None, ""))
        except Exception as exc:
            logger.warning("two-stage baseline failed on %s: %s", sample.id, exc)
            predictions.append((BinaryMask.zeros(sample.image.shape), None, str(exc)))
    return _score(dataset, predictions)


# --- report files -----------------------------------------------------------

def _fmt_pct(value: float) -> str:
    return f"{value * 100.0:.1f}"


def render_report_table(entries: list[tuple[str, bool, EvalReport]]) -> str:
    """Fixed-width table: method, retrieval flag, Acc., then gIoU/cIoU per
    split and overall."""
    columns = ["Method", "RAG", "Acc."]
    for split in ("novel", "emerging", "overall"):
        columns += [f"{split} gIoU", f"{split} cIoU"]
    rows = [columns]
    for name, rag, report in entries:
        row = [name, "yes" if rag else "no", _fmt_pct(report.overall.accuracy)]
        for split in ("novel", "emerging"):
            metrics = report.splits.get(split)
            row += ["-", "-"] if metrics is None else [_fmt_pct(metrics.giou), _fmt_pct(metrics.ciou)]
        row += [_fmt_pct(report.overall.giou), _fmt_pct(report.overall.ciou)]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(columns))]
    lines = []
    for index, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if index == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(columns))))
    return "\n".join(lines) + "\n"


def write_report_files(report: EvalReport, out_dir: str | Path, method: str, rag: bool) -> None:
    """Per-sample rows as report.jsonl plus the rendered report.txt."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "report.jsonl").open("w", encoding="utf-8") as handle:
        for row in report.rows:
            handle.write(
                json.dumps(
                    {
                        "id": row.id,
                        "iou": row.iou,
                        "answer_correct": row.answer_correct,
                        "entity_type": row.entity_type,
                        "error": row.error,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    summary = {
        "overall": asdict(report.overall),
        "splits": {name: asdict(metrics) for name, metrics in report.splits.items()},
    }
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / "report.txt").write_text(render_report_table([(method, rag, report)]), encoding="utf-8")
