"""Visual verification and correction against a retrieved prototype.

Reference images for the resolved answer are clustered (single-link on
cosine distance) and the largest cluster's normalized mean embedding
becomes the prototype.  The segmenter's foreground is verified against
the prototype; on failure, detector proposals are scored against it and
the best proposal above the acceptance threshold is box-prompted into a
replacement mask.

The same prototype + correction procedure drives the dataset engine's
automatic mask labeling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    BinaryMask,
    DetectedEntity,
    FeatureVector,
    RasterImage,
    cosine_similarity,
    crop_box,
    normalize,
)
from .ports import ObjectDetectorPort, PromptableMaskGeneratorPort, VisualEmbedderPort

logger = logging.getLogger(__name__)

DEFAULT_CLUSTER_DELTA = 0.3
DEFAULT_VERIFY_THRESHOLD = 0.5
DEFAULT_ACCEPT_THRESHOLD = 0.5


@dataclass(frozen=True)
class PrototypeFeature:
    """Unit-norm mean embedding of the retained reference cluster."""

    vector: FeatureVector
    support_count: int

    def __post_init__(self) -> None:
        if self.support_count < 1:
            raise ValueError("prototype requires at least one supporting image")


@dataclass(frozen=True)
class VerificationReport:
    similarity: float
    passed: bool
    threshold_used: float

    def __post_init__(self) -> None:
        if self.passed != (self.similarity >= self.threshold_used):
            raise ValueError("passed must equal similarity >= threshold_used")


@dataclass(frozen=True)
class CorrectionResult:
    mask: BinaryMask | None
    chosen_entity: DetectedEntity | None
    best_similarity: float
    corrected: bool

    def __post_init__(self) -> None:
        if self.corrected != (self.mask is not None):
            raise ValueError("mask must be present iff corrected")


def _embed_normalized(image: RasterImage, vembedder: VisualEmbedderPort) -> FeatureVector:
    return normalize(vembedder.embed(image))


def cluster_largest(
    images: list[RasterImage],
    vembedder: VisualEmbedderPort,
    delta: float = DEFAULT_CLUSTER_DELTA,
) -> list[RasterImage]:
    """Members of the largest single-link cluster under cosine distance.

    Two images join one cluster when connected through pairs at distance
    <= delta.  Ties between equally large clusters go to the one whose
    first member has the lowest index; members keep input order.
    """
    if not images:
        raise ValueError("cluster_largest requires at least one image")
    vectors = [_embed_normalized(img, vembedder) for img in images]
    n = len(images)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if 1.0 - cosine_similarity(vectors[i], vectors[j]) <= delta:
                parent[find(j)] = find(i)
    members: dict[int, list[int]] = {}
    for i in range(n):
        members.setdefault(find(i), []).append(i)
    best = max(members.values(), key=lambda idx: (len(idx), -idx[0]))
    return [images[i] for i in best]


def make_prototype(images: list[RasterImage], vembedder: VisualEmbedderPort) -> PrototypeFeature:
    """Normalized mean of the normalized per-image embeddings."""
    if not images:
        raise ValueError("make_prototype requires at least one image")
    vectors = np.stack([_embed_normalized(img, vembedder).values for img in images])
    mean = FeatureVector(vectors.mean(axis=0))
    return PrototypeFeature(vector=normalize(mean), support_count=len(images))


def verify_foreground(
    image: RasterImage,
    mask: BinaryMask,
    proto: PrototypeFeature,
    vembedder: VisualEmbedderPort,
    verify_threshold: float = DEFAULT_VERIFY_THRESHOLD,
) -> VerificationReport:
    """Compare the masked foreground's embedding with the prototype.

    The mask's tight bounding box is cropped and embedded; an empty mask
    scores -1 and always fails.
    """
    if mask.shape != image.shape:
        raise ValueError(f"mask shape {mask.shape} does not match image shape {image.shape}")
    box = mask.tight_box()
    if box is None:
        return VerificationReport(similarity=-1.0, passed=False, threshold_used=verify_threshold)
    foreground = _embed_normalized(crop_box(image, box), vembedder)
    similarity = cosine_similarity(foreground, proto.vector)
    return VerificationReport(
        similarity=similarity,
        passed=similarity >= verify_threshold,
        threshold_used=verify_threshold,
    )


def correct_segmentation(
    image: RasterImage,
    proto: PrototypeFeature,
    detector: ObjectDetectorPort,
    vembedder: VisualEmbedderPort,
    maskgen: PromptableMaskGeneratorPort,
    accept_threshold: float = DEFAULT_ACCEPT_THRESHOLD,
) -> CorrectionResult:
    """Score every detector proposal against the prototype and accept the
    best one only above the acceptance threshold.

    Ties on similarity go to the larger box, then the lower proposal
    index.  No detections, or a best score under the threshold, leaves
    the result uncorrected (mask absent).
    """
    proposals = detector.detect(image)
    if not proposals:
        return CorrectionResult(mask=None, chosen_entity=None, best_similarity=-1.0, corrected=False)
    best_entity: DetectedEntity | None = None
    best_key: tuple[float, int, int] | None = None
    for index, entity in enumerate(proposals):
        embedding = _embed_normalized(crop_box(image, entity.box), vembedder)
        similarity = cosine_similarity(embedding, proto.vector)
        key = (similarity, entity.box.area, -index)
        if best_key is None or key > best_key:
            best_key = key
            best_entity = entity
    assert best_entity is not None and best_key is not None
    best_similarity = best_key[0]
    if best_similarity < accept_threshold:
        return CorrectionResult(mask=None, chosen_entity=None, best_similarity=best_similarity, corrected=False)
    mask = maskgen.mask_from_box(image, best_entity.box)
    return CorrectionResult(mask=mask, chosen_entity=best_entity, best_similarity=best_similarity, corrected=True)
