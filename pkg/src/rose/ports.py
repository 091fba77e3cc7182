"""Port protocols for every external capability the pipeline consumes.

Each port abstracts one model or web service so the pipeline is
model-agnostic and fully testable offline.  Real adapters must be safe to
call from multiple workers; if a client library is not thread-safe the
adapter is responsible for serializing access internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Protocol, runtime_checkable

from .core import BinaryMask, BoundingBox, DetectedEntity, FeatureVector, RasterImage

if TYPE_CHECKING:  # WebDocument lives with the retrieval operations
    from .irag import WebDocument


@runtime_checkable
class TextGeneratorPort(Protocol):
    """LLM used for gating, query rewriting, map-reduce, and summaries."""

    def generate(self, prompt: str, max_len: int) -> str: ...


@runtime_checkable
class WebSearcherPort(Protocol):
    """Returns at most k documents, each with a non-empty url."""

    def search(self, query: str, k: int) -> list["WebDocument"]: ...


@runtime_checkable
class ImageSearcherPort(Protocol):
    """Returns at most k images for a keyword query."""

    def search(self, query: str, k: int) -> list[RasterImage]: ...


@runtime_checkable
class TextEmbedderPort(Protocol):
    """Deterministic per instance: same text, identical vector."""

    d: int

    def embed(self, text: str) -> FeatureVector: ...


@runtime_checkable
class VisualEmbedderPort(Protocol):
    """Contrastive image encoder; output must be normalizable."""

    d: int

    def embed(self, image: RasterImage) -> FeatureVector: ...


@runtime_checkable
class EntityExtractorPort(Protocol):
    """Vision service returning labeled entities (labels non-empty)."""

    def extract(self, image: RasterImage) -> list[DetectedEntity]: ...


@runtime_checkable
class ObjectDetectorPort(Protocol):
    """Plain detector; labels optional, boxes within image bounds."""

    def detect(self, image: RasterImage) -> list[DetectedEntity]: ...


@runtime_checkable
class PromptableMaskGeneratorPort(Protocol):
    """Box-prompted mask decoder; returned mask shape equals image shape."""

    def mask_from_box(self, image: RasterImage, box: BoundingBox) -> BinaryMask: ...


@runtime_checkable
class ReferringSegmenterPort(Protocol):
    """The wrapped segmentation model: (image, text prompt) -> mask."""

    def segment(self, image: RasterImage, prompt: str) -> BinaryMask: ...


@dataclass
class PortSuite:
    """All ports the pipeline, engine, and evaluator can draw on."""

    text_generator: TextGeneratorPort
    web_searcher: WebSearcherPort
    image_searcher: ImageSearcherPort
    text_embedder: TextEmbedderPort
    visual_embedder: VisualEmbedderPort
    entity_extractor: EntityExtractorPort
    object_detector: ObjectDetectorPort
    mask_generator: PromptableMaskGeneratorPort
    segmenter: ReferringSegmenterPort

    PORT_NAMES = (
        "text_generator",
        "web_searcher",
        "image_searcher",
        "text_embedder",
        "visual_embedder",
        "entity_extractor",
        "object_detector",
        "mask_generator",
        "segmenter",
    )
