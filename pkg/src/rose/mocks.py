"""Deterministic mock implementations of every port, driven by a
serializable fixture world, so whole pipeline runs are reproducible
bit-for-bit without touching the network.

The world assigns each named entity a distinct flat color and an
orthogonal unit basis vector.  Fixture images are painted rasters
(background plus colored entity boxes), and the visual embedder reads an
image's entity mixture straight from its pixels, plus a small
deterministic per-image perturbation (norm < 0.05).  Crops of the same
entity therefore embed nearly identically while different entities stay
nearly orthogonal.

The mock referring segmenter is deliberately naive: it segments the
in-image entity whose label occurs last in the prompt (and nothing when
no label occurs), which gives the verification/correction path real work
to do in tests.

Every mock records its invocations in ``.calls`` so tests can assert
invocation economy.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine_prompts, tpe, websense
from .core import BinaryMask, BoundingBox, DetectedEntity, FeatureVector, RasterImage
from .errors import ConfigurationError
from .irag import MAP_TEMPLATE, QUERY_REWRITE_TEMPLATE, WebDocument, parse_timestamp
from .ports import PortSuite
from .textnorm import normalize_text, normalize_tokens, slugify

_PALETTE: tuple[tuple[int, int, int], ...] = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (100, 100, 100),
)

DEFAULT_BACKGROUND = (200, 200, 200)
DEFAULT_NOISE = 0.04

_HASH_DIMS = 23  # token-hash dims appended after the entity dims
_FALLBACK_DIM = 1  # one dim reserved for content with no known signal


def _marker(template: str) -> str:
    """Literal prefix of a prompt template (up to its first placeholder)."""
    return template.split("{", 1)[0]


_GATE_MARKER = _marker(websense.SEMANTIC_GATE_TEMPLATE)
_REWRITE_MARKER = _marker(QUERY_REWRITE_TEMPLATE)
_MAP_MARKER = _marker(MAP_TEMPLATE)
_SUMMARIZE_MARKER = _marker(tpe.SUMMARIZE_TEMPLATE)
_SEGMENTABLE_MARKER = _marker(engine_prompts.SEGMENTABLE_TEMPLATE)
_CO_ENTITY_MARKER = _marker(engine_prompts.CO_ENTITY_TEMPLATE)
_QUESTION_MARKER = _marker(engine_prompts.QUESTION_TEMPLATE)


@dataclass(frozen=True)
class Region:
    """One painted entity region of a fixture image.

    ``label`` is what the extractor/segmenter sees; it may be an
    uninformative alias to model entities that vision services cannot
    name.
    """

    entity: str
    label: str
    box: BoundingBox


class FixtureWorld:
    """Everything the mock suite needs to answer deterministically."""

    def __init__(self, embedding_dim: int | None = None, noise: float = DEFAULT_NOISE) -> None:
        self.embedding_dim = embedding_dim
        self.noise = noise
        self.entity_colors: dict[str, tuple[int, int, int]] = {}
        self.images: dict[str, RasterImage] = {}
        self.regions: dict[str, list[Region]] = {}
        self.backgrounds: dict[str, tuple[int, int, int]] = {}
        self.documents: dict[str, list[WebDocument]] = {}
        self.image_search: dict[str, list[str]] = {}
        self.semantic_verdicts: dict[str, str] = {}
        self.co_entities: dict[str, list[str]] = {}
        self.segmentable: dict[str, bool] = {}
        self.questions: dict[str, str] = {}
        self.qa_answers: dict[str, str] = {}

    # -- construction -------------------------------------------------

    def add_entity(self, name: str, color: tuple[int, int, int] | None = None) -> None:
        if name in self.entity_colors:
            return
        if color is None:
            color = self._next_free_color()
        if color in self.entity_colors.values() or color == DEFAULT_BACKGROUND:
            raise ConfigurationError(f"color {color} already in use")
        self.entity_colors[name] = color

    def _next_free_color(self) -> tuple[int, int, int]:
        used = set(self.entity_colors.values()) | {DEFAULT_BACKGROUND}
        for color in _PALETTE:
            if color not in used:
                return color
        for i in range(10_000):  # deterministic overflow stream
            color = ((37 * i + 11) % 256, (73 * i + 89) % 256, (151 * i + 47) % 256)
            if color not in used:
                return color
        raise ConfigurationError("fixture color space exhausted")

    def add_image(
        self,
        image_id: str,
        height: int,
        width: int,
        regions: list[Region],
        background: tuple[int, int, int] = DEFAULT_BACKGROUND,
    ) -> RasterImage:
        if image_id in self.images:
            raise ConfigurationError(f"duplicate fixture image id {image_id!r}")
        pixels = np.empty((height, width, 3), dtype=np.uint8)
        pixels[:, :] = background
        for region in regions:
            if region.entity not in self.entity_colors:
                raise ConfigurationError(f"unknown entity {region.entity!r} in image {image_id!r}")
            box = region.box
            if box.x_max > width or box.y_max > height:
                raise ConfigurationError(f"region box {box.as_tuple()} outside image {image_id!r}")
            pixels[box.y_min : box.y_max, box.x_min : box.x_max] = self.entity_colors[region.entity]
        image = RasterImage(pixels=pixels, id=image_id)
        self.images[image_id] = image
        self.regions[image_id] = list(regions)
        self.backgrounds[image_id] = background
        return image

    def add_reference_images(
        self,
        entity: str,
        keyword: str | None = None,
        count: int = 3,
        size: tuple[int, int] = (32, 32),
    ) -> list[str]:
        """Register ``count`` single-entity images and index them under
        ``keyword`` (default: the entity name)."""
        height, width = size
        ids = []
        for i in range(count):
            image_id = f"{slugify(entity)}-ref{i}"
            # vary the margin so each reference has distinct pixels
            margin = 2 + (i % 3)
            box = BoundingBox(margin, margin, width - margin, height - margin)
            self.add_image(image_id, height, width, [Region(entity, entity, box)])
            ids.append(image_id)
        self.add_image_search(keyword or entity, ids)
        return ids

    def add_documents(self, keyword: str, docs: list[WebDocument]) -> None:
        self.documents[normalize_text(keyword)] = list(docs)

    def add_image_search(self, keyword: str, image_ids: list[str]) -> None:
        self.image_search[normalize_text(keyword)] = list(image_ids)

    # -- embedding geometry --------------------------------------------

    @property
    def dim(self) -> int:
        if self.embedding_dim is not None:
            return self.embedding_dim
        return len(self.entity_colors) + _HASH_DIMS + _FALLBACK_DIM

    def entity_index(self, name: str) -> int:
        return list(self.entity_colors).index(name)

    def basis(self, name: str) -> np.ndarray:
        v = np.zeros(self.dim)
        v[self.entity_index(name)] = 1.0
        return v

    def validate(self) -> None:
        if not self.entity_colors:
            raise ConfigurationError("fixture has no entities")
        if not self.images:
            raise ConfigurationError("fixture has no images")
        if self.dim < len(self.entity_colors) + _FALLBACK_DIM + 1:
            raise ConfigurationError(
                f"embedding_dim {self.dim} too small for {len(self.entity_colors)} entities"
            )
        for keyword, ids in self.image_search.items():
            for image_id in ids:
                if image_id not in self.images:
                    raise ConfigurationError(f"image_search[{keyword!r}] references unknown image {image_id!r}")

    # -- serialization -------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "embedding_dim": self.embedding_dim,
            "noise": self.noise,
            "entities": [{"name": n, "color": list(c)} for n, c in self.entity_colors.items()],
            "images": [
                {
                    "id": image_id,
                    "height": image.shape[0],
                    "width": image.shape[1],
                    "background": list(self.backgrounds[image_id]),
                    "regions": [
                        {"entity": r.entity, "label": r.label, "box": list(r.box.as_tuple())}
                        for r in self.regions[image_id]
                    ],
                }
                for image_id, image in self.images.items()
            ],
            "documents": {
                key: [
                    {
                        "url": d.url,
                        "published_at": d.published_at.isoformat() if d.published_at else None,
                        "snippet": d.snippet,
                        "body": d.body,
                    }
                    for d in docs
                ]
                for key, docs in self.documents.items()
            },
            "image_search": self.image_search,
            "semantic_verdicts": self.semantic_verdicts,
            "co_entities": self.co_entities,
            "segmentable": self.segmentable,
            "questions": self.questions,
            "qa_answers": self.qa_answers,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FixtureWorld":
        payload = json.loads(text)
        for required in ("entities", "images", "documents", "image_search"):
            if required not in payload:
                raise ConfigurationError(f"fixture is missing required table {required!r}")
        world = cls(embedding_dim=payload.get("embedding_dim"), noise=payload.get("noise", DEFAULT_NOISE))
        for entity in payload["entities"]:
            color = tuple(entity["color"]) if entity.get("color") else None
            world.add_entity(entity["name"], color)
        for spec in payload["images"]:
            regions = [
                Region(entity=r["entity"], label=r["label"], box=BoundingBox(*r["box"]))
                for r in spec.get("regions", [])
            ]
            world.add_image(
                spec["id"],
                spec["height"],
                spec["width"],
                regions,
                background=tuple(spec.get("background", DEFAULT_BACKGROUND)),
            )
        for keyword, docs in payload["documents"].items():
            world.add_documents(
                keyword,
                [
                    WebDocument(
                        url=d["url"],
                        published_at=parse_timestamp(d.get("published_at")),
                        snippet=d.get("snippet", ""),
                        body=d.get("body", ""),
                    )
                    for d in docs
                ],
            )
        for keyword, ids in payload["image_search"].items():
            world.add_image_search(keyword, ids)
        world.semantic_verdicts = dict(payload.get("semantic_verdicts", {}))
        world.co_entities = {k: list(v) for k, v in payload.get("co_entities", {}).items()}
        world.segmentable = dict(payload.get("segmentable", {}))
        world.questions = dict(payload.get("questions", {}))
        world.qa_answers = dict(payload.get("qa_answers", {}))
        world.validate()
        return world

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureWorld":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _match_key(table: dict, query: str) -> str | None:
    """Longest registered key appearing token-aligned in the query.

    Keys are normalized on the fly so tables registered with raw strings
    (e.g. verdict tables) match the same way as pre-normalized ones.
    """
    padded = f" {normalize_text(query)} "
    hits = [key for key in table if f" {normalize_text(key)} " in padded]
    if not hits:
        return None
    return max(hits, key=lambda k: (len(k), k))


def _noise_vector(seed_bytes: bytes, dim: int, scale: float) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(seed_bytes).digest()[:8], "big")
    g = np.random.default_rng(seed).standard_normal(dim)
    return scale * g / np.linalg.norm(g)


class _Recorded:
    def __init__(self) -> None:
        self.calls: list[tuple] = []


class MockTextGenerator(_Recorded):
    """Routes each prompt template to a deterministic fixture answer."""

    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world

    def generate(self, prompt: str, max_len: int) -> str:
        self.calls.append((prompt, max_len))
        return self._route(prompt, max_len)[:max_len]

    def _route(self, prompt: str, max_len: int) -> str:
        if prompt in self.world.qa_answers:
            return self.world.qa_answers[prompt]
        if prompt.startswith(_GATE_MARKER):
            query = _after(prompt, "Question: ")
            key = _match_key(self.world.semantic_verdicts, query) if query else None
            verdict = self.world.semantic_verdicts.get(key, "retrieve") if key else "retrieve"
            return verdict.upper()
        if prompt.startswith(_REWRITE_MARKER):
            query = _after(prompt, "Question: ") or ""
            return f"{query} latest news\n{query} details"
        if prompt.startswith(_MAP_MARKER):
            passage = prompt.split("Passage:\n", 1)[1] if "Passage:\n" in prompt else ""
            padded = f" {normalize_text(passage)} "
            lines = [
                f"{name}\t0.9"
                for name in self.world.entity_colors
                if f" {normalize_text(name)} " in padded
            ]
            return "\n".join(lines)
        if prompt.startswith(_SUMMARIZE_MARKER):
            text = prompt.split("\n", 1)[1] if "\n" in prompt else ""
            return tpe.truncate_at_sentence(text, min(240, max_len))
        if prompt.startswith(_SEGMENTABLE_MARKER):
            term = _after(prompt, "Term: ") or ""
            default = term in self.world.entity_colors
            return "YES" if self.world.segmentable.get(term, default) else "NO"
        if prompt.startswith(_CO_ENTITY_MARKER):
            rest = prompt[len(_CO_ENTITY_MARKER):]
            term = rest.split(" in photographs", 1)[0]
            return " ".join(self.world.co_entities.get(term, []))
        if prompt.startswith(_QUESTION_MARKER):
            rest = prompt[len(_QUESTION_MARKER):]
            answer = rest.split("'", 1)[0]
            return self.world.questions.get(answer, "Which subject is featured in this coverage?")
        return ""


def _after(prompt: str, prefix: str) -> str | None:
    for line in prompt.splitlines():
        if line.startswith(prefix):
            return line[len(prefix):].strip()
    return None


class MockWebSearcher(_Recorded):
    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world

    def search(self, query: str, k: int) -> list[WebDocument]:
        self.calls.append((query, k))
        key = _match_key(self.world.documents, query)
        if key is None:
            return []
        return self.world.documents[key][:k]


class MockImageSearcher(_Recorded):
    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world

    def search(self, query: str, k: int) -> list[RasterImage]:
        self.calls.append((query, k))
        key = _match_key(self.world.image_search, query)
        if key is None:
            return []
        return [self.world.images[i] for i in self.world.image_search[key][:k]]


class MockTextEmbedder(_Recorded):
    """Entity mentions land on the entity basis dims; remaining tokens are
    hashed onto the tail dims so unrelated texts still differ."""

    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world
        self.d = world.dim

    def embed(self, text: str) -> FeatureVector:
        self.calls.append((text,))
        padded = f" {normalize_text(text)} "
        v = np.zeros(self.d)
        for name in self.world.entity_colors:
            occurrences = padded.count(f" {normalize_text(name)} ")
            if occurrences:
                v += occurrences * self.world.basis(name)
        n_entities = len(self.world.entity_colors)
        hash_dims = self.d - n_entities - _FALLBACK_DIM
        for token in normalize_tokens(text):
            digest = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:4], "big")
            v[n_entities + digest % hash_dims] += 0.3
        if not v.any():
            v[-1] = 1.0
        return FeatureVector(v)


class MockVisualEmbedder(_Recorded):
    """Reads the entity color mixture from the pixels and perturbs it by a
    deterministic per-image noise vector of norm ``world.noise``."""

    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world
        self.d = world.dim

    def embed(self, image: RasterImage) -> FeatureVector:
        self.calls.append((image.id,))
        v = np.zeros(self.d)
        for name, color in self.world.entity_colors.items():
            weight = int(np.all(image.pixels == np.array(color, dtype=np.uint8), axis=2).sum())
            if weight:
                v += weight * self.world.basis(name)
        if not v.any():
            v[-1] = 1.0
        v = v / np.linalg.norm(v)
        v = v + _noise_vector(image.pixels.tobytes(), self.d, self.world.noise)
        return FeatureVector(v)


class MockEntityExtractor(_Recorded):
    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world

    def extract(self, image: RasterImage) -> list[DetectedEntity]:
        self.calls.append((image.id,))
        return [
            DetectedEntity(label=r.label, box=r.box, confidence=0.9)
            for r in self.world.regions.get(image.id, [])
        ]


class MockObjectDetector(_Recorded):
    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world

    def detect(self, image: RasterImage) -> list[DetectedEntity]:
        self.calls.append((image.id,))
        return [
            DetectedEntity(label=None, box=r.box, confidence=0.8)
            for r in self.world.regions.get(image.id, [])
        ]


class MockPromptableMaskGenerator(_Recorded):
    """Box-exact: the mask is exactly the prompted box's interior, which
    makes correction outcomes analytically checkable."""

    def mask_from_box(self, image: RasterImage, box: BoundingBox) -> BinaryMask:
        self.calls.append((image.id, box.as_tuple()))
        h, w = image.shape
        if box.x_max > w or box.y_max > h:
            raise ValueError(f"box {box.as_tuple()} outside image {image.id!r}")
        return BinaryMask.from_box(image.shape, box)


class MockReferringSegmenter(_Recorded):
    """Naive stand-in: segments the in-image entity whose label occurs
    last in the prompt, or nothing when no label occurs."""

    def __init__(self, world: FixtureWorld) -> None:
        super().__init__()
        self.world = world

    def segment(self, image: RasterImage, prompt: str) -> BinaryMask:
        self.calls.append((image.id, prompt))
        padded = f" {normalize_text(prompt)} "
        winner: Region | None = None
        winner_pos = -1
        for region in self.world.regions.get(image.id, []):
            pos = padded.rfind(f" {normalize_text(region.label)} ")
            if pos > winner_pos:
                winner_pos = pos
                winner = region
        if winner is None:
            return BinaryMask.zeros(image.shape)
        return BinaryMask.from_box(image.shape, winner.box)


def make_mock_suite(world: FixtureWorld) -> PortSuite:
    """Deterministic implementations of every port over one fixture."""
    world.validate()
    return PortSuite(
        text_generator=MockTextGenerator(world),
        web_searcher=MockWebSearcher(world),
        image_searcher=MockImageSearcher(world),
        text_embedder=MockTextEmbedder(world),
        visual_embedder=MockVisualEmbedder(world),
        entity_extractor=MockEntityExtractor(world),
        object_detector=MockObjectDetector(world),
        mask_generator=MockPromptableMaskGenerator(),
        segmenter=MockReferringSegmenter(world),
    )


def total_port_calls(suite: PortSuite) -> int:
    """Sum of recorded invocations across the suite's mocks."""
    return sum(
        len(port.calls)
        for name in PortSuite.PORT_NAMES
        if hasattr(port := getattr(suite, name), "calls")
    )
