"""Geometric and embedding primitives shared by every pipeline stage.

All values here are immutable and all operations are pure functions, so
they can be called from any number of concurrent workers.

Masks serialize to a column-major run-length string so datasets stay
plain text and diffable.  Grammar::

    "<H>x<W>:<c0>,<c1>,..."

where the non-negative decimal counts alternate zero-run / one-run over
the column-major (Fortran-order) flattening, always starting with the
zero-run (a leading ``0`` count when the first pixel is set).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MalformedAnnotationError


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box, inclusive-min / exclusive-max."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if not (0 <= self.x_min < self.x_max and 0 <= self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class RasterImage:
    """An H x W x 3 uint8 color raster with an opaque identifier."""

    pixels: np.ndarray
    id: str
    source_uri: str | None = None

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image pixels must be H x W x 3 uint8, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int]:
        """(H, W) of the raster."""
        return (int(self.pixels.shape[0]), int(self.pixels.shape[1]))


@dataclass(frozen=True)
class BinaryMask:
    """An H x W boolean grid; shape must match its paired image exactly."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2 or bits.shape[0] < 1 or bits.shape[1] < 1:
            raise ValueError(f"mask bits must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.bits.shape[0]), int(self.bits.shape[1]))

    @property
    def count(self) -> int:
        """Number of set pixels."""
        return int(self.bits.sum())

    @property
    def is_empty(self) -> bool:
        return not bool(self.bits.any())

    def same_as(self, other: "BinaryMask") -> bool:
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def tight_box(self) -> BoundingBox | None:
        """Smallest box covering all set pixels, or None for an empty mask."""
        ys, xs = np.nonzero(self.bits)
        if ys.size == 0:
            return None
        return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "BinaryMask":
        return cls(np.zeros(shape, dtype=bool))

    @classmethod
    def from_box(cls, shape: tuple[int, int], box: BoundingBox) -> "BinaryMask":
        if box.y_max > shape[0] or box.x_max > shape[1]:
            raise ValueError(f"box {box.as_tuple()} exceeds mask shape {shape}")
        bits = np.zeros(shape, dtype=bool)
        bits[box.y_min : box.y_max, box.x_min : box.x_max] = True
        return cls(bits)


@dataclass(frozen=True)
class FeatureVector:
    """A d-dimensional real embedding; d is carried at runtime so embedders
    of different dimensionality can coexist."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError(f"feature vector must be 1-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("feature vector contains non-finite entries")
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class DetectedEntity:
    """One detector/extractor proposal. Confidence is only comparable
    within a single detector run."""

    label: str | None  # extractors always label; plain detectors may not
    box: BoundingBox
    confidence: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def cosine_similarity(a: FeatureVector, b: FeatureVector) -> float:
    """Cosine of the angle between two non-zero vectors, in [-1, 1]."""
    if a.d != b.d:
        raise ValueError(f"dimension mismatch: {a.d} vs {b.d}")
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for zero vectors")
    sim = float(np.dot(a.values, b.values)) / (na * nb)
    return max(-1.0, min(1.0, sim))


def normalize(a: FeatureVector) -> FeatureVector:
    """Scale to unit Euclidean norm, preserving direction."""
    norm = float(np.linalg.norm(a.values))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return FeatureVector(a.values / norm)


def mask_iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """Intersection-over-union of two same-shape masks.

    Defined as 1.0 when both masks are empty, so a correctly absent
    prediction is not penalized.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    inter = int(np.logical_and(pred.bits, gt.bits).sum())
    union = int(np.logical_or(pred.bits, gt.bits).sum())
    if union == 0:
        return 1.0
    return inter / union


def rle_encode(mask: BinaryMask) -> str:
    """Encode a mask with the column-major run-length grammar above."""
    h, w = mask.shape
    flat = mask.bits.flatten(order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return f"{h}x{w}:" + ",".join(str(c) for c in counts)


def rle_decode(rle: str, shape: tuple[int, int] | None = None) -> BinaryMask:
    """Exact inverse of :func:`rle_encode`.

    ``shape``, when given, must agree with the embedded header; the sum of
    the counts must equal H*W.
    """
    try:
        header, _, body = rle.partition(":")
        h_str, _, w_str = header.partition("x")
        h, w = int(h_str), int(w_str)
        counts = [int(c) for c in body.split(",")] if body else []
    except ValueError as exc:
        raise MalformedAnnotationError(f"unparseable RLE string: {rle!r}") from exc
    if h < 1 or w < 1:
        raise MalformedAnnotationError(f"bad RLE shape header {h}x{w}")
    if shape is not None and (h, w) != tuple(shape):
        raise MalformedAnnotationError(f"RLE header {h}x{w} does not match expected shape {tuple(shape)}")
    if any(c < 0 for c in counts):
        raise MalformedAnnotationError("negative run count")
    total = sum(counts)
    if total != h * w:
        raise MalformedAnnotationError(f"run counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in counts:
        if value:
            flat[pos : pos + count] = True
        pos += count
        value = not value
    return BinaryMask(flat.reshape((h, w), order="F"))


def crop_box(image: RasterImage, box: BoundingBox) -> RasterImage:
    """Copy the box's pixel region into a new image."""
    h, w = image.shape
    if box.x_max > w or box.y_max > h:
        raise ValueError(f"box {box.as_tuple()} exceeds image bounds {(h, w)}")
    pixels = image.pixels[box.y_min : box.y_max, box.x_min : box.x_max].copy()
    crop_id = f"{image.id}:crop:{box.x_min},{box.y_min},{box.x_max},{box.y_max}"
    return RasterImage(pixels=pixels, id=crop_id, source_uri=image.source_uri)
