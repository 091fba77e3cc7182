"""Content-addressed response cache for port calls.

Layout on disk::

    <cache_dir>/<port_name>/<first-2-hex>/<digest>.bin   response bytes
    <cache_dir>/<port_name>/<first-2-hex>/<digest>.meta  canonical request + response digest

The digest is sha256 over the port name and the canonicalized request,
so identical requests are served the stored bytes without invoking the
backing port, and a whole pipeline rerun over a warm cache performs zero
port invocations.  Writes are atomic (write-then-rename), so concurrent
writers of the same key converge to one valid entry.

Request canonicalization: sorted ``key=value`` pairs, UTF-8, LF newlines.
Binary payloads (image pixels) enter the request as their sha256 digest,
which keeps keys platform-stable.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .core import (
    BinaryMask,
    BoundingBox,
    DetectedEntity,
    FeatureVector,
    RasterImage,
    rle_decode,
    rle_encode,
)
from .errors import CacheIntegrityError
from .ports import PortSuite

ENV_CACHE_DIR = "ROSE_CACHE_DIR"


def canonical_request(**fields: object) -> bytes:
    """Serialize request fields as sorted key=value lines (UTF-8, LF)."""
    lines = [f"{key}={fields[key]}" for key in sorted(fields)]
    return "\n".join(lines).encode("utf-8")


def image_digest(image: RasterImage) -> str:
    h, w = image.shape
    digest = hashlib.sha256(image.pixels.tobytes()).hexdigest()
    return f"{h}x{w}:{digest}"


@dataclass(frozen=True)
class CacheKey:
    """sha256 digest of (port name, canonical request bytes)."""

    digest: str

    @classmethod
    def for_request(cls, port_name: str, request: bytes) -> "CacheKey":
        hasher = hashlib.sha256()
        hasher.update(port_name.encode("utf-8"))
        hasher.update(b"\x00")
        hasher.update(request)
        return cls(hasher.hexdigest())


class ResponseCache:
    """Filesystem-backed memoization of port responses."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def _paths(self, port_name: str, key: CacheKey) -> tuple[Path, Path]:
        shard = self.root / port_name / key.digest[:2]
        return shard / f"{key.digest}.bin", shard / f"{key.digest}.meta"

    def cached_call(self, port_name: str, request: bytes, inner: Callable[[], bytes]) -> bytes:
        """Return the stored response for this request, invoking ``inner``
        only on a miss.

        Raises CacheIntegrityError when a stored entry does not match the
        request that addressed it or its recorded response digest.
        """
        key = CacheKey.for_request(port_name, request)
        bin_path, meta_path = self._paths(port_name, key)
        if bin_path.exists() and meta_path.exists():
            response = bin_path.read_bytes()
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            stored_request = base64.b64decode(meta["request_b64"])
            if stored_request != request:
                raise CacheIntegrityError(f"cache entry {key.digest} holds a different request")
            if hashlib.sha256(response).hexdigest() != meta["response_sha256"]:
                raise CacheIntegrityError(f"cache entry {key.digest} response bytes corrupted")
            return response
        response = inner()
        meta = {
            "port": port_name,
            "request_b64": base64.b64encode(request).decode("ascii"),
            "response_sha256": hashlib.sha256(response).hexdigest(),
        }
        bin_path.parent.mkdir(parents=True, exist_ok=True)
        self._atomic_write(bin_path, response)
        self._atomic_write(meta_path, json.dumps(meta, sort_keys=True).encode("utf-8"))
        return response

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise

    def stats(self) -> dict[str, object]:
        """Entry and byte counts, overall and per port."""
        per_port: dict[str, int] = {}
        total_bytes = 0
        if self.root.exists():
            for bin_path in self.root.rglob("*.bin"):
                port = bin_path.relative_to(self.root).parts[0]
                per_port[port] = per_port.get(port, 0) + 1
                total_bytes += bin_path.stat().st_size
        return {
            "entries": sum(per_port.values()),
            "bytes": total_bytes,
            "per_port": dict(sorted(per_port.items())),
        }

    def clear(self) -> int:
        """Remove every entry; returns the number of entries removed."""
        removed = 0
        if not self.root.exists():
            return 0
        for bin_path in sorted(self.root.rglob("*.bin")):
            meta = bin_path.with_suffix(".meta")
            bin_path.unlink(missing_ok=True)
            meta.unlink(missing_ok=True)
            removed += 1
        return removed


def resolve_cache_dir(config_value: str | None, flag_value: str | None = None) -> str | None:
    """Precedence: CLI flag, then ROSE_CACHE_DIR, then the config value."""
    if flag_value:
        return flag_value
    env = os.environ.get(ENV_CACHE_DIR)
    if env:
        return env
    return config_value or None


# --- response codecs -------------------------------------------------------

def _doc_to_dict(doc) -> dict:
    return {
        "url": doc.url,
        "published_at": doc.published_at.isoformat() if doc.published_at else None,
        "snippet": doc.snippet,
        "body": doc.body,
    }


def _doc_from_dict(raw: dict):
    from .irag import WebDocument, parse_timestamp

    return WebDocument(
        url=raw["url"],
        published_at=parse_timestamp(raw["published_at"]),
        snippet=raw["snippet"],
        body=raw["body"],
    )


def _image_to_dict(image: RasterImage) -> dict:
    h, w = image.shape
    return {
        "id": image.id,
        "source_uri": image.source_uri,
        "shape": [h, w],
        "pixels_b64": base64.b64encode(image.pixels.tobytes()).decode("ascii"),
    }


def _image_from_dict(raw: dict) -> RasterImage:
    import numpy as np

    h, w = raw["shape"]
    pixels = np.frombuffer(base64.b64decode(raw["pixels_b64"]), dtype=np.uint8).reshape(h, w, 3)
    return RasterImage(pixels=pixels.copy(), id=raw["id"], source_uri=raw["source_uri"])


def _entity_to_dict(entity: DetectedEntity) -> dict:
    return {
        "label": entity.label,
        "box": list(entity.box.as_tuple()),
        "confidence": entity.confidence,
    }


def _entity_from_dict(raw: dict) -> DetectedEntity:
    return DetectedEntity(
        label=raw["label"],
        box=BoundingBox(*raw["box"]),
        confidence=raw["confidence"],
    )


def _dump(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def _load(data: bytes):
    return json.loads(data.decode("utf-8"))


# --- caching adapters ------------------------------------------------------

class _CachedTextGenerator:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    def generate(self, prompt: str, max_len: int) -> str:
        request = canonical_request(max_len=max_len, prompt=prompt)
        response = self._cache.cached_call(
            "text_generator", request, lambda: self._inner.generate(prompt, max_len).encode("utf-8")
        )
        return response.decode("utf-8")


class _CachedWebSearcher:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    def search(self, query: str, k: int):
        request = canonical_request(k=k, query=query)
        response = self._cache.cached_call(
            "web_searcher", request, lambda: _dump([_doc_to_dict(d) for d in self._inner.search(query, k)])
        )
        return [_doc_from_dict(raw) for raw in _load(response)]


class _CachedImageSearcher:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    def search(self, query: str, k: int) -> list[RasterImage]:
        request = canonical_request(k=k, query=query)
        response = self._cache.cached_call(
            "image_searcher", request, lambda: _dump([_image_to_dict(i) for i in self._inner.search(query, k)])
        )
        return [_image_from_dict(raw) for raw in _load(response)]


class _CachedTextEmbedder:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    @property
    def d(self) -> int:
        return self._inner.d

    def embed(self, text: str) -> FeatureVector:
        request = canonical_request(text=text)
        response = self._cache.cached_call(
            "text_embedder", request, lambda: _dump(self._inner.embed(text).values.tolist())
        )
        return FeatureVector(_load(response))


class _CachedVisualEmbedder:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    @property
    def d(self) -> int:
        return self._inner.d

    def embed(self, image: RasterImage) -> FeatureVector:
        request = canonical_request(image=image_digest(image))
        response = self._cache.cached_call(
            "visual_embedder", request, lambda: _dump(self._inner.embed(image).values.tolist())
        )
        return FeatureVector(_load(response))


class _CachedEntityExtractor:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    def extract(self, image: RasterImage) -> list[DetectedEntity]:
        request = canonical_request(image=image_digest(image))
        response = self._cache.cached_call(
            "entity_extractor", request, lambda: _dump([_entity_to_dict(e) for e in self._inner.extract(image)])
        )
        return [_entity_from_dict(raw) for raw in _load(response)]


class _CachedObjectDetector:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    def detect(self, image: RasterImage) -> list[DetectedEntity]:
        request = canonical_request(image=image_digest(image))
        response = self._cache.cached_call(
            "object_detector", request, lambda: _dump([_entity_to_dict(e) for e in self._inner.detect(image)])
        )
        return [_entity_from_dict(raw) for raw in _load(response)]


class _CachedMaskGenerator:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    def mask_from_box(self, image: RasterImage, box: BoundingBox) -> BinaryMask:
        request = canonical_request(box=",".join(map(str, box.as_tuple())), image=image_digest(image))
        response = self._cache.cached_call(
            "mask_generator", request, lambda: rle_encode(self._inner.mask_from_box(image, box)).encode("utf-8")
        )
        return rle_decode(response.decode("utf-8"))


class _CachedSegmenter:
    def __init__(self, inner, cache: ResponseCache) -> None:
        self._inner, self._cache = inner, cache

    def segment(self, image: RasterImage, prompt: str) -> BinaryMask:
        request = canonical_request(image=image_digest(image), prompt=prompt)
        response = self._cache.cached_call(
            "segmenter", request, lambda: rle_encode(self._inner.segment(image, prompt)).encode("utf-8")
        )
        return rle_decode(response.decode("utf-8"))


def wrap_ports_with_cache(suite: PortSuite, cache: ResponseCache) -> PortSuite:
    """Wrap every port in a caching adapter sharing one ResponseCache."""
    return PortSuite(
        text_generator=_CachedTextGenerator(suite.text_generator, cache),
        web_searcher=_CachedWebSearcher(suite.web_searcher, cache),
        image_searcher=_CachedImageSearcher(suite.image_searcher, cache),
        text_embedder=_CachedTextEmbedder(suite.text_embedder, cache),
        visual_embedder=_CachedVisualEmbedder(suite.visual_embedder, cache),
        entity_extractor=_CachedEntityExtractor(suite.entity_extractor, cache),
        object_detector=_CachedObjectDetector(suite.object_detector, cache),
        mask_generator=_CachedMaskGenerator(suite.mask_generator, cache),
        segmenter=_CachedSegmenter(suite.segmenter, cache),
    )


class _DelayedPort:
    """Adds a fixed delay before every method call (simple rate limiting)."""

    def __init__(self, inner, delay_s: float) -> None:
        self._inner = inner
        self._delay_s = delay_s

    def __getattr__(self, name: str):
        attr = getattr(self._inner, name)
        if not callable(attr):
            return attr

        def delayed(*args, **kwargs):
            time.sleep(self._delay_s)
            return attr(*args, **kwargs)

        return delayed


def apply_port_delay(suite: PortSuite, delay_s: float) -> PortSuite:
    """Apply a fixed per-port delay to every port in the suite."""
    if delay_s <= 0:
        return suite
    return PortSuite(**{name: _DelayedPort(getattr(suite, name), delay_s) for name in PortSuite.PORT_NAMES})
