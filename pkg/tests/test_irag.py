from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rose.core import BoundingBox, DetectedEntity, FeatureVector
from rose.errors import RetrievalUnavailableError
from rose.irag import (
    AnswerCandidate,
    AnswerSummary,
    Chunk,
    VectorStore,
    WebDocument,
    build_vector_store,
    fetch_reference_images,
    generate_search_queries,
    map_reduce_answer,
    resolve_answer,
    retrieve_top_k,
    split_chunks,
)


class ScriptedLLM:
    """Maps chunk text (or any prompt substring) to scripted output."""

    def __init__(self, default="", by_substring=None, fail=False):
        self.default = default
        self.by_substring = by_substring or {}
        self.fail = fail
        self.calls = []

    def generate(self, prompt: str, max_len: int) -> str:
        self.calls.append(prompt)
        if self.fail:
            raise RuntimeError("llm down")
        for key, reply in self.by_substring.items():
            if key in prompt:
                return reply
        return self.default


class ScriptedEmbedder:
    def __init__(self, d=4, fail_on=()):
        self.d = d
        self.fail_on = fail_on

    def embed(self, text: str) -> FeatureVector:
        if any(marker in text for marker in self.fail_on):
            raise RuntimeError("embedder down")
        rng = np.random.default_rng(abs(hash(text)) % (2**32))
        return FeatureVector(rng.standard_normal(self.d))


def entity(label: str) -> DetectedEntity:
    return DetectedEntity(label=label, box=BoundingBox(0, 0, 2, 2), confidence=0.9)


def doc(body: str = "", snippet: str = "", url: str = "https://x.example/d") -> WebDocument:
    return WebDocument(url=url, snippet=snippet, body=body)


class TestGenerateSearchQueries:
    def test_includes_original_plus_rewrites(self):
        llm = ScriptedLLM(default="alpha beta\ngamma delta")
        queries = generate_search_queries("the question", llm, n=3)
        assert queries == ["the question", "alpha beta", "gamma delta"]

    def test_llm_failure_degrades_to_original(self):
        queries = generate_search_queries("the question", ScriptedLLM(fail=True), n=3)
        assert queries == ["the question"]

    def test_duplicates_removed(self):
        llm = ScriptedLLM(default="same\nsame\nother")
        queries = generate_search_queries("same", llm, n=4)
        assert queries == ["same", "other"]

    def test_capped_at_n(self):
        llm = ScriptedLLM(default="a\nb\nc\nd")
        assert len(generate_search_queries("q", llm, n=2)) == 2


class TestSplitChunks:
    def test_exact_fit_single_chunk(self):
        chunks = split_chunks(doc(body="0123456789"), chunk_size=10, overlap=0)
        assert [c.text for c in chunks] == ["0123456789"]

    def test_overlap_windows_from_index_arithmetic(self):
        chunks = split_chunks(doc(body="0123456789"), chunk_size=6, overlap=2)
        assert [c.text for c in chunks] == ["012345", "456789"]
        assert [c.index_in_doc for c in chunks] == [0, 1]

    def test_snippet_fallback(self):
        assert [c.text for c in split_chunks(doc(snippet="abc"), 10, 0)] == ["abc"]

    def test_empty_both_gives_nothing(self):
        assert split_chunks(doc(), 10, 0) == []

    def test_bad_sizes_rejected(self):
        with pytest.raises(ValueError):
            split_chunks(doc(body="x"), chunk_size=4, overlap=4)

    @given(st.text(min_size=1, max_size=200), st.integers(2, 40), st.data())
    @settings(max_examples=80)
    def test_reconstruction_property(self, body, chunk_size, data):
        overlap = data.draw(st.integers(0, chunk_size - 1))
        chunks = split_chunks(doc(body=body), chunk_size, overlap)
        rebuilt = chunks[0].text + "".join(c.text[overlap:] for c in chunks[1:])
        assert rebuilt == body
        assert all(1 <= len(c.text) <= chunk_size for c in chunks)


class TestVectorStore:
    def test_store_size_and_dimension(self):
        chunks = [Chunk(f"chunk {i}", "u", i) for i in range(3)]
        store = build_vector_store(chunks, ScriptedEmbedder(d=4))
        assert len(store) == 3 and store.d == 4

    def test_deterministic_build(self):
        chunks = [Chunk(f"chunk {i}", "u", i) for i in range(3)]
        a = build_vector_store(chunks, ScriptedEmbedder(d=4))
        b = build_vector_store(chunks, ScriptedEmbedder(d=4))
        for (va, ca), (vb, cb) in zip(a.entries, b.entries):
            assert np.array_equal(va.values, vb.values) and ca == cb

    def test_poisoned_chunk_skipped_with_warning(self, caplog):
        chunks = [Chunk("good one", "u", 0), Chunk("poison pill", "u", 1), Chunk("good two", "u", 2)]
        with caplog.at_level("WARNING"):
            store = build_vector_store(chunks, ScriptedEmbedder(d=4, fail_on=("poison",)))
        assert len(store) == 2
        assert any("skipping" in message for message in caplog.messages)

    def test_all_failed_raises(self):
        with pytest.raises(RetrievalUnavailableError):
            build_vector_store([Chunk("poison", "u", 0)], ScriptedEmbedder(fail_on=("poison",)))

    def test_vectors_are_normalized(self):
        store = build_vector_store([Chunk("c", "u", 0)], ScriptedEmbedder(d=4))
        assert np.linalg.norm(store.entries[0][0].values) == pytest.approx(1.0, abs=1e-9)


def brute_force_top_k(entries, query_vec: FeatureVector, k: int):
    """Independent oracle: full sort with the explicit tie rule."""
    def cosine(a: FeatureVector, b: FeatureVector) -> float:
        sim = float(np.dot(a.values, b.values)) / (
            float(np.linalg.norm(a.values)) * float(np.linalg.norm(b.values))
        )
        return max(-1.0, min(1.0, sim))

    sims = [cosine(query_vec, vec) for vec, _ in entries]
    order = sorted(range(len(entries)), key=lambda i: (-sims[i], i))
    return [entries[i][1] for i in order[:k]]


class TestRetrieveTopK:
    def _random_store(self, rng, n, d=8, duplicates=0):
        entries = []
        for i in range(n):
            v = rng.standard_normal(d)
            entries.append((FeatureVector(v / np.linalg.norm(v)), Chunk(f"c{i}", "u", i)))
        for j in range(duplicates):
            source_vec, _ = entries[j % n]
            entries.append((FeatureVector(source_vec.values.copy()), Chunk(f"dup{j}", "u", n + j)))
        return VectorStore(entries, d=d)

    def test_saturation_returns_all_sorted(self):
        rng = np.random.default_rng(0)
        store = self._random_store(rng, 4)
        query = FeatureVector(rng.standard_normal(8))
        assert retrieve_top_k(store, query, k=10) == brute_force_top_k(store.entries, query, 10)

    def test_self_similarity_ranks_first(self):
        rng = np.random.default_rng(1)
        store = self._random_store(rng, 5)
        query_vec, expected = store.entries[3]
        assert retrieve_top_k(store, FeatureVector(query_vec.values.copy()), k=1) == [expected]

    def test_matches_oracle_with_ties(self):
        rng = np.random.default_rng(2)
        store = self._random_store(rng, 20, duplicates=6)
        query = FeatureVector(rng.standard_normal(8))
        assert retrieve_top_k(store, query, k=5) == brute_force_top_k(store.entries, query, 5)

    def test_empty_store(self):
        assert retrieve_top_k(VectorStore([], d=4), FeatureVector(np.ones(4)), k=3) == []

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        store = self._random_store(rng, 2)
        with pytest.raises(ValueError):
            retrieve_top_k(store, FeatureVector(np.ones(3)), k=1)


class TestMapReduce:
    def test_noisy_or_combination(self):
        chunks = [Chunk("first passage", "https://u/1", 0), Chunk("second passage", "https://u/2", 0)]
        llm = ScriptedLLM(default="Entity A\t0.6")
        summary = map_reduce_answer(chunks, "q", llm)
        assert len(summary.candidates) == 1
        top = summary.top()
        assert top.text == "Entity A"
        assert top.confidence == pytest.approx(1 - 0.4 * 0.4, abs=1e-12)  # 0.84
        assert top.supporting_urls == ("https://u/1", "https://u/2")

    def test_no_chunks_gives_empty_summary(self):
        assert map_reduce_answer([], "q", ScriptedLLM()).empty

    def test_sorted_by_confidence(self):
        llm = ScriptedLLM(default="A\t0.9\nB\t0.5")
        summary = map_reduce_answer([Chunk("c", "u", 0)], "q", llm)
        assert [c.text for c in summary.candidates] == ["A", "B"]

    def test_unparseable_chunk_contributes_nothing(self):
        chunks = [Chunk("good passage", "u1", 0), Chunk("bad passage", "u2", 0)]
        llm = ScriptedLLM(by_substring={"good passage": "A\t0.5", "bad passage": "no tabs here"})
        summary = map_reduce_answer(chunks, "q", llm)
        assert len(summary.candidates) == 1
        assert summary.top().confidence == pytest.approx(0.5)

    def test_out_of_range_confidence_ignored(self):
        llm = ScriptedLLM(default="A\t1.5\nB\t0.5")
        summary = map_reduce_answer([Chunk("c", "u", 0)], "q", llm)
        assert [c.text for c in summary.candidates] == ["B"]

    def test_permutation_invariance(self):
        chunks = [Chunk(f"passage {i}", f"https://u/{i}", 0) for i in range(5)]
        llm = ScriptedLLM(by_substring={
            "passage 0": "Alpha\t0.3\nBeta\t0.2",
            "passage 1": "beta\t0.6",
            "passage 2": "Alpha\t0.1",
            "passage 3": "Gamma\t0.9",
            "passage 4": "",
        })
        forward = map_reduce_answer(chunks, "q", llm)
        backward = map_reduce_answer(list(reversed(chunks)), "q", llm)
        rotated = map_reduce_answer(chunks[2:] + chunks[:2], "q", llm)
        assert forward == backward == rotated

    def test_within_chunk_duplicates_take_max(self):
        llm = ScriptedLLM(default="A\t0.2\nA\t0.6")
        summary = map_reduce_answer([Chunk("c", "u", 0)], "q", llm)
        assert summary.top().confidence == pytest.approx(0.6)


class TestResolveAnswer:
    def test_exact_normalized_match(self):
        summary = AnswerSummary((AnswerCandidate("Xiaomi SU7", 0.8),))
        resolved = resolve_answer(summary, [entity("xiaomi su7")])
        assert resolved.resolution == "entity_match"
        assert resolved.matched_entity.label == "xiaomi su7"

    def test_scan_order_first_matching_candidate_wins(self):
        # Messi ranks higher but only Neymar is in the image.
        summary = AnswerSummary((AnswerCandidate("Messi", 0.9), AnswerCandidate("Neymar", 0.7)))
        resolved = resolve_answer(summary, [entity("Neymar")])
        assert resolved.text == "Neymar"
        assert resolved.resolution == "entity_match"

    def test_no_entities_falls_back_to_top(self):
        summary = AnswerSummary((AnswerCandidate("A", 0.9),))
        resolved = resolve_answer(summary, [])
        assert resolved.text == "A"
        assert resolved.resolution == "confidence_fallback"
        assert resolved.matched_entity is None

    def test_empty_summary_rejected(self):
        with pytest.raises(ValueError):
            resolve_answer(AnswerSummary(), [entity("x")])

    def test_unlabeled_entities_skipped(self):
        summary = AnswerSummary((AnswerCandidate("A", 0.9),))
        unlabeled = DetectedEntity(label=None, box=BoundingBox(0, 0, 1, 1), confidence=0.5)
        assert resolve_answer(summary, [unlabeled]).resolution == "confidence_fallback"


class FlakyImageSearcher:
    def __init__(self, images=(), fail=False):
        self.images, self.fail = list(images), fail

    def search(self, query, k):
        if self.fail:
            raise RuntimeError("search down")
        return self.images[:k]


class TestFetchReferenceImages:
    def _resolved(self):
        return resolve_answer(AnswerSummary((AnswerCandidate("A", 0.9),)), [])

    def test_truncates_to_k(self, pipeline_fixture):
        images = [pipeline_fixture.world.images[i] for i in pipeline_fixture.world.image_search["veyron quartz"]]
        out = fetch_reference_images(self._resolved(), FlakyImageSearcher(images), k=2)
        assert [i.id for i in out] == [images[0].id, images[1].id]

    def test_failure_degrades_to_empty(self):
        assert fetch_reference_images(self._resolved(), FlakyImageSearcher(fail=True), k=3) == []

    def test_k_larger_than_available(self, pipeline_fixture):
        images = [pipeline_fixture.world.images[i] for i in pipeline_fixture.world.image_search["veyron quartz"]]
        assert len(fetch_reference_images(self._resolved(), FlakyImageSearcher(images), k=99)) == len(images)
