from __future__ import annotations

import json
from dataclasses import replace

import pytest

from conftest import ENGINE_KNOWN, build_engine_fixture, engine_trend_queries
from rose.config import EngineConfig, RoseConfig
from rose.engine import (
    KnownTermsClassifier,
    QueryPair,
    TrendQuery,
    VqaDraft,
    auto_label,
    build_dataset,
    collect_and_filter_images,
    dedup_news,
    enhance_query,
    filter_segmentable_queries,
    generate_question,
    load_trend_queries,
    write_dataset,
)
from rose.errors import ConfigurationError
from rose.irag import WebDocument, parse_timestamp
from rose.mocks import make_mock_suite
from rose.vpe import correct_segmentation, make_prototype

ENGINE_CONFIG = RoseConfig(engine=EngineConfig(known_terms=ENGINE_KNOWN))


class ScriptedLLM:
    def __init__(self, reply="", fail=False):
        self.reply, self.fail = reply, fail
        self.calls = []

    def generate(self, prompt, max_len):
        self.calls.append(prompt)
        if self.fail:
            raise RuntimeError("llm down")
        return self.reply


def trend(term: str, news=()) -> TrendQuery:
    return TrendQuery(term=term, category="misc", news=tuple(news))


def news_doc(url, when=None, snippet="", body=""):
    return WebDocument(url=url, published_at=parse_timestamp(when), snippet=snippet, body=body)


class TestFilterSegmentable:
    def test_abstract_term_dropped(self, engine_fixture):
        engine_fixture.segmentable["Google stock"] = False
        suite = make_mock_suite(engine_fixture)
        kept = filter_segmentable_queries([trend("Google stock"), trend("Tidal Rover")], suite.text_generator)
        assert [q.term for q in kept] == ["Tidal Rover"]

    def test_unparseable_output_fails_closed(self):
        kept = filter_segmentable_queries([trend("anything")], ScriptedLLM(reply="maybe?"))
        assert kept == []

    def test_llm_total_failure_gives_empty_output(self):
        kept = filter_segmentable_queries([trend("a"), trend("b")], ScriptedLLM(fail=True))
        assert kept == []


class TestEnhanceQuery:
    def test_co_entities_appended(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        pair = enhance_query("Tidal Rover", suite.text_generator)
        assert pair.original == "Tidal Rover"
        assert pair.enhanced == "Tidal Rover Dune Skiff"

    def test_echo_falls_back_to_suffix(self):
        pair = enhance_query("Solo Term", ScriptedLLM(reply="Solo Term"))
        assert pair.enhanced == "Solo Term with others"

    def test_empty_proposal_falls_back_to_suffix(self):
        pair = enhance_query("Solo Term", ScriptedLLM(reply=""))
        assert pair.enhanced == "Solo Term with others"

    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            QueryPair(original="same", enhanced="same")


class TestCollectAndFilter:
    def test_cluster_and_detection_filters(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        pair = QueryPair(original="Tidal Rover", enhanced="Tidal Rover Dune Skiff")
        singles, multi = collect_and_filter_images(
            pair, suite.image_searcher, suite.visual_embedder, suite.object_detector, k=8
        )
        assert len(singles) == 4  # the clustered reference set
        assert [m.id for m in multi] == ["multi-tidal"]

    def test_single_entity_images_filtered_out_of_multi(self, engine_fixture):
        # register the enhanced key onto a single-entity image: detector sees 1 box
        world = build_engine_fixture()
        world.add_image_search("Lone Gull others", [world.image_search["tidal rover"][0]])
        suite = make_mock_suite(world)
        pair = QueryPair(original="Lone Gull", enhanced="Lone Gull others")
        singles, multi = collect_and_filter_images(
            pair, suite.image_searcher, suite.visual_embedder, suite.object_detector, k=8
        )
        assert singles == [] and multi == []

    def test_detection_count_filter_keeps_two_of_three(self):
        from rose.core import BoundingBox
        from rose.mocks import Region

        world = build_engine_fixture()
        boxes = [BoundingBox(2 + 10 * i, 2, 10 + 10 * i, 10) for i in range(3)]
        entities = ("Tidal Rover", "Dune Skiff", "Pine Heron")
        for count in (1, 2, 3):
            world.add_image(
                f"crowd-{count}", 20, 40,
                [Region(entities[i], f"thing {i}", boxes[i]) for i in range(count)],
            )
        world.add_image_search("Tidal Rover crowd", ["crowd-1", "crowd-2", "crowd-3"])
        suite = make_mock_suite(world)
        pair = QueryPair(original="Tidal Rover", enhanced="Tidal Rover crowd")
        _, multi = collect_and_filter_images(
            pair, suite.image_searcher, suite.visual_embedder, suite.object_detector, k=8
        )
        assert [m.id for m in multi] == ["crowd-2", "crowd-3"]

    def test_empty_search_gives_empty_lists(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        pair = QueryPair(original="Unknown Thing", enhanced="Unknown Thing with others")
        singles, multi = collect_and_filter_images(
            pair, suite.image_searcher, suite.visual_embedder, suite.object_detector, k=8
        )
        assert singles == [] and multi == []


class TestDedupNews:
    def test_single_window_keeps_earliest(self):
        items = [news_doc(f"https://n/{i}", f"2025-04-0{i + 1}T00:00:00+00:00", snippet=f"day {i}") for i in range(3)]
        kept = dedup_news(items, window_days=3, sim_threshold=0.8)
        assert [d.url for d in kept] == ["https://n/0"]

    def test_disjoint_windows_both_kept(self):
        items = [
            news_doc("https://n/0", "2025-04-01T00:00:00+00:00", snippet="opening day parade"),
            news_doc("https://n/5", "2025-04-06T00:00:00+00:00", snippet="completely different story"),
        ]
        kept = dedup_news(items, window_days=3, sim_threshold=0.8)
        assert [d.url for d in kept] == ["https://n/0", "https://n/5"]

    def test_identical_snippets_across_windows_deduped(self):
        items = [
            news_doc("https://n/0", "2025-04-01T00:00:00+00:00", snippet="same words here"),
            news_doc("https://n/5", "2025-04-06T00:00:00+00:00", snippet="same words here"),
        ]
        kept = dedup_news(items, window_days=3, sim_threshold=0.8)
        assert [d.url for d in kept] == ["https://n/0"]  # Jaccard 1.0 >= 0.8

    def test_untimestamped_sort_last_and_skip_windowing(self):
        items = [
            news_doc("https://n/none", None, snippet="completely unrelated words"),
            news_doc("https://n/0", "2025-04-01T00:00:00+00:00", snippet="opening day parade"),
        ]
        kept = dedup_news(items, window_days=3, sim_threshold=0.8)
        assert [d.url for d in kept] == ["https://n/0", "https://n/none"]

    def test_output_subset_preserving_order_property(self):
        items = [
            news_doc(f"https://n/{i}", f"2025-04-{(i % 9) + 1:02d}T0{i % 10}:00:00+00:00", snippet=f"words {i % 4}")
            for i in range(12)
        ]
        kept = dedup_news(items, window_days=2, sim_threshold=0.9)
        urls = [d.url for d in kept]
        assert len(set(urls)) == len(urls) and set(urls) <= {d.url for d in items}
        stamps = [d.published_at for d in kept]
        assert stamps == sorted(stamps)


class TestGenerateQuestion:
    def test_clean_question_emitted(self):
        doc = news_doc("https://n/0", "2025-04-01T00:00:00+00:00", body="launch coverage")
        draft = generate_question(doc, "Tidal Rover", ScriptedLLM(reply="Which vehicle won the shoreline trial?"))
        assert isinstance(draft, VqaDraft)
        assert draft.answer == "Tidal Rover"

    def test_persistent_leak_dropped(self):
        doc = news_doc("https://n/0", body="coverage")
        draft = generate_question(doc, "SU7", ScriptedLLM(reply="Is the SU7 the fastest?"))
        assert draft is None

    def test_normalized_leak_detected(self):
        doc = news_doc("https://n/0", body="coverage")
        draft = generate_question(doc, "SU7", ScriptedLLM(reply="Is the su-7 the fastest?"))
        assert draft is None

    def test_draft_invariant_enforced(self):
        with pytest.raises(ValueError):
            VqaDraft(question="About the su-7 model?", answer="SU7", source_doc=news_doc("https://n"))


class TestAutoLabel:
    def test_matches_correction_procedure_exactly(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        refs = [engine_fixture.images[i] for i in engine_fixture.image_search["tidal rover"]]
        scene = engine_fixture.images["multi-tidal"]
        threshold = 0.5
        labeled = auto_label(scene, refs, suite.object_detector, suite.visual_embedder,
                             suite.mask_generator, threshold)
        proto = make_prototype(refs, suite.visual_embedder)
        corrected = correct_segmentation(scene, proto, suite.object_detector, suite.visual_embedder,
                                         suite.mask_generator, threshold)
        assert labeled is not None and corrected.corrected
        assert labeled.same_as(corrected.mask)

    def test_gate_failure_returns_none(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        refs = [engine_fixture.images[i] for i in engine_fixture.image_search["tidal rover"]]
        scene = engine_fixture.images["multi-tidal"]
        assert auto_label(scene, refs, suite.object_detector, suite.visual_embedder,
                          suite.mask_generator, accept_threshold=0.9999999) is None

    def test_requires_references(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        with pytest.raises(ValueError):
            auto_label(engine_fixture.images["multi-tidal"], [], suite.object_detector,
                       suite.visual_embedder, suite.mask_generator, 0.5)


class TestBuildDataset:
    def test_two_clean_queries_emit_two_samples(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        samples, report = build_dataset(engine_trend_queries(), suite, ENGINE_CONFIG)
        assert len(samples) == 2
        assert report.samples_emitted == 2 and report.total_drops == 0
        assert report.reconciles()
        by_answer = {s.answer: s for s in samples}
        assert by_answer["Tidal Rover"].entity_type == "novel"
        assert by_answer["Luma Sparrow"].entity_type == "emerging"

    def test_emitted_samples_satisfy_invariants(self, engine_fixture):
        from rose.textnorm import contains_squashed

        suite = make_mock_suite(engine_fixture)
        samples, _ = build_dataset(engine_trend_queries(), suite, ENGINE_CONFIG)
        for sample in samples:
            assert not contains_squashed(sample.question, sample.answer)
            assert sample.mask.shape == sample.image.shape
            assert not sample.mask.is_empty

    def test_query_without_images_dropped_with_reason(self, engine_fixture):
        engine_fixture.segmentable["Ghost Item"] = True
        suite = make_mock_suite(engine_fixture)
        queries = engine_trend_queries() + [trend("Ghost Item", news=[news_doc("https://n/g", "2025-04-01T00:00:00+00:00")])]
        samples, report = build_dataset(queries, suite, ENGINE_CONFIG)
        assert len(samples) == 2
        assert report.query_drops == {"no_images": 1}
        assert report.reconciles()

    def test_query_without_news_dropped_with_reason(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        queries = [replace(engine_trend_queries()[0], news=())]
        samples, report = build_dataset(queries, suite, ENGINE_CONFIG)
        assert samples == [] and report.query_drops == {"no_news": 1}
        assert report.reconciles()

    def test_leaking_question_counted_at_draft_level(self, engine_fixture):
        engine_fixture.questions["Tidal Rover"] = "Why did the Tidal Rover stall?"
        suite = make_mock_suite(engine_fixture)
        samples, report = build_dataset(engine_trend_queries()[:1], suite, ENGINE_CONFIG)
        assert samples == []
        assert report.draft_drops == {"question_invalid": 1}
        assert report.reconciles()

    def test_worker_count_does_not_change_output(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        serial, serial_report = build_dataset(engine_trend_queries(), suite, ENGINE_CONFIG)
        threaded_config = replace(
            ENGINE_CONFIG, runtime=replace(ENGINE_CONFIG.runtime, workers=4)
        )
        threaded, threaded_report = build_dataset(engine_trend_queries(), suite, threaded_config)
        assert [s.id for s in serial] == [s.id for s in threaded]
        assert all(a.mask.same_as(b.mask) for a, b in zip(serial, threaded))
        assert serial_report.to_dict() == threaded_report.to_dict()

    def test_below_threshold_masks_counted_at_pair_level(self, engine_fixture):
        suite = make_mock_suite(engine_fixture)
        strict = RoseConfig(
            engine=EngineConfig(known_terms=ENGINE_KNOWN),
            vpe=replace(RoseConfig().vpe, accept_threshold=0.9999999),
        )
        samples, report = build_dataset(engine_trend_queries(), suite, strict)
        assert samples == []
        assert report.pair_drops == {"no_confident_mask": 2}
        assert report.reconciles()


class TestDatasetFiles:
    def test_write_then_load_roundtrip(self, engine_fixture, tmp_path):
        from rose.evaluation import load_dataset

        suite = make_mock_suite(engine_fixture)
        samples, report = build_dataset(engine_trend_queries(), suite, ENGINE_CONFIG)
        path = write_dataset(samples, tmp_path)
        loaded = load_dataset(path)
        assert len(loaded) == report.samples_emitted
        assert [s.id for s in loaded] == [s.id for s in samples]
        assert loaded[0].mask.same_as(samples[0].mask)

    def test_trends_file_roundtrip(self, tmp_path):
        lines = [
            json.dumps({
                "term": "Tidal Rover", "category": "products", "related_terms": ["rover"],
                "news": [{"url": "https://n/0", "published_at": "2025-04-01T00:00:00+00:00", "snippet": "s"}],
            })
        ]
        path = tmp_path / "trends.jsonl"
        path.write_text("\n".join(lines) + "\n")
        queries = load_trend_queries(path)
        assert queries[0].term == "Tidal Rover"
        assert queries[0].news[0].url == "https://n/0"

    def test_malformed_trends_line_rejected_with_line_number(self, tmp_path):
        path = tmp_path / "trends.jsonl"
        path.write_text('{"term": "ok", "news": []}\nnot json\n')
        with pytest.raises(ConfigurationError, match=":2"):
            load_trend_queries(path)


class TestKnownTermsClassifier:
    def test_classification(self):
        classifier = KnownTermsClassifier(["Known Thing"])
        assert classifier.classify("known thing") == "emerging"
        assert classifier.classify("Brand New Thing") == "novel"
