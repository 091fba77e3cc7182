"""Shared fixtures: a 20-sample pipeline world and a small engine world.

The pipeline world is engineered so each stage has designed work:

* group E (8, emerging): the image entity carries an informative label
  equal to the answer, so any prompt naming the answer segments it.
* group T (4, novel): the entity label is an alias that only appears in
  the answer's introduction document, so only the background-enhanced
  prompt names it; references exist, so visual correction also works.
* group TO (2, novel): like T but with no reference images, so visual
  correction is unavailable and only the enhanced prompt works.
* group V (6, novel): the entity label is generic and no document names
  it, so only visual correction works; half the queries name a
  distractor to force a wrong (not just empty) initial mask.

With the deliberately weak mock segmenter the expected mean IoU is
baseline 0.0 < irag 0.4 < irag_tpe 0.7 < irag_vpe 0.9 < full 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import pytest

from rose.core import BinaryMask, BoundingBox
from rose.engine import NestSample, write_dataset
from rose.irag import WebDocument, parse_timestamp
from rose.mocks import FixtureWorld, Region, make_mock_suite
from rose.pipeline import UserRequest

GT_BOX = BoundingBox(4, 4, 24, 28)
DISTRACTOR_BOX = BoundingBox(36, 8, 56, 30)
IMAGE_H, IMAGE_W = 48, 64

DISTRACTORS = ("Macaw Nine", "Gilded Tram", "Onyx Parrot")

_E_NAMES = (
    "Veyron Quartz", "Ilsa Moreau", "Dax Petrov", "Runa Alvarez",
    "Kofi Ayensu", "Mira Castellan", "Tomas Lindqvist", "Zara Okonkwo",
)
_T_NAMES = ("Kite Lumen", "Borealis Strider", "Quanta Loom", "Helio Crest")
_T_ALIASES = ("crimson drone", "glass totem", "woven beacon", "amber kiosk")
_TO_NAMES = ("Opal Ridgeback", "Fenwick Orb")
_TO_ALIASES = ("brass lantern", "cobalt statue")
_V_NAMES = (
    "Zorblax Prime", "Nimbus Arrow", "Cinder Falcon",
    "Twilight Moth", "Aster Golem", "Vortex Lily",
)


@dataclass(frozen=True)
class SampleSpec:
    key: str
    group: str  # E | T | TO | V
    query: str
    answer: str
    image_id: str
    entity_type: str  # emerging | novel


@dataclass
class PipelineFixture:
    world: FixtureWorld
    specs: list[SampleSpec]

    def suite(self):
        """A fresh mock suite (fresh call logs) over the shared world."""
        return make_mock_suite(self.world)

    def request(self, spec: SampleSpec) -> UserRequest:
        return UserRequest(image=self.world.images[spec.image_id], query=spec.query)

    def requests(self) -> list[UserRequest]:
        return [self.request(spec) for spec in self.specs]

    def gt_mask(self, spec: SampleSpec) -> BinaryMask:
        return BinaryMask.from_box((IMAGE_H, IMAGE_W), GT_BOX)

    def nest_samples(self) -> list[NestSample]:
        return [
            NestSample(
                id=spec.key,
                image=self.world.images[spec.image_id],
                question=spec.query,
                answer=spec.answer,
                mask=self.gt_mask(spec),
                category="fixture",
                entity_type=spec.entity_type,
                collected_at=f"2025-04-{index + 1:02d}T09:00:00+00:00",
                source_url=f"https://news.example/{spec.key}",
            )
            for index, spec in enumerate(self.specs)
        ]


def _news_docs(key: str, name: str, day: int) -> list[WebDocument]:
    body = (
        f"{name} drew attention at the venue today. Observers praised "
        f"{name} for the performance. The event continues tomorrow."
    )
    return [
        WebDocument(
            url=f"https://news.example/{key}/1",
            published_at=parse_timestamp(f"2025-04-{day:02d}T09:00:00+00:00"),
            snippet=f"{name} update.",
            body=body,
        ),
        WebDocument(
            url=f"https://news.example/{key}/2",
            published_at=parse_timestamp(f"2025-04-{day:02d}T18:00:00+00:00"),
            snippet=f"More on {name}.",
            body=f"Crowds gathered as {name} appeared once more.",
        ),
    ]


def build_pipeline_fixture() -> PipelineFixture:
    world = FixtureWorld()
    specs: list[SampleSpec] = []
    for name in _E_NAMES + _T_NAMES + _TO_NAMES + _V_NAMES + DISTRACTORS:
        world.add_entity(name)

    def add_scene(index: int, name: str, label: str) -> str:
        image_id = f"scene-{index:02d}"
        distractor = DISTRACTORS[index % len(DISTRACTORS)]
        world.add_image(
            image_id, IMAGE_H, IMAGE_W,
            [Region(name, label, GT_BOX), Region(distractor, distractor, DISTRACTOR_BOX)],
        )
        return image_id

    index = 0
    for name in _E_NAMES:
        key = f"s{index:02d}"
        image_id = add_scene(index, name, label=name)
        world.add_documents(f"story{index}", _news_docs(key, name, day=index + 1))
        world.add_reference_images(name)
        specs.append(SampleSpec(
            key=key, group="E",
            query=f"Who is the current headliner of story{index}?",
            answer=name, image_id=image_id, entity_type="emerging",
        ))
        index += 1

    for name, alias in tuple(zip(_T_NAMES, _T_ALIASES)) + tuple(zip(_TO_NAMES, _TO_ALIASES)):
        group = "T" if name in _T_NAMES else "TO"
        key = f"s{index:02d}"
        image_id = add_scene(index, name, label=alias)
        world.add_documents(f"story{index}", _news_docs(key, name, day=index + 1))
        world.add_documents(
            f"{name} introduction",
            [WebDocument(
                url=f"https://wiki.example/{key}",
                body=f"The {name} is a {alias} presented at evening shows. It toured several cities this spring.",
            )],
        )
        if group == "T":
            world.add_reference_images(name)
        specs.append(SampleSpec(
            key=key, group=group,
            query=f"Which device leads the current story{index} coverage?",
            answer=name, image_id=image_id, entity_type="novel",
        ))
        index += 1

    for offset, name in enumerate(_V_NAMES):
        key = f"s{index:02d}"
        image_id = add_scene(index, name, label=f"exhibit {index}")
        world.add_documents(f"story{index}", _news_docs(key, name, day=index + 1))
        world.add_reference_images(name)
        if offset < 3:
            query = f"Who is the current focus of story{index}?"
        else:
            distractor = DISTRACTORS[index % len(DISTRACTORS)]
            query = f"What stands beside the {distractor} in current story{index} shots?"
        specs.append(SampleSpec(
            key=key, group="V", query=query,
            answer=name, image_id=image_id, entity_type="novel",
        ))
        index += 1

    world.qa_answers = {spec.query: spec.answer for spec in specs}
    return PipelineFixture(world=world, specs=specs)


@pytest.fixture(scope="session")
def pipeline_fixture() -> PipelineFixture:
    return build_pipeline_fixture()


@pytest.fixture(scope="session")
def nest_dataset_path(pipeline_fixture, tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("nest-fixture")
    return write_dataset(pipeline_fixture.nest_samples(), out_dir)


# --- engine fixture ---------------------------------------------------------

ENGINE_TERMS = ("Tidal Rover", "Luma Sparrow")
ENGINE_CO = {"Tidal Rover": ["Dune Skiff"], "Luma Sparrow": ["Pine Heron"]}
ENGINE_KNOWN = ("Luma Sparrow",)  # -> emerging; the other term -> novel


def build_engine_fixture() -> FixtureWorld:
    world = FixtureWorld()
    for term, co in ENGINE_CO.items():
        world.add_entity(term)
        world.add_entity(co[0])
    for term, co in ENGINE_CO.items():
        world.co_entities[term] = list(co)
        world.segmentable[term] = True
        world.questions[term] = f"Which subject headlined the {term.split()[1].lower()} trial?"
        world.add_reference_images(term, count=4)
        multi_id = f"multi-{term.split()[0].lower()}"
        world.add_image(
            multi_id, 40, 56,
            [Region(term, "object a", BoundingBox(2, 2, 20, 28)),
             Region(co[0], "object b", BoundingBox(30, 4, 48, 30))],
        )
        world.add_image_search(f"{term} {co[0]}", [multi_id])
    return world


def engine_trend_queries() -> list:
    from rose.engine import TrendQuery

    queries = []
    for day, term in enumerate(ENGINE_TERMS, start=1):
        queries.append(TrendQuery(
            term=term,
            category="products",
            news=(WebDocument(
                url=f"https://news.example/{term.split()[0].lower()}",
                published_at=parse_timestamp(f"2025-03-{20 + day:02d}T08:00:00+00:00"),
                snippet=f"A quiet launch report {day}.",
                body=f"A quiet launch drew enthusiasts on day {day}.",
            ),),
        ))
    return queries


@pytest.fixture()
def engine_fixture() -> FixtureWorld:
    return build_engine_fixture()


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if "test_acceptance" in report.nodeid and report.when == "call":
        verdict = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::")[-1]
        print(f"\n[acceptance] {verdict} {name}", flush=True)
