#!/usr/bin/env python3
"""Generate a self-contained demo workspace for the CLI.

Writes a mock fixture world, a config file pointing at it, an input
image, and a trends file into ./demo (or the directory given as the
first argument), then prints ready-to-run commands.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

from PIL import Image

from rose.config import default_config_text
from rose.core import BoundingBox
from rose.irag import WebDocument, parse_timestamp
from rose.mocks import FixtureWorld, Region


def build_world() -> FixtureWorld:
    world = FixtureWorld()
    world.add_entity("Veyron Quartz")
    world.add_entity("Kite Lumen")
    world.add_entity("Macaw Nine")

    world.add_image(
        "street-scene", 96, 128,
        [Region("Veyron Quartz", "Veyron Quartz", BoundingBox(8, 8, 48, 56)),
         Region("Kite Lumen", "exhibit 7", BoundingBox(72, 16, 112, 60)),
         Region("Macaw Nine", "Macaw Nine", BoundingBox(52, 64, 92, 88))],
    )
    world.add_documents("quartz tour", [
        WebDocument(
            url="https://news.example/quartz-tour",
            published_at=parse_timestamp("2025-04-02T09:00:00+00:00"),
            snippet="Veyron Quartz opens the tour.",
            body="Veyron Quartz opened the spring tour today. Veyron Quartz will appear in three more cities.",
        ),
    ])
    world.add_documents("lumen debut", [
        WebDocument(
            url="https://news.example/lumen-debut",
            published_at=parse_timestamp("2025-04-03T10:00:00+00:00"),
            snippet="Kite Lumen debuts.",
            body="The Kite Lumen drew crowds at the expo. Kite Lumen demos run nightly.",
        ),
    ])
    world.add_reference_images("Veyron Quartz")
    world.add_reference_images("Kite Lumen")
    world.segmentable = {"Veyron Quartz": True, "Kite Lumen": True}
    world.co_entities = {"Kite Lumen": ["Macaw Nine"]}
    world.questions = {"Kite Lumen": "Which device headlines the current lumen debut coverage?"}
    world.add_image_search("Kite Lumen Macaw Nine", ["street-scene"])
    world.qa_answers = {
        "Who is the current headliner of the quartz tour?": "Veyron Quartz",
        "Which device leads the current lumen debut coverage?": "Kite Lumen",
    }
    return world


def main() -> int:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo")
    out_dir.mkdir(parents=True, exist_ok=True)
    world = build_world()

    fixture_path = out_dir / "fixture.json"
    fixture_path.write_text(world.to_json(), encoding="utf-8")

    config_path = out_dir / "rose.ini"
    config_path.write_text(
        default_config_text(fixture_path=str(fixture_path), cache_dir=str(out_dir / "cache")),
        encoding="utf-8",
    )

    image_path = out_dir / "street-scene.png"
    Image.fromarray(world.images["street-scene"].pixels).save(image_path)

    trends_path = out_dir / "trends.jsonl"
    trends_path.write_text(
        json.dumps({
            "term": "Kite Lumen",
            "category": "technology",
            "related_terms": ["expo"],
            "news": [{
                "url": "https://news.example/lumen-debut",
                "published_at": "2025-04-03T10:00:00+00:00",
                "snippet": "Kite Lumen debuts.",
            }],
        }) + "\n",
        encoding="utf-8",
    )

    print(f"demo workspace written to {out_dir}/")
    print("try:")
    print(f"  rose run --config {config_path} --image {image_path} "
          f"--query 'Which device leads the current lumen debut coverage?' --out {out_dir}/run-out")
    print(f"  rose build --config {config_path} --trends {trends_path} --out {out_dir}/dataset")
    print(f"  rose eval --config {config_path} --dataset {out_dir}/dataset/nest.jsonl --out {out_dir}/eval-out")
    print(f"  rose cache stats --config {config_path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
