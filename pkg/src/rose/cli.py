"""Operator entry points: run the pipeline, evaluate a system, build a
dataset, and manage the response cache.

Exit codes: 0 success, 1 validation failure (bad config, dataset, or
inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cache import ResponseCache, resolve_cache_dir
from .config import ABLATIONS, RoseConfig, apply_ablation, build_ports, load_config
from .core import RasterImage, rle_encode
from .engine import build_dataset, load_trend_queries, write_dataset
from .errors import ConfigurationError, DatasetValidationError, RoseError, SegmenterError
from .evaluation import evaluate_system, load_dataset, render_report_table, run_two_stage_baseline, write_report_files
from .pipeline import UserRequest, run_sample

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_CONFIG_KEY_REFERENCE = """\
config keys:
  [websense]  cutoff_year, ruleset_path
  [irag]      chunk_size, chunk_overlap, top_k, search_fanout,
              query_rewrites, reference_images, match_threshold
  [tpe]       template ({query}/{answer}/{background} placeholders),
              background_max_chars
  [vpe]       cluster_delta, verify_threshold, accept_threshold
  [backends]  provider, fixture_path, cache_dir, port_delay
  [runtime]   workers, enable_websense, enable_irag, enable_tpe, enable_vpe
  [engine]    image_fanout, news_window_days, snippet_sim_threshold,
              known_terms, known_terms_path
environment:
  ROSE_CACHE_DIR overrides [backends] cache_dir; --cache-dir overrides both.
"""


def _load_image(path: str) -> RasterImage:
    from PIL import Image

    file_path = Path(path)
    if not file_path.is_file():
        raise ConfigurationError(f"image not found: {file_path}")
    with Image.open(file_path) as handle:
        pixels = np.asarray(handle.convert("RGB"), dtype=np.uint8)
    return RasterImage(pixels=pixels, id=file_path.stem, source_uri=str(file_path))


def _prepare(args: argparse.Namespace) -> tuple[RoseConfig, object]:
    config = load_config(args.config)
    if getattr(args, "ablation", None):
        config = apply_ablation(config, args.ablation)
    ports = build_ports(config, cache_dir_override=getattr(args, "cache_dir", None))
    return config, ports


def cmd_run(args: argparse.Namespace) -> int:
    config, ports = _prepare(args)
    request = UserRequest(image=_load_image(args.image), query=args.query)
    try:
        result = run_sample(request, ports, config)
    except SegmenterError as exc:
        logger.error("pipeline failed: %s", exc)
        return EXIT_RUNTIME
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "mask.rle").write_text(rle_encode(result.mask) + "\n", encoding="utf-8")
    (out_dir / "answer.txt").write_text((result.answer or "") + "\n", encoding="utf-8")
    (out_dir / "trace.ndjson").write_text("\n".join(result.trace_lines()) + "\n", encoding="utf-8")
    print(f"mask pixels: {result.mask.count}")
    print(f"answer: {result.answer or '(none)'}")
    print(f"outputs written to {out_dir}")
    return EXIT_OK


def _system_for(config: RoseConfig, ports) -> object:
    from .pipeline import load_gate_ruleset

    ruleset = load_gate_ruleset(config) if config.runtime.enable_websense else None

    def system(request: UserRequest):
        return run_sample(request, ports, config, ruleset)

    return system


def cmd_eval(args: argparse.Namespace) -> int:
    config, ports = _prepare(args)
    dataset = load_dataset(args.dataset)
    out_dir = Path(args.out)
    if args.workers:
        from dataclasses import replace

        config = replace(config, runtime=replace(config.runtime, workers=args.workers))
    if args.two_stage:
        method, rag = "two-stage", True
        report = run_two_stage_baseline(dataset, ports.text_generator, ports.segmenter)
    else:
        method = f"rose-{args.ablation}" if args.ablation else "rose"
        rag = config.runtime.enable_irag
        report = evaluate_system(dataset, _system_for(config, ports), config)
    write_report_files(report, out_dir, method, rag)
    print(render_report_table([(method, rag, report)]), end="")
    return EXIT_OK


def cmd_build(args: argparse.Namespace) -> int:
    config, ports = _prepare(args)
    queries = load_trend_queries(args.trends)
    if args.dry_run:
        print(f"trends file OK: {len(queries)} queries; nothing written (--dry-run)")
        return EXIT_OK
    if args.workers:
        from dataclasses import replace

        config = replace(config, runtime=replace(config.runtime, workers=args.workers))
    samples, report = build_dataset(queries, ports, config)
    out_dir = Path(args.out)
    dataset_path = write_dataset(samples, out_dir)
    (out_dir / "build_report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(f"emitted {report.samples_emitted} samples to {dataset_path}")
    print(f"drops: {report.total_drops} (see build_report.json)")
    return EXIT_OK


def cmd_cache(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    cache_dir = resolve_cache_dir(config.backends.cache_dir, args.cache_dir)
    if not cache_dir:
        raise ConfigurationError("no cache directory configured (set [backends] cache_dir, ROSE_CACHE_DIR, or --cache-dir)")
    cache = ResponseCache(cache_dir)
    if args.cache_command == "clear":
        removed = cache.clear()
        print(f"removed {removed} cache entries from {cache_dir}")
    else:
        stats = cache.stats()
        print(f"cache dir: {cache_dir}")
        print(f"entries: {stats['entries']}  bytes: {stats['bytes']}")
        for port, count in stats["per_port"].items():
            print(f"  {port}: {count}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rose",
        description="Retrieval-enhanced segmentation pipeline, dataset engine, and evaluation harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, ablation: bool = True) -> None:
        p.add_argument("--config", required=True, help="path to the INI config file")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--cache-dir", default=None, help="override the cache directory (and ROSE_CACHE_DIR)")
        if ablation:
            p.add_argument("--ablation", choices=ABLATIONS, default=None,
                           help="stage switches preset (gate bypassed in every preset)")

    run_p = sub.add_parser(
        "run", help="run the pipeline on one image + query",
        epilog=_CONFIG_KEY_REFERENCE, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common(run_p)
    run_p.add_argument("--image", required=True, help="input image file")
    run_p.add_argument("--query", required=True, help="the user query")
    run_p.set_defaults(func=cmd_run)

    eval_p = sub.add_parser(
        "eval", help="evaluate a system on a dataset file",
        epilog=_CONFIG_KEY_REFERENCE, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common(eval_p)
    eval_p.add_argument("--dataset", required=True, help="dataset file (line-delimited records)")
    eval_p.add_argument("--two-stage", action="store_true", help="run the plain answer-then-segment baseline")
    eval_p.add_argument("--workers", type=int, default=0, help="worker threads (0 = use config)")
    eval_p.set_defaults(func=cmd_eval)

    build_p = sub.add_parser(
        "build", help="build a dataset from a trends file",
        epilog=_CONFIG_KEY_REFERENCE, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    common(build_p, ablation=False)
    build_p.add_argument("--trends", required=True, help="line-delimited trends ingest file")
    build_p.add_argument("--dry-run", action="store_true", help="validate inputs only; write nothing")
    build_p.add_argument("--workers", type=int, default=0, help="worker threads (0 = use config)")
    build_p.set_defaults(func=cmd_build)

    cache_p = sub.add_parser(
        "cache", help="manage the response cache",
        epilog=_CONFIG_KEY_REFERENCE, formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    cache_p.add_argument("cache_command", choices=("clear", "stats"))
    cache_p.add_argument("--config", required=True, help="path to the INI config file")
    cache_p.add_argument("--cache-dir", default=None, help="override the cache directory")
    cache_p.set_defaults(func=cmd_cache)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, DatasetValidationError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except RoseError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # anything unexpected is a runtime failure
        logger.exception("unexpected failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
