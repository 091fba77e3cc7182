"""Configuration model: one INI-style file drives every workflow.

Sections and keys (defaults shown by ``default_config_text``):

* ``[websense]`` cutoff_year, ruleset_path
* ``[irag]`` chunk_size, chunk_overlap, top_k, search_fanout,
  query_rewrites, reference_images, match_threshold
* ``[tpe]`` template (placeholders {query}, {answer}, {background}),
  background_max_chars
* ``[vpe]`` cluster_delta, verify_threshold, accept_threshold
* ``[backends]`` provider, fixture_path, cache_dir, port_delay
* ``[runtime]`` workers, enable_websense, enable_irag, enable_tpe,
  enable_vpe
* ``[engine]`` image_fanout, news_window_days, snippet_sim_threshold,
  known_terms, known_terms_path

The ``ROSE_CACHE_DIR`` environment variable overrides ``cache_dir``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigurationError

ABLATIONS = ("baseline", "irag", "irag_tpe", "irag_vpe", "full")


@dataclass(frozen=True)
class WebSenseConfig:
    cutoff_year: int = 2023
    ruleset_path: str = ""


@dataclass(frozen=True)
class IragConfig:
    chunk_size: int = 1200
    chunk_overlap: int = 200
    top_k: int = 8
    search_fanout: int = 5  # documents fetched per search query
    query_rewrites: int = 2  # rewritten queries issued besides the original
    reference_images: int = 5
    match_threshold: float = 1.0


@dataclass(frozen=True)
class TpeConfig:
    template: str = ""  # empty -> built-in template
    background_max_chars: int = 600


@dataclass(frozen=True)
class VpeConfig:
    cluster_delta: float = 0.3
    verify_threshold: float = 0.5
    accept_threshold: float = 0.5


@dataclass(frozen=True)
class BackendsConfig:
    provider: str = "mock"
    fixture_path: str = ""
    cache_dir: str = ""
    port_delay: float = 0.0


@dataclass(frozen=True)
class RuntimeConfig:
    workers: int = 1
    enable_websense: bool = True
    enable_irag: bool = True
    enable_tpe: bool = True
    enable_vpe: bool = True


@dataclass(frozen=True)
class EngineConfig:
    image_fanout: int = 8
    news_window_days: int = 3
    snippet_sim_threshold: float = 0.8
    known_terms: tuple[str, ...] = ()
    known_terms_path: str = ""


@dataclass(frozen=True)
class RoseConfig:
    websense: WebSenseConfig = field(default_factory=WebSenseConfig)
    irag: IragConfig = field(default_factory=IragConfig)
    tpe: TpeConfig = field(default_factory=TpeConfig)
    vpe: VpeConfig = field(default_factory=VpeConfig)
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)


_SECTIONS = {
    "websense": WebSenseConfig,
    "irag": IragConfig,
    "tpe": TpeConfig,
    "vpe": VpeConfig,
    "backends": BackendsConfig,
    "runtime": RuntimeConfig,
    "engine": EngineConfig,
}


def _coerce(section: str, key: str, raw: str, target_type: type):
    try:
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        if target_type is tuple or target_type == tuple[str, ...]:
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        return raw
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key}: cannot parse {raw!r} as {target_type.__name__}") from exc


def parse_config(text: str, source: str = "<config>") -> RoseConfig:
    """Parse an INI document; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    sections: dict[str, object] = {}
    for section_name in parser.sections():
        if section_name not in _SECTIONS:
            raise ConfigurationError(f"{source}: unknown section [{section_name}]")
        cls = _SECTIONS[section_name]
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser.items(section_name):
            if key not in fields:
                raise ConfigurationError(f"{source}: unknown key {key!r} in [{section_name}]")
            hints = {"known_terms": tuple}
            target = hints.get(key, type(getattr(cls(), key)))
            values[key] = _coerce(section_name, key, raw, target)
        sections[section_name] = cls(**values)
    return RoseConfig(**sections)  # type: ignore[arg-type]


def load_config(path: str | Path) -> RoseConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))


def apply_ablation(config: RoseConfig, ablation: str) -> RoseConfig:
    """Map an ablation name onto the stage switches.

    Every ablation runs with the websense gate bypassed (retrieval forced
    for retrieval-bearing settings) so the settings isolate what each
    stage contributes; ``baseline`` disables retrieval entirely.
    """
    if ablation not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    switches = {
        "baseline": (False, False, False),
        "irag": (True, False, False),
        "irag_tpe": (True, True, False),
        "irag_vpe": (True, False, True),
        "full": (True, True, True),
    }[ablation]
    runtime = replace(
        config.runtime,
        enable_websense=False,
        enable_irag=switches[0],
        enable_tpe=switches[1],
        enable_vpe=switches[2],
    )
    return replace(config, runtime=runtime)


def default_config_text(fixture_path: str = "fixture.json", cache_dir: str = "") -> str:
    """A complete config document with every key at its default."""
    return f"""\
[websense]
cutoff_year = 2023
ruleset_path =

[irag]
chunk_size = 1200
chunk_overlap = 200
top_k = 8
search_fanout = 5
query_rewrites = 2
reference_images = 5
match_threshold = 1.0

[tpe]
template =
background_max_chars = 600

[vpe]
cluster_delta = 0.3
verify_threshold = 0.5
accept_threshold = 0.5

[backends]
provider = mock
fixture_path = {fixture_path}
cache_dir = {cache_dir}
port_delay = 0.0

[runtime]
workers = 1
enable_websense = true
enable_irag = true
enable_tpe = true
enable_vpe = true

[engine]
image_fanout = 8
news_window_days = 3
snippet_sim_threshold = 0.8
known_terms =
known_terms_path =
"""


def build_ports(config: RoseConfig, cache_dir_override: str | None = None):
    """Construct the port suite the config describes.

    Only the ``mock`` provider is built in; live service adapters plug in
    through the same PortSuite shape.  When a cache directory is
    configured (or overridden by flag/environment) every port is wrapped
    in the content-addressed cache.
    """
    from .cache import ResponseCache, apply_port_delay, resolve_cache_dir, wrap_ports_with_cache
    from .mocks import FixtureWorld, make_mock_suite

    if config.backends.provider != "mock":
        raise ConfigurationError(
            f"unknown backends provider {config.backends.provider!r}; only 'mock' ships with this package"
        )
    if not config.backends.fixture_path:
        raise ConfigurationError("[backends] fixture_path is required for the mock provider")
    world = FixtureWorld.from_file(config.backends.fixture_path)
    suite = make_mock_suite(world)
    suite = apply_port_delay(suite, config.backends.port_delay)
    cache_dir = resolve_cache_dir(config.backends.cache_dir, cache_dir_override)
    if cache_dir:
        suite = wrap_ports_with_cache(suite, ResponseCache(cache_dir))
    return suite
