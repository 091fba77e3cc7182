"""Two-tier gate deciding whether a query needs internet retrieval.

Tier one is a cheap ordered ruleset (first match wins); only queries the
rules leave ambiguous reach the LLM tier.  Every failure path fails open
to retrieval: a wrong skip is unrecoverable, a wrong retrieval only costs
latency.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .ports import TextGeneratorPort

logger = logging.getLogger(__name__)

RETRIEVE = "retrieve"
SKIP = "skip"
AMBIGUOUS = "ambiguous"

DEFAULT_CUTOFF_YEAR = 2023

SEMANTIC_GATE_TEMPLATE = (
    "Decide whether answering the question below requires retrieving "
    "current information from the internet, given a knowledge cutoff "
    "year of {cutoff}. Reply with exactly one word: RETRIEVE or SKIP.\n"
    "Question: {query}"
)

_GATE_MAX_LEN = 32

_TEMPORAL_PATTERN = r"\b(current|latest|newest|today|recent|recently)\b|\bthis\s+(week|month|year)\b"

_COLOR_TOKENS = {
    "red", "green", "blue", "yellow", "black", "white", "orange",
    "purple", "pink", "brown", "gray", "grey",
}
_SPATIAL_TOKENS = {
    "left", "right", "top", "bottom", "front", "behind", "above",
    "below", "beside", "near", "nearest", "next", "middle", "corner",
    "leftmost", "rightmost",
}


class Rule:
    """One ordered gate rule: a named predicate with a fixed verdict."""

    def __init__(self, name: str, verdict: str) -> None:
        if verdict not in (RETRIEVE, SKIP):
            raise ConfigurationError(f"rule {name!r} has invalid verdict {verdict!r}")
        self.name = name
        self.verdict = verdict

    def matches(self, query: str) -> bool:
        raise NotImplementedError


class RegexRule(Rule):
    """Case-insensitive regex predicate; patterns are validated at load
    time so a malformed rule can never fail at query time."""

    def __init__(self, name: str, verdict: str, pattern: str) -> None:
        super().__init__(name, verdict)
        try:
            self._compiled = re.compile(pattern, re.IGNORECASE)
        except re.error as exc:
            raise ConfigurationError(f"rule {name!r} has malformed pattern {pattern!r}: {exc}") from exc

    def matches(self, query: str) -> bool:
        return bool(self._compiled.search(query))


class YearBeyondCutoffRule(Rule):
    """Fires when the query names a year strictly after the cutoff year."""

    def __init__(self, cutoff_year: int) -> None:
        super().__init__("year_beyond_cutoff", RETRIEVE)
        self.cutoff_year = cutoff_year

    def matches(self, query: str) -> bool:
        return any(int(year) > self.cutoff_year for year in re.findall(r"\b(\d{4})\b", query))


class SpatialAttributeRule(Rule):
    """Skips purely visual queries: a color or spatial cue with no
    capitalized token anywhere (a capitalized token may be a name, so the
    rule conservatively stands aside and leaves the query ambiguous)."""

    def __init__(self) -> None:
        super().__init__("spatial_attribute", SKIP)

    def matches(self, query: str) -> bool:
        tokens = re.findall(r"[A-Za-z]+", query)
        has_cue = any(t.lower() in _COLOR_TOKENS or t.lower() in _SPATIAL_TOKENS for t in tokens)
        has_capitalized = any(t[0].isupper() for t in tokens)
        return has_cue and not has_capitalized


def default_ruleset(cutoff_year: int = DEFAULT_CUTOFF_YEAR) -> list[Rule]:
    """The embedded default rules, evaluated in order."""
    return [
        RegexRule("temporal_cue", RETRIEVE, _TEMPORAL_PATTERN),
        YearBeyondCutoffRule(cutoff_year),
        SpatialAttributeRule(),
    ]


def parse_ruleset(text: str, source: str = "<ruleset>") -> list[Rule]:
    """Parse ``verdict<TAB>pattern`` lines into regex rules.

    Blank lines and ``#`` comments are ignored.  Any malformed line or
    pattern raises ConfigurationError immediately.
    """
    rules: list[Rule] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        verdict, sep, pattern = line.partition("\t")
        if not sep or not pattern.strip():
            raise ConfigurationError(f"{source}:{line_no}: expected 'verdict<TAB>pattern'")
        rules.append(RegexRule(f"{source}:{line_no}", verdict.strip().lower(), pattern.strip()))
    if not rules:
        raise ConfigurationError(f"{source}: ruleset is empty")
    return rules


def load_ruleset(path: str | Path) -> list[Rule]:
    return parse_ruleset(Path(path).read_text(encoding="utf-8"), source=str(path))


@dataclass(frozen=True)
class RetrievalDecision:
    """Outcome of the gate; matched_rule is set exactly when the rule
    tier decided."""

    retrieve: bool
    tier: str  # "rule" | "semantic"
    matched_rule: str | None = None

    def __post_init__(self) -> None:
        if (self.matched_rule is not None) != (self.tier == "rule"):
            raise ValueError("matched_rule must be present iff tier == 'rule'")


def _first_match(query: str, ruleset: list[Rule]) -> Rule | None:
    for rule in ruleset:
        if rule.matches(query):
            return rule
    return None


def rule_screen(query: str, ruleset: list[Rule]) -> str:
    """First matching rule's verdict, or AMBIGUOUS when nothing matches."""
    if not ruleset:
        raise ConfigurationError("rule_screen requires a non-empty ruleset")
    rule = _first_match(query, ruleset)
    return rule.verdict if rule is not None else AMBIGUOUS


def semantic_classify(query: str, llm: TextGeneratorPort, cutoff_year: int) -> str:
    """LLM binary classification; defaults to RETRIEVE on anything
    unparseable or on LLM failure."""
    prompt = SEMANTIC_GATE_TEMPLATE.format(cutoff=cutoff_year, query=query)
    try:
        output = llm.generate(prompt, _GATE_MAX_LEN)
    except Exception:
        logger.warning("semantic gate LLM failed for %r; failing open to retrieve", query)
        return RETRIEVE
    match = re.search(r"\b(retrieve|skip)\b", output, re.IGNORECASE)
    if match is None:
        return RETRIEVE
    return match.group(1).lower()


def decide(
    query: str,
    ruleset: list[Rule],
    llm: TextGeneratorPort,
    cutoff_year: int = DEFAULT_CUTOFF_YEAR,
) -> RetrievalDecision:
    """Rule tier first; the LLM is consulted only on an ambiguous screen.

    Never raises: any tier failure yields retrieve=True.
    """
    try:
        rule = _first_match(query, ruleset)
    except Exception:
        logger.warning("rule tier failed for %r; failing open to retrieve", query)
        return RetrievalDecision(retrieve=True, tier="semantic")
    if rule is not None:
        return RetrievalDecision(retrieve=rule.verdict == RETRIEVE, tier="rule", matched_rule=rule.name)
    verdict = semantic_classify(query, llm, cutoff_year)
    return RetrievalDecision(retrieve=verdict == RETRIEVE, tier="semantic")
