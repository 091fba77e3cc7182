"""Textual prompt enhancement: answer + background -> segmenter prompt.

The directive sentence of every enhanced prompt is byte-identical to the
plain two-stage directive instantiated with the same answer, so prompt
comparisons between the enhanced and plain paths differ only in the
added context.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .errors import ConfigurationError
from .irag import ResolvedAnswer
from .ports import TextGeneratorPort, WebSearcherPort

logger = logging.getLogger(__name__)

# The plain directive used on its own by the two-stage baseline.
SEGMENT_DIRECTIVE_TEMPLATE = "Please segment {answer} in this image."

DEFAULT_TEMPLATE = "The answer to '{query}' is {answer}. Background: {background}. " + SEGMENT_DIRECTIVE_TEMPLATE
DEFAULT_TEMPLATE_NO_BACKGROUND = "The answer to '{query}' is {answer}. " + SEGMENT_DIRECTIVE_TEMPLATE

SUMMARIZE_TEMPLATE = (
    "Summarize the following introduction in at most {max_chars} characters, "
    "keeping what the subject is and what it looks like.\n{text}"
)

DEFAULT_BACKGROUND_MAX_CHARS = 600

_SENTENCE_ENDS = (".", "!", "?")


@dataclass(frozen=True)
class BackgroundKnowledge:
    """Short introduction text for the resolved answer; empty when
    retrieval found nothing."""

    text: str = ""
    source_url: str | None = None

    @property
    def empty(self) -> bool:
        return not self.text


@dataclass(frozen=True)
class EnhancedPrompt:
    text: str
    answer: str
    query: str


def directive(answer: str) -> str:
    """The plain segmentation directive for an answer."""
    return SEGMENT_DIRECTIVE_TEMPLATE.format(answer=answer)


def truncate_at_sentence(text: str, max_chars: int) -> str:
    """Truncate to ``max_chars``, preferring the last sentence boundary
    within the limit; hard-cuts when no boundary exists."""
    if len(text) <= max_chars:
        return text
    window = text[:max_chars]
    best = max(window.rfind(end) for end in _SENTENCE_ENDS)
    if best == -1:
        return window
    return window[: best + 1]


def fetch_background(
    answer: ResolvedAnswer,
    searcher: WebSearcherPort,
    llm: TextGeneratorPort,
    max_chars: int = DEFAULT_BACKGROUND_MAX_CHARS,
) -> BackgroundKnowledge:
    """Search ``"<answer> introduction"`` and summarize the top document.

    Degrades to empty background on any port failure or empty search.
    """
    if not answer.text:
        raise ValueError("fetch_background requires a non-empty answer")
    try:
        docs = searcher.search(f"{answer.text} introduction", 1)
    except Exception:
        logger.warning("background search failed for %r", answer.text)
        return BackgroundKnowledge()
    if not docs:
        return BackgroundKnowledge()
    top = docs[0]
    source_text = top.body if top.body else top.snippet
    if not source_text:
        return BackgroundKnowledge()
    try:
        summary = llm.generate(SUMMARIZE_TEMPLATE.format(max_chars=max_chars, text=source_text), max_chars)
    except Exception:
        logger.warning("background summarization failed for %r", answer.text)
        return BackgroundKnowledge()
    summary = truncate_at_sentence(summary.strip(), max_chars)
    if not summary:
        return BackgroundKnowledge()
    return BackgroundKnowledge(text=summary, source_url=top.url)


def build_prompt(
    query: str,
    answer: ResolvedAnswer,
    background: BackgroundKnowledge,
    template: str | None = None,
) -> EnhancedPrompt:
    """Instantiate the prompt template verbatim (no escaping of answer or
    query text); the background clause is omitted when background is
    empty."""
    if not answer.text:
        raise ValueError("build_prompt requires a non-empty answer")
    background_text = background.text
    if template is None:
        chosen = DEFAULT_TEMPLATE_NO_BACKGROUND if background.empty else DEFAULT_TEMPLATE
        # the default template supplies the clause terminator itself
        background_text = background_text.rstrip().rstrip(".!?")
    else:
        chosen = template
    try:
        text = chosen.format(query=query, answer=answer.text, background=background_text)
    except (KeyError, IndexError) as exc:
        raise ConfigurationError(f"prompt template has unknown placeholder: {exc}") from exc
    return EnhancedPrompt(text=text, answer=answer.text, query=query)
