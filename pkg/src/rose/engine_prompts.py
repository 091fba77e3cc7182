"""Fixed prompt templates used by the dataset engine's LLM calls."""

from __future__ import annotations

SEGMENTABLE_TEMPLATE = (
    "Does the term below name a concrete physical entity that could be "
    "segmented in a photograph? Reply with exactly one word: YES or NO.\n"
    "Term: {term}"
)

CO_ENTITY_TEMPLATE = (
    "List entities that often appear alongside {term} in photographs, "
    "separated by spaces. Answer with names only."
)

QUESTION_TEMPLATE = (
    "Write one question answerable by '{answer}' based on this news "
    "snippet, without mentioning '{answer}' in any form.\n"
    "Snippet: {snippet}"
)

QUESTION_RETRY_SUFFIX = "\nThe previous attempt mentioned the answer; do not repeat it."
