"""Text normalization shared by answer matching, dedup, and validation.

Two normal forms are used:

* token form — casefold, punctuation to spaces, drop articles; used for
  answer/entity matching ("Lionel Messi" matches label "messi").
* squashed form — casefold and drop every non-alphanumeric character;
  used for substring checks where hyphenation and spacing must not hide
  a leak ("su-7" contains "SU7").
"""

from __future__ import annotations

import re

_ARTICLES = {"a", "an", "the"}
_NON_WORD = re.compile(r"[\W_]+", re.UNICODE)


def normalize_tokens(text: str) -> tuple[str, ...]:
    """Casefolded tokens with punctuation stripped and articles dropped."""
    parts = _NON_WORD.split(text.casefold())
    return tuple(p for p in parts if p and p not in _ARTICLES)


def normalize_text(text: str) -> str:
    """Single-space-joined token form (canonical comparison string)."""
    return " ".join(normalize_tokens(text))


def squash(text: str) -> str:
    """Casefold and remove every non-alphanumeric character."""
    return _NON_WORD.sub("", text.casefold())


def tokens_match(a: str, b: str, threshold: float = 1.0) -> bool:
    """True when the token overlap ratio reaches ``threshold``.

    The ratio is |A ∩ B| / min(|A|, |B|); at the default threshold of 1.0
    this is exactly "either token set is a subset of the other".
    """
    ta, tb = set(normalize_tokens(a)), set(normalize_tokens(b))
    if not ta or not tb:
        return False
    overlap = len(ta & tb) / min(len(ta), len(tb))
    return overlap >= threshold


def contains_squashed(haystack: str, needle: str) -> bool:
    """Substring test on squashed forms; empty needles never match."""
    sq_needle = squash(needle)
    return bool(sq_needle) and sq_needle in squash(haystack)


def slugify(text: str) -> str:
    """Lowercase hyphen-joined token form for identifiers and filenames."""
    return "-".join(normalize_tokens(text)) or "item"
