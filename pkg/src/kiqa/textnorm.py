"""Shared text normalization used by indexing, re-ranking and reports."""

import re

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def word_tokens(text: str) -> list[str]:
    """Lowercase alphanumeric tokens; everything else is a separator."""
    return _TOKEN_RE.findall(text.lower())


def token_set(text: str) -> set[str]:
    return set(word_tokens(text))
