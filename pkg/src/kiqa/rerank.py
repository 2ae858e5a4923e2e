"""Marginal-gain re-ranking of retrieved knowledge sentences.

Retrieval optimizes query match alone, so the top hits are often
near-duplicates.  The re-ranker greedily picks the sentence with the best
``sim(s, query) - lambda * max_selected sim(s, t)`` trade-off until m
sentences are chosen, trading relevance against redundancy with what is
already selected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .corpus import KnowledgeSentence
from .textnorm import token_set, word_tokens


def token_jaccard(a: str, b: str) -> float:
    """Jaccard overlap of lowercase token sets; two empty sets count as equal."""
    sa, sb = token_set(a), token_set(b)
    if not sa and not sb:
        return 1.0
    if not sa or not sb:
        return 0.0
    return len(sa & sb) / len(sa | sb)


class EmbeddingTableError(ValueError):
    pass


def load_embedding_table(path: str | Path) -> dict[str, tuple[float, ...]]:
    """Text format: ``word v1 v2 ... vd`` per line, one fixed dimension."""
    table: dict[str, tuple[float, ...]] = {}
    dim: int | None = None
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            word = parts[0].lower()
            try:
                vec = tuple(float(x) for x in parts[1:])
            except ValueError as exc:
                raise EmbeddingTableError(f"{path}:{lineno}: bad vector component") from exc
            if not vec:
                raise EmbeddingTableError(f"{path}:{lineno}: no vector components")
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise EmbeddingTableError(
                    f"{path}:{lineno}: dimension {len(vec)} != {dim}"
                )
            if word in table:
                raise EmbeddingTableError(f"{path}:{lineno}: duplicate word {word!r}")
            table[word] = vec
    return table


def embedding_cosine(a: str, b: str, table: dict[str, tuple[float, ...]]) -> float:
    """Cosine of mean word vectors; sentences with no known word score 0."""
    va = _mean_vector(a, table)
    vb = _mean_vector(b, table)
    if va is None or vb is None:
        return 0.0
    dot = sum(x * y for x, y in zip(va, vb))
    na = math.sqrt(sum(x * x for x in va))
    nb = math.sqrt(sum(y * y for y in vb))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return dot / (na * nb)


def _mean_vector(text: str, table: dict[str, tuple[float, ...]]) -> list[float] | None:
    vecs = [table[t] for t in word_tokens(text) if t in table]
    if not vecs:
        return None
    return [sum(col) / len(vecs) for col in zip(*vecs)]


@dataclass(frozen=True)
class SimilarityFn:
    """Pluggable sentence similarity: token overlap or embedding cosine."""

    kind: str = "token-jaccard"
    table: dict[str, tuple[float, ...]] | None = None

    def __post_init__(self):
        if self.kind not in ("token-jaccard", "embedding-cosine"):
            raise ValueError(f"unknown similarity kind {self.kind!r}")
        if self.kind == "embedding-cosine" and self.table is None:
            raise ValueError("embedding-cosine similarity needs an embedding table")

    def __call__(self, a: str, b: str) -> float:
        if self.kind == "token-jaccard":
            return token_jaccard(a, b)
        return embedding_cosine(a, b, self.table)


@dataclass
class RerankConfig:
    m: int = 10
    lambda_: float = 1.0
    similarity: SimilarityFn = field(default_factory=SimilarityFn)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")


def rerank(
    candidates: Sequence[KnowledgeSentence],
    query_text: str,
    config: RerankConfig,
) -> list[KnowledgeSentence]:
    """Greedy diverse selection of min(m, n) sentences, in pick order.

    Ties go to the earlier candidate in the input order.
    """
    if not candidates:
        raise ValueError("empty candidate list")
    sim: Callable[[str, str], float] = config.similarity
    query_sim = [sim(c.text, query_text) for c in candidates]
    n = len(candidates)
    selected: list[int] = []
    # redundancy[i] tracks max similarity to anything already selected
    redundancy = [0.0] * n
    remaining = list(range(n))
    for _ in range(min(config.m, n)):
        best = remaining[0]
        best_gain = query_sim[best] - config.lambda_ * (redundancy[best] if selected else 0.0)
        for i in remaining[1:]:
            gain = query_sim[i] - config.lambda_ * (redundancy[i] if selected else 0.0)
            if gain > best_gain:
                best, best_gain = i, gain
        selected.append(best)
        remaining.remove(best)
        for i in remaining:
            s = sim(candidates[i].text, candidates[best].text)
            if s > redundancy[i]:
                redundancy[i] = s
    return [candidates[i] for i in selected]
