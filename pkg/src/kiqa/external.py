"""Precomputed sequence vectors, keyed by (item, option, passage).

Lets pooled vectors exported from any real pretrained encoder drive the
scoring heads without that encoder being present.  The passage slot in a
key is the premise index, with two sentinels: ``None`` is the
no-knowledge encoding of the question/option pair alone, and ``-1`` is
the encoding of all premises joined into one passage (what the
concatenation head consumes).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

Key = tuple[str, int, "int | None"]


class ExternalVectorError(ValueError):
    pass


class ExternalVectorStore:
    def __init__(self, vectors: dict[Key, np.ndarray]):
        if not vectors:
            raise ExternalVectorError("no vectors")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1 or next(iter(dims))[0] < 1:
            raise ExternalVectorError(f"inconsistent vector dimensions: {sorted(dims)}")
        self._vectors = dict(vectors)
        self.dimension = next(iter(dims))[0]

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, key: Key) -> bool:
        return key in self._vectors

    def get(self, item_id: str, option: int, passage: int | None = None) -> np.ndarray:
        key = (item_id, option, passage)
        try:
            return self._vectors[key]
        except KeyError:
            raise ExternalVectorError(f"no vector stored for {key}") from None

    def keys(self) -> list[Key]:
        return sorted(self._vectors, key=_sort_key)


def _sort_key(key: Key):
    item, option, passage = key
    return (item, option, passage is not None, passage if passage is not None else 0)


def _check_passage(value, path, lineno):
    if value is None:
        return None
    if not isinstance(value, int) or isinstance(value, bool) or value < -1:
        raise ExternalVectorError(
            f"{path}:{lineno}: passage must be null, -1, or a premise index"
        )
    return value


def load_external_vectors(path: str | Path) -> ExternalVectorStore:
    path = Path(path)
    vectors: dict[Key, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ExternalVectorError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                item, option, vec = rec["item"], rec["option"], rec["vec"]
            except (KeyError, TypeError):
                raise ExternalVectorError(
                    f"{path}:{lineno}: record needs item, option, passage, vec"
                ) from None
            if "passage" not in rec:
                raise ExternalVectorError(f"{path}:{lineno}: record is missing a passage field")
            key = (str(item), int(option), _check_passage(rec["passage"], path, lineno))
            if key in vectors:
                raise ExternalVectorError(f"{path}:{lineno}: duplicate key {key}")
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0:
                raise ExternalVectorError(f"{path}:{lineno}: vec must be a non-empty flat list")
            if vectors and arr.shape != next(iter(vectors.values())).shape:
                raise ExternalVectorError(
                    f"{path}:{lineno}: vector dimension {arr.size} does not match the rest"
                )
            vectors[key] = arr
    return ExternalVectorStore(vectors)


def save_external_vectors(store: ExternalVectorStore, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, option, passage in store.keys():
            rec = {
                "item": item,
                "option": option,
                "passage": passage,
                "vec": store.get(item, option, passage).tolist(),
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
