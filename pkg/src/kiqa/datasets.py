"""Unified multiple-choice dataset model, schema loaders, premise attachment.

Supported input schemas (JSON lines):

* ``anli``: abductive pairs — ``obs1``/``obs2`` become the context, the two
  hypotheses become the options, and the question is a fixed prompt since
  the source task has none.
* ``piqa``: physical goals — ``goal`` is the question, ``sol1``/``sol2``
  the options, no context.
* ``socialiqa``: ``context`` + ``question`` + three answers, 1-based label.
* ``pfqa`` / ``generic``: the canonical schema this package writes:
  ``{"id", "context"?, "question", "options", "gold"?, "knowledge"?,
  "premises"?, "extras"?}``.

Field names can be overridden with a small JSON schema-mapping file for
off-spec dumps of the same shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import KnowledgeCorpus, KnowledgeSentence
from .index import InvertedIndex, search
from .querygen import EmptyQueryError, QueryGenConfig, generate_query
from .rerank import RerankConfig, rerank

ANLI_QUESTION = "What is the most plausible explanation?"


class DatasetError(ValueError):
    pass


@dataclass
class McqItem:
    id: str
    question: str
    options: list[str]
    gold: int | None = None
    context: str | None = None
    premises: list[list[KnowledgeSentence]] | None = None
    knowledge: list[str] = field(default_factory=list)  # item-level gold facts
    extras: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.options) < 2:
            raise DatasetError(f"item {self.id!r}: need at least 2 options")
        if self.gold is not None and not 0 <= self.gold < len(self.options):
            raise DatasetError(f"item {self.id!r}: gold index {self.gold} out of range")
        if self.premises is not None and len(self.premises) != len(self.options):
            raise DatasetError(
                f"item {self.id!r}: {len(self.premises)} premise lists for "
                f"{len(self.options)} options"
            )

    @property
    def n(self) -> int:
        return len(self.options)


@dataclass
class McqDataset:
    items: list[McqItem]
    schema_tag: str = "generic"

    def __post_init__(self):
        seen = set()
        for item in self.items:
            if item.id in seen:
                raise DatasetError(f"duplicate item id {item.id!r}")
            seen.add(item.id)
        sizes = {item.n for item in self.items}
        if len(sizes) > 1:
            raise DatasetError(f"mixed option counts in one dataset: {sorted(sizes)}")

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def n_options(self) -> int:
        return self.items[0].n if self.items else 0


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

_DEFAULT_MAPS = {
    "anli": {
        "id": "story_id",
        "fields": ["obs1", "obs2", "hyp1", "hyp2"],
        "label": "label",
        "label_base": 1,
    },
    "piqa": {
        "id": "id",
        "fields": ["goal", "sol1", "sol2"],
        "label": "label",
        "label_base": 0,
    },
    "socialiqa": {
        "id": "id",
        "fields": ["context", "question", "answerA", "answerB", "answerC"],
        "label": "label",
        "label_base": 1,
    },
}

SCHEMA_TAGS = ("anli", "piqa", "socialiqa", "pfqa", "generic")


def load_mcq(
    path: str | Path,
    schema_tag: str,
    schema_map: dict | str | Path | None = None,
) -> McqDataset:
    """Load one JSON-lines file into the unified model.

    ``schema_map`` overrides the default field names for the tag (a dict or
    a path to a JSON file with the same keys as the built-in mappings).
    """
    if schema_tag not in SCHEMA_TAGS:
        raise DatasetError(f"unknown schema tag {schema_tag!r}")
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc

    mapping = dict(_DEFAULT_MAPS.get(schema_tag, {}))
    if schema_map is not None:
        if isinstance(schema_map, (str, Path)):
            with open(schema_map, encoding="utf-8") as fh:
                mapping.update(json.load(fh))
        else:
            mapping.update(schema_map)

    items = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        try:
            if schema_tag in ("pfqa", "generic"):
                items.append(_item_from_generic(rec))
            else:
                items.append(_item_from_mapped(rec, schema_tag, mapping, lineno))
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed record: {exc}") from exc
    if not items:
        raise DatasetError(f"empty dataset: {path}")
    return McqDataset(items=items, schema_tag=schema_tag)


def _item_from_mapped(rec: dict, schema_tag: str, mapping: dict, lineno: int) -> McqItem:
    fields = [str(rec[name]) for name in mapping["fields"]]
    if schema_tag == "anli":
        context = f"{fields[0]} {fields[1]}"
        question = ANLI_QUESTION
        options = fields[2:]
    elif schema_tag == "piqa":
        context = None
        question = fields[0]
        options = fields[1:]
    else:  # socialiqa
        context = fields[0]
        question = fields[1]
        options = fields[2:]

    gold = None
    label_field = mapping.get("label")
    if label_field and label_field in rec and rec[label_field] is not None:
        gold = int(rec[label_field]) - int(mapping.get("label_base", 0))
        if not 0 <= gold < len(options):
            raise DatasetError(f"line {lineno}: label {rec[label_field]!r} out of range")

    id_field = mapping.get("id")
    item_id = str(rec[id_field]) if id_field and id_field in rec else f"{schema_tag}-{lineno:06d}"
    return McqItem(id=item_id, question=question, options=options, gold=gold, context=context)


def _item_from_generic(rec: dict) -> McqItem:
    premises = None
    if rec.get("premises") is not None:
        premises = [
            [
                KnowledgeSentence(
                    id=p["id"],
                    text=p["text"],
                    source_tag=p.get("source", "generic"),
                    title=p.get("title"),
                )
                for p in plist
            ]
            for plist in rec["premises"]
        ]
    return McqItem(
        id=str(rec["id"]),
        question=str(rec["question"]),
        options=[str(o) for o in rec["options"]],
        gold=rec.get("gold"),
        context=rec.get("context"),
        premises=premises,
        knowledge=[str(s) for s in rec.get("knowledge", [])],
        extras={str(k): str(v) for k, v in rec.get("extras", {}).items()},
    )


def save_mcq_jsonl(dataset: McqDataset, path: str | Path) -> None:
    """Canonical generic JSON-lines with premises embedded; fixed key order."""
    with open(path, "w", encoding="utf-8") as fh:
        for item in dataset.items:
            rec: dict = {"id": item.id, "question": item.question, "options": item.options}
            if item.gold is not None:
                rec["gold"] = item.gold
            if item.context is not None:
                rec["context"] = item.context
            if item.knowledge:
                rec["knowledge"] = item.knowledge
            if item.premises is not None:
                rec["premises"] = [
                    [
                        {"id": p.id, "text": p.text, "source": p.source_tag, "title": p.title}
                        for p in plist
                    ]
                    for plist in item.premises
                ]
            if item.extras:
                rec["extras"] = item.extras
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Premise attachment (open-book preparation)
# ---------------------------------------------------------------------------

def attach_premises(
    dataset: McqDataset,
    corpus: KnowledgeCorpus,
    index: InvertedIndex,
    qg_config: QueryGenConfig,
    rr_config: RerankConfig,
    retrieve_k: int = 50,
) -> McqDataset:
    """Retrieve and re-rank knowledge for every (item, option) pair.

    The corpus provides sentence texts for re-ranking; it must be the one
    the index was built over.  Options whose query comes back empty retry
    with the part-of-speech filter off; if retrieval still finds nothing
    the option gets an empty premise list.
    """
    out_items = []
    for item in dataset.items:
        premises: list[list[KnowledgeSentence]] = []
        for opt_ix in range(item.n):
            try:
                query = generate_query(item, opt_ix, qg_config)
            except EmptyQueryError:
                try:
                    query = generate_query(item, opt_ix, replace(qg_config, pos_filter=False))
                except EmptyQueryError:
                    premises.append([])
                    continue
            hits = search(index, query.terms, k=retrieve_k)
            if not hits:
                premises.append([])
                continue
            candidates = [corpus.get(h.sentence_id) for h in hits]
            premises.append(rerank(candidates, " ".join(query.terms), rr_config))
        out_items.append(replace(item, premises=premises))
    return McqDataset(items=out_items, schema_tag=dataset.schema_tag)
