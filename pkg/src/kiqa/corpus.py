"""Knowledge corpus ingestion and source preparation.

Three raw formats are supported:

* ``plain-lines``: UTF-8 text, one knowledge sentence per line.
* ``titled-paragraphs``: JSON lines with fields ``{"title", "text"}``; the
  paragraph body is split into sentences and the title is prefixed to each.
* ``atomic-events``: JSON lines with fields ``{"event", "dimension",
  "inference"}``; person placeholders are replaced with names and each
  record is rendered through a per-dimension connective template.

Prepared corpora are exchanged between pipeline stages as JSON lines
(one sentence record per line, see :func:`save_jsonl`).
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path


class CorpusError(ValueError):
    """Raised for unreadable, empty or malformed corpus inputs."""


@dataclass(frozen=True)
class KnowledgeSentence:
    """One knowledge sentence with its source metadata."""

    id: str
    text: str
    source_tag: str = "generic"
    title: str | None = None


@dataclass
class KnowledgeCorpus:
    """Ordered collection of knowledge sentences.

    ``paragraphs`` optionally records contiguous (start, end) index ranges of
    sentences that came from the same source paragraph; it is populated by
    the titled-paragraphs loader and lets training derive adjacent-sentence
    pairs.
    """

    sentences: list[KnowledgeSentence]
    paragraphs: list[tuple[int, int]] | None = None
    _by_id: dict[str, KnowledgeSentence] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {}
        for sent in self.sentences:
            if not sent.text.strip():
                raise CorpusError(f"sentence {sent.id!r} is empty")
            if sent.id in self._by_id:
                raise CorpusError(f"duplicate sentence id {sent.id!r}")
            self._by_id[sent.id] = sent

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def get(self, sentence_id: str) -> KnowledgeSentence:
        return self._by_id[sentence_id]

    def __contains__(self, sentence_id: str) -> bool:
        return sentence_id in self._by_id

    @property
    def sentence_count(self) -> int:
        return len(self.sentences)

    @property
    def token_count(self) -> int:
        from .textnorm import word_tokens

        return sum(len(word_tokens(s.text)) for s in self.sentences)


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def _make_id(n: int) -> str:
    return f"{n:08d}"


# ---------------------------------------------------------------------------
# Sentence splitting
# ---------------------------------------------------------------------------

# Words after which a period does not end a sentence.  Dotted abbreviations
# ("e.g.", "i.e.", "u.s.") are matched with their internal periods intact.
_ABBREVIATIONS = {
    "mr", "mrs", "ms", "dr", "prof", "rev", "gen", "sen", "rep", "hon",
    "st", "sr", "jr", "vs", "etc", "inc", "ltd", "co", "corp", "dept",
    "fig", "figs", "no", "nos", "vol", "pp", "approx", "est", "min", "max",
    "e.g", "i.e", "u.s", "u.k", "a.m", "p.m", "ph.d",
}

_WORD_BACK_RE = re.compile(r"[A-Za-z][A-Za-z.]*$")


def _ends_with_abbreviation(prefix: str) -> bool:
    match = _WORD_BACK_RE.search(prefix)
    if match is None:
        return False
    word = match.group(0)
    if len(word) == 1 and word.isupper():
        return True  # initials: "J. Smith"
    return word.lower().rstrip(".") in _ABBREVIATIONS or word.lower() in _ABBREVIATIONS


def split_sentences(paragraph: str) -> list[str]:
    """Rule-based sentence splitter on terminal punctuation.

    Splits after runs of ``. ! ?`` (plus trailing quotes/brackets) that are
    followed by whitespace, unless the period belongs to a known
    abbreviation or a single-letter initial.  Joining the output with
    single spaces preserves every non-whitespace character of the input.
    """
    text = paragraph
    n = len(text)
    sentences: list[str] = []
    start = 0
    i = 0
    while i < n:
        ch = text[i]
        if ch in ".!?":
            j = i + 1
            while j < n and text[j] in ".!?\"')]":
                j += 1
            followed_by_space = j >= n or text[j].isspace()
            if followed_by_space and not (ch == "." and _ends_with_abbreviation(text[:i])):
                segment = text[start:j].strip()
                if segment:
                    sentences.append(_normalize_ws(segment))
                start = j
                i = j
                continue
        i += 1
    tail = text[start:].strip()
    if tail:
        sentences.append(_normalize_ws(tail))
    return sentences


# ---------------------------------------------------------------------------
# Source preparation
# ---------------------------------------------------------------------------

def prepare_titled(
    paragraphs: list[tuple[str, str]],
    source_tag: str = "wikihow",
    start_id: int = 0,
) -> tuple[list[KnowledgeSentence], list[tuple[int, int]]]:
    """Split titled paragraphs into sentences, prefixing each with its title.

    Returns the sentences plus (start, end) index ranges marking which
    output sentences belong to the same paragraph.
    """
    out: list[KnowledgeSentence] = []
    ranges: list[tuple[int, int]] = []
    counter = start_id
    for title, body in paragraphs:
        title = _normalize_ws(title)
        first = len(out)
        for sent in split_sentences(body):
            text = f"{title} . {sent}" if title else sent
            out.append(
                KnowledgeSentence(
                    id=_make_id(counter), text=text, source_tag=source_tag, title=title or None
                )
            )
            counter += 1
        if len(out) > first:
            ranges.append((first, len(out)))
    return out, ranges


# Connective templates, one per inference dimension.  Shipped as a data file
# so downstream users can swap the wording; this mapping is the fallback.
_DEFAULT_ATOMIC_TEMPLATES = {
    "xneed": "{event}. Before, {x} needed {inference}.",
    "xattr": "{event}, so {x} is seen as {inference}.",
    "xreact": "{event}, as a result {x} feels {inference}.",
    "xwant": "{event}, as a result {x} wants {inference}.",
    "xintent": "{event}, because {x} wanted {inference}.",
    "xeffect": "{event}, as a result {x} {inference}.",
    "oreact": "{event}, as a result others feel {inference}.",
    "owant": "{event}, as a result others want {inference}.",
}

_PERSON_X_RE = re.compile(r"\bPersonX\b")
_PERSON_Y_RE = re.compile(r"\bPersonY\b")
_BLANK_RE = re.compile(r"_{2,}")


def load_atomic_templates(path: str | Path | None = None) -> dict[str, str]:
    if path is None:
        path = Path(__file__).parent / "data" / "atomic_templates.json"
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return {k.lower(): v for k, v in raw.items()}


def load_name_pool(path: str | Path | None = None) -> list[str]:
    if path is None:
        path = Path(__file__).parent / "data" / "neutral_names.txt"
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def prepare_atomic(
    events: list[dict],
    name_pool: list[str],
    seed: int,
    templates: dict[str, str] | None = None,
    source_tag: str = "atomic",
    start_id: int = 0,
) -> list[KnowledgeSentence]:
    """Render event records into declarative sentences.

    Placeholder persons are replaced with names drawn deterministically
    from ``name_pool``; the two placeholders within one event always get
    distinct names.  Events that still contain unfilled blanks (``___``)
    are skipped.
    """
    if not name_pool:
        raise CorpusError("empty name pool")
    if templates is None:
        templates = load_atomic_templates()
    rng = random.Random(seed)
    out: list[KnowledgeSentence] = []
    counter = start_id
    for record in events:
        event = _normalize_ws(str(record["event"]))
        dimension = str(record["dimension"]).lower()
        inference = _normalize_ws(str(record["inference"]))
        if dimension not in templates:
            raise CorpusError(f"unknown inference dimension {record['dimension']!r}")
        name_x = rng.choice(name_pool)
        if _BLANK_RE.search(event) or not inference:
            continue
        if _PERSON_Y_RE.search(event):
            others = [n for n in name_pool if n != name_x]
            if not others:
                raise CorpusError("name pool too small for two distinct persons")
            name_y = rng.choice(others)
            event = _PERSON_Y_RE.sub(name_y, event)
        event = _PERSON_X_RE.sub(name_x, event)
        text = templates[dimension].format(event=event, x=name_x, inference=inference)
        out.append(
            KnowledgeSentence(id=_make_id(counter), text=text, source_tag=source_tag)
        )
        counter += 1
    return out


# ---------------------------------------------------------------------------
# Loading and serialization
# ---------------------------------------------------------------------------

FORMATS = ("plain-lines", "titled-paragraphs", "atomic-events")


def load_corpus(
    path: str | Path,
    format: str = "plain-lines",
    *,
    name_pool: list[str] | None = None,
    seed: int = 0,
    source_tag: str | None = None,
) -> KnowledgeCorpus:
    """Read a raw knowledge source and prepare it into a corpus.

    Sentence ids are assigned in source-file order, so loading the same
    file twice yields an identical corpus.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise CorpusError(f"{path} is not valid UTF-8: {exc}") from exc

    if format == "plain-lines":
        tag = source_tag or "plain"
        sentences = [
            KnowledgeSentence(id=_make_id(i), text=_normalize_ws(line), source_tag=tag)
            for i, line in enumerate(ln for ln in raw.splitlines() if ln.strip())
        ]
        paragraphs = None
    elif format == "titled-paragraphs":
        records = _parse_jsonl(raw, path, required=("title", "text"))
        pairs = [(rec["title"], rec["text"]) for rec, _ in records]
        sentences, paragraphs = prepare_titled(pairs, source_tag=source_tag or "wikihow")
    elif format == "atomic-events":
        records = _parse_jsonl(raw, path, required=("event", "dimension", "inference"))
        pool = name_pool if name_pool is not None else load_name_pool()
        sentences = prepare_atomic(
            [rec for rec, _ in records], pool, seed, source_tag=source_tag or "atomic"
        )
        paragraphs = None
    else:
        raise CorpusError(f"unknown corpus format {format!r}")

    if not sentences:
        raise CorpusError(f"empty corpus: {path}")
    return KnowledgeCorpus(sentences, paragraphs=paragraphs)


def _parse_jsonl(raw: str, path: Path, required: tuple[str, ...]) -> list[tuple[dict, int]]:
    records = []
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(rec, dict) or any(k not in rec for k in required):
            raise CorpusError(
                f"{path}:{lineno}: record must have fields {', '.join(required)}"
            )
        records.append((rec, lineno))
    return records


def save_plain_lines(corpus: KnowledgeCorpus, path: str | Path) -> None:
    """One sentence text per line; titles and metadata are dropped."""
    with open(path, "w", encoding="utf-8") as fh:
        for sent in corpus.sentences:
            fh.write(sent.text + "\n")


def save_jsonl(corpus: KnowledgeCorpus, path: str | Path) -> None:
    """Prepared-corpus interchange format: one sentence record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for sent in corpus.sentences:
            rec = {"id": sent.id, "text": sent.text, "source": sent.source_tag, "title": sent.title}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        if corpus.paragraphs is not None:
            fh.write(json.dumps({"paragraphs": corpus.paragraphs}) + "\n")


def load_jsonl(path: str | Path) -> KnowledgeCorpus:
    path = Path(path)
    sentences = []
    paragraphs = None
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if "paragraphs" in rec and "id" not in rec:
            paragraphs = [tuple(r) for r in rec["paragraphs"]]
            continue
        try:
            sentences.append(
                KnowledgeSentence(
                    id=rec["id"],
                    text=rec["text"],
                    source_tag=rec.get("source", "generic"),
                    title=rec.get("title"),
                )
            )
        except KeyError as exc:
            raise CorpusError(f"{path}:{lineno}: missing field {exc}") from exc
    if not sentences:
        raise CorpusError(f"empty corpus: {path}")
    return KnowledgeCorpus(sentences, paragraphs=paragraphs)
