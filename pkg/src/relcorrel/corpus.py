"""DocRED-format corpora, mention markers and the joint document + relation input.

The joint input layout is::

    [CLS] doc tokens (mentions wrapped in "*") [SEP] r_0 r_1 ... r_{|R|-1} [SEP]

Every relation type is one reserved vocabulary id, so each relation owns
exactly one encoder position.
"""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Protocol, Sequence

logger = logging.getLogger(__name__)

# position id given to every relation slot; the encoder maps it to one shared embedding
LABEL_SEGMENT = -1


class CorpusError(Exception):
    """Base class for data errors raised while reading or preparing documents."""


class LoadError(CorpusError):
    def __init__(self, record: int, field_name: str, message: str):
        self.record = record
        self.field = field_name
        super().__init__(f"record {record}: field {field_name!r}: {message}")


class SchemaError(CorpusError):
    pass


class MentionOverlapError(CorpusError):
    pass


class InputLengthError(CorpusError):
    pass


class Mention(NamedTuple):
    sent_id: int
    start: int
    end: int
    name: str
    type: str


@dataclass(frozen=True)
class Entity:
    mentions: tuple[Mention, ...]

    @property
    def names(self) -> frozenset[str]:
        return frozenset(m.name for m in self.mentions)


@dataclass(frozen=True)
class Fact:
    head: int
    tail: int
    relation: int
    evidence: tuple[int, ...] = ()


@dataclass(frozen=True)
class Document:
    id: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    facts: tuple[Fact, ...] = ()

    @property
    def words(self) -> list[str]:
        return [w for sent in self.sentences for w in sent]

    @property
    def relation_set(self) -> frozenset[int]:
        return frozenset(f.relation for f in self.facts)

    def sentence_offsets(self) -> list[int]:
        offsets, total = [], 0
        for sent in self.sentences:
            offsets.append(total)
            total += len(sent)
        return offsets


@dataclass(frozen=True)
class RelationSchema:
    """Ordered relation types. Index ``i`` is the relation id used everywhere internally."""

    ids: tuple[str, ...]
    names: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.ids) != len(self.names):
            raise SchemaError("relation ids and names differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise SchemaError("relation ids must be unique")
        if "Na" in self.ids or "NA" in self.ids:
            raise SchemaError("NA is encoded by the absence of facts and cannot be a schema member")
        object.__setattr__(self, "_index", {r: i for i, r in enumerate(self.ids)})

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> RelationSchema:
        return cls(tuple(mapping), tuple(mapping.values()))

    @classmethod
    def load(cls, path: str | Path) -> RelationSchema:
        with open(path, encoding="utf-8") as f:
            mapping = json.load(f)
        if not isinstance(mapping, dict):
            raise SchemaError(f"{path}: expected a JSON object mapping relation id to name")
        return cls.from_mapping(mapping)

    def dump(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dict(zip(self.ids, self.names)), f, ensure_ascii=False, indent=1)

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, rel_id: str) -> int:
        try:
            return self._index[rel_id]
        except KeyError:
            raise SchemaError(f"unknown relation id {rel_id!r}") from None


# ---------------------------------------------------------------------------
# DocRED JSON <-> Document


def _require(record: Mapping[str, Any], key: str, kind: type, idx: int, where: str = ""):
    if key not in record:
        raise LoadError(idx, where + key, "missing")
    value = record[key]
    if not isinstance(value, kind):
        raise LoadError(idx, where + key, f"expected {kind.__name__}, got {type(value).__name__}")
    return value


def _parse_record(rec: Any, idx: int, schema: RelationSchema) -> Document:
    if not isinstance(rec, dict):
        raise LoadError(idx, "<record>", "expected a JSON object")
    title = _require(rec, "title", str, idx)
    sents = _require(rec, "sents", list, idx)
    sentences = []
    for si, sent in enumerate(sents):
        if not isinstance(sent, list) or not all(isinstance(w, str) for w in sent):
            raise LoadError(idx, f"sents[{si}]", "expected a list of word strings")
        sentences.append(tuple(sent))

    entities = []
    for ei, ent in enumerate(_require(rec, "vertexSet", list, idx)):
        if not isinstance(ent, list) or not ent:
            raise LoadError(idx, f"vertexSet[{ei}]", "entity needs at least one mention")
        mentions = []
        for mi, m in enumerate(ent):
            where = f"vertexSet[{ei}][{mi}]."
            if not isinstance(m, dict):
                raise LoadError(idx, where[:-1], "expected a mention object")
            sent_id = _require(m, "sent_id", int, idx, where)
            pos = _require(m, "pos", list, idx, where)
            if len(pos) != 2 or not all(isinstance(p, int) for p in pos):
                raise LoadError(idx, where + "pos", "expected [start, end]")
            start, end = pos
            if not 0 <= sent_id < len(sentences):
                raise LoadError(idx, where + "sent_id", f"sentence {sent_id} out of range")
            if not 0 <= start < end <= len(sentences[sent_id]):
                raise LoadError(idx, where + "pos", f"span {pos} outside sentence {sent_id}")
            name = m.get("name", " ".join(sentences[sent_id][start:end]))
            mentions.append(Mention(sent_id, start, end, str(name), str(m.get("type", ""))))
        entities.append(Entity(tuple(mentions)))

    merged: dict[tuple[int, int, int], set[int]] = {}
    for li, lab in enumerate(rec.get("labels", []) or []):
        where = f"labels[{li}]."
        if not isinstance(lab, dict):
            raise LoadError(idx, where[:-1], "expected a label object")
        h = _require(lab, "h", int, idx, where)
        t = _require(lab, "t", int, idx, where)
        r = _require(lab, "r", str, idx, where)
        for key, e in (("h", h), ("t", t)):
            if not 0 <= e < len(entities):
                raise LoadError(idx, where + key, f"entity {e} out of range")
        if h == t:
            raise LoadError(idx, where + "t", "head and tail must differ")
        evidence = lab.get("evidence", []) or []
        if any(not isinstance(s, int) or not 0 <= s < len(sentences) for s in evidence):
            raise LoadError(idx, where + "evidence", "sentence index out of range")
        try:
            rel = schema.index(r)
        except SchemaError as exc:
            raise SchemaError(f"record {idx}: {where}r: {exc}") from None
        merged.setdefault((h, t, rel), set()).update(evidence)
    facts = tuple(Fact(h, t, r, tuple(sorted(ev))) for (h, t, r), ev in merged.items())
    return Document(title, tuple(sentences), tuple(entities), facts)


def parse_records(records: Any, schema: RelationSchema) -> list[Document]:
    if not isinstance(records, list):
        raise LoadError(-1, "<root>", "expected a JSON array of documents")
    return [_parse_record(rec, i, schema) for i, rec in enumerate(records)]


def load_dataset(path: str | Path, schema: RelationSchema) -> list[Document]:
    """Read a DocRED-format JSON file. Duplicate (h, t, r) facts are merged."""
    with open(path, encoding="utf-8") as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as exc:
            raise LoadError(-1, "<file>", f"{path}: invalid JSON ({exc})") from None
    docs = parse_records(records, schema)
    logger.info("loaded %d documents from %s", len(docs), path)
    return docs


def document_to_record(doc: Document, schema: RelationSchema) -> dict[str, Any]:
    return {
        "title": doc.id,
        "sents": [list(s) for s in doc.sentences],
        "vertexSet": [
            [{"name": m.name, "sent_id": m.sent_id, "pos": [m.start, m.end], "type": m.type} for m in e.mentions]
            for e in doc.entities
        ],
        "labels": [
            {"h": f.head, "t": f.tail, "r": schema.ids[f.relation], "evidence": list(f.evidence)}
            for f in doc.facts
        ],
    }


def dump_dataset(docs: Iterable[Document], path: str | Path, schema: RelationSchema) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([document_to_record(d, schema) for d in docs], f, ensure_ascii=False)


# ---------------------------------------------------------------------------
# tokenization


class TokenMapper(Protocol):
    cls_id: int
    sep_id: int
    pad_id: int
    marker_id: int

    def word_ids(self, word: str) -> Sequence[int]: ...

    def relation_token_id(self, relation: int) -> int: ...


class Vocab:
    """Word-level token mapper with reserved special and relation-token ids.

    Layout: specials first, then words, then one id per relation.
    """

    SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "*")

    def __init__(self, words: Iterable[str], num_relations: int):
        self.words = list(dict.fromkeys(str(w) for w in words))
        self.num_relations = num_relations
        self._ids = {w: i + len(self.SPECIALS) for i, w in enumerate(self.words)}
        self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.marker_id = range(len(self.SPECIALS))

    @classmethod
    def build(cls, docs: Iterable[Document], num_relations: int, max_words: int | None = None) -> Vocab:
        counts = Counter(w for d in docs for w in d.words)
        # deterministic: frequency, then first-seen order
        words = [w for w, _ in counts.most_common(max_words)]
        return cls(words, num_relations)

    def __len__(self) -> int:
        return len(self.SPECIALS) + len(self.words) + self.num_relations

    def word_ids(self, word: str) -> list[int]:
        return [self._ids.get(word, self.unk_id)]

    def relation_token_id(self, relation: int) -> int:
        if not 0 <= relation < self.num_relations:
            raise IndexError(f"relation {relation} out of range")
        return len(self.SPECIALS) + len(self.words) + relation

    def to_dict(self) -> dict[str, Any]:
        return {"words": self.words, "num_relations": self.num_relations}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Vocab:
        return cls(data["words"], data["num_relations"])


@dataclass(frozen=True)
class MarkedDocument:
    token_ids: tuple[int, ...]
    entity_markers: tuple[tuple[int, ...], ...]  # leading-marker position per mention
    marker_positions: tuple[int, ...]  # every marker, leading and trailing


@dataclass(frozen=True)
class JointInput:
    token_ids: tuple[int, ...]
    position_ids: tuple[int, ...]
    entity_markers: tuple[tuple[int, ...], ...]
    relation_positions: tuple[int, ...]
    doc_span: tuple[int, int]

    @property
    def length(self) -> int:
        return len(self.token_ids)


def _check_overlaps(spans: list[tuple[int, int, int, int]]) -> None:
    spans = sorted(spans)
    bad = []
    widest = None
    for s, e, _, _ in spans:
        if widest is not None and s < widest[1]:
            bad.append((widest, (s, e)))
        if widest is None or e > widest[1]:
            widest = (s, e)
    if bad:
        raise MentionOverlapError(f"overlapping mention spans (document word offsets): {bad}")


def insert_mention_markers(doc: Document, tokenizer: TokenMapper) -> MarkedDocument:
    """Wrap every mention in marker tokens and record each mention's leading marker."""
    offsets = doc.sentence_offsets()
    spans = [
        (offsets[m.sent_id] + m.start, offsets[m.sent_id] + m.end, ei, mi)
        for ei, ent in enumerate(doc.entities)
        for mi, m in enumerate(ent.mentions)
    ]
    _check_overlaps(spans)
    starts = {s: (ei, mi) for s, _, ei, mi in spans}
    ends = Counter(e for _, e, _, _ in spans)

    tokens: list[int] = []
    markers: list[int] = []
    leading: dict[tuple[int, int], int] = {}

    def close(pos: int) -> None:
        for _ in range(ends.get(pos, 0)):
            markers.append(len(tokens))
            tokens.append(tokenizer.marker_id)

    words = doc.words
    for i, word in enumerate(words):
        close(i)
        if i in starts:
            leading[starts[i]] = len(tokens)
            markers.append(len(tokens))
            tokens.append(tokenizer.marker_id)
        tokens.extend(tokenizer.word_ids(word))
    close(len(words))

    entity_markers = tuple(
        tuple(leading[(ei, mi)] for mi in range(len(ent.mentions))) for ei, ent in enumerate(doc.entities)
    )
    return MarkedDocument(tuple(tokens), entity_markers, tuple(markers))


def build_joint_input(
    marked: MarkedDocument,
    num_relations: int,
    tokenizer: TokenMapper,
    max_length: int,
    strict: bool = False,
) -> JointInput:
    """Append one reserved token per relation after the marked document.

    Over-length documents lose trailing document tokens (never relation
    tokens). Entities whose every marker is cut fall back to the [CLS] row.
    """
    if num_relations <= 0:
        raise SchemaError("relation schema must be non-empty")
    budget = max_length - (num_relations + 3)
    if budget <= 0:
        raise InputLengthError(f"max length {max_length} leaves no room for {num_relations} relation tokens")
    doc_tokens = list(marked.token_ids)
    if len(doc_tokens) > budget:
        msg = f"document of {len(doc_tokens)} tokens exceeds budget {budget}"
        if strict:
            raise InputLengthError(msg)
        warnings.warn(msg + "; truncating", stacklevel=2)
        doc_tokens = doc_tokens[:budget]

    n = len(doc_tokens)
    entity_markers = []
    for positions in marked.entity_markers:
        kept = tuple(p + 1 for p in positions if p < n)
        entity_markers.append(kept or (0,))
    rel_ids = [tokenizer.relation_token_id(r) for r in range(num_relations)]
    token_ids = [tokenizer.cls_id, *doc_tokens, tokenizer.sep_id, *rel_ids, tokenizer.sep_id]
    position_ids = [*range(n + 2), *([LABEL_SEGMENT] * num_relations), n + 2]
    return JointInput(
        token_ids=tuple(token_ids),
        position_ids=tuple(position_ids),
        entity_markers=tuple(entity_markers),
        relation_positions=tuple(range(n + 2, n + 2 + num_relations)),
        doc_span=(1, n + 1),
    )


def enumerate_entity_pairs(doc: Document) -> list[tuple[int, int, frozenset[int]]]:
    """All ordered (head, tail) pairs with their gold label sets; empty set means NA."""
    labels: dict[tuple[int, int], set[int]] = {}
    for f in doc.facts:
        labels.setdefault((f.head, f.tail), set()).add(f.relation)
    p = len(doc.entities)
    return [
        (h, t, frozenset(labels.get((h, t), ())))
        for h in range(p)
        for t in range(p)
        if h != t
    ]
