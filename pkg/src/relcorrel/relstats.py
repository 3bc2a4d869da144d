"""Corpus statistics over relation labels: co-occurrence, PPMI, long tail, multi-label."""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Document, enumerate_entity_pairs

PPMI = "ppmi"
LEARNED = "learned-dot-product"


@dataclass(frozen=True)
class CooccurrenceCounts:
    """Document-presence counts; a document adds at most 1 to any cell."""

    doc_count: int
    per_relation: np.ndarray  # [R]
    joint: np.ndarray  # [R, R], diagonal == per_relation

    def __add__(self, other: CooccurrenceCounts) -> CooccurrenceCounts:
        return CooccurrenceCounts(
            self.doc_count + other.doc_count,
            self.per_relation + other.per_relation,
            self.joint + other.joint,
        )


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray
    kind: str

    @property
    def size(self) -> int:
        return self.values.shape[0]


def count_cooccurrence(dataset: Sequence[Document], num_relations: int) -> CooccurrenceCounts:
    if not dataset:
        raise ValueError("cannot count co-occurrence over an empty dataset")
    presence = np.zeros((len(dataset), num_relations), dtype=np.int64)
    for i, doc in enumerate(dataset):
        for r in doc.relation_set:
            presence[i, r] = 1
    joint = presence.T @ presence
    return CooccurrenceCounts(len(dataset), presence.sum(axis=0), joint)


def ppmi(counts: CooccurrenceCounts) -> CorrelationMatrix:
    """max(0, ln P(i,j) / (P(i) P(j))) with document-level probabilities; empty cells are 0."""
    if counts.doc_count <= 0:
        raise ValueError("doc_count must be positive")
    n = float(counts.doc_count)
    joint = counts.joint.astype(np.float64)
    marg = counts.per_relation.astype(np.float64)
    expected = np.outer(marg, marg)
    valid = (joint > 0) & (expected > 0)
    pmi = np.zeros_like(joint)
    pmi[valid] = np.log(joint[valid] * n / expected[valid])
    return CorrelationMatrix(np.maximum(pmi, 0.0), PPMI)


def relation_frequency(dataset: Iterable[Document], num_relations: int) -> np.ndarray:
    """Number of facts (triplets) per relation."""
    freq = np.zeros(num_relations, dtype=np.int64)
    for doc in dataset:
        for f in doc.facts:
            freq[f.relation] += 1
    return freq


def multilabel_histogram(dataset: Iterable[Document]) -> dict[int, int]:
    """Label count -> number of entity pairs carrying that many labels (NA pairs skipped)."""
    hist: Counter[int] = Counter()
    for doc in dataset:
        for _, _, labels in enumerate_entity_pairs(doc):
            if labels:
                hist[len(labels)] += 1
    return dict(sorted(hist.items()))


def learned_similarity(relation_embeddings: np.ndarray) -> CorrelationMatrix:
    emb = np.asarray(relation_embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError(f"expected a [relations x dim] matrix, got shape {emb.shape}")
    if not np.all(np.isfinite(emb)):
        raise ValueError("relation embeddings contain non-finite values")
    return CorrelationMatrix(emb @ emb.T, LEARNED)


def frequency_order(freq: np.ndarray) -> np.ndarray:
    """Relation ids sorted by descending training frequency, ties by id."""
    return np.lexsort((np.arange(len(freq)), -np.asarray(freq)))


# ---------------------------------------------------------------------------
# export


def write_matrix_csv(values: np.ndarray, names: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["", *names])
        for name, row in zip(names, values):
            w.writerow([name, *(_fmt(v) for v in row)])


def read_matrix_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty matrix file")
    cols = rows[0][1:]
    names = [r[0] for r in rows[1:]]
    values = np.array([[float(v) if v != "" else np.nan for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    if values.size and values.shape[1] != len(cols):
        raise ValueError(f"{path}: ragged matrix rows")
    return names, values.reshape(len(names), len(cols))


def write_matrix_json(values: np.ndarray, names: Sequence[str], path: str | Path) -> None:
    payload = {
        "relations": list(names),
        "values": [[None if np.isnan(v) else float(v) for v in row] for row in values],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def read_matrix_json(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    values = np.array([[np.nan if v is None else v for v in row] for row in payload["values"]], dtype=np.float64)
    return list(payload["relations"]), values.reshape(len(payload["relations"]), -1)


def write_frequency_csv(freq: np.ndarray, names: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["relation", "count"])
        for i in frequency_order(freq):
            w.writerow([names[i], int(freq[i])])


def write_histogram_csv(hist: dict[int, int], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["labels_per_pair", "pairs"])
        for k, v in sorted(hist.items()):
            w.writerow([k, v])


def _fmt(v: float) -> str:
    if np.isnan(v):
        return ""
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))
