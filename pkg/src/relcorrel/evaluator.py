"""Relation extraction metrics: micro/Ign F1, long-tail Macro@K, multi-label F1, Welch t-test.

Triplets are ``(doc_id, head, tail, relation)`` tuples; prediction and gold
collections are treated as sets.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Sequence

from scipy import stats

from .corpus import Document

Triplet = tuple[Hashable, int, int, int]


class UndefinedMetric(Exception):
    """Raised when a metric has empty support; ``reason`` is machine-readable."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(reason)


def _prf(n_pred: int, n_gold: int, n_correct: int) -> tuple[float, float, float]:
    p = n_correct / n_pred if n_pred else 0.0
    r = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def micro_f1(pred: Iterable[Triplet], gold: Iterable[Triplet]) -> tuple[float, float, float]:
    pred, gold = set(pred), set(gold)
    return _prf(len(pred), len(gold), len(pred & gold))


def train_fact_keys(train_docs: Iterable[Document]) -> set[tuple[str, str, int]]:
    """Expand every train fact to all (head name, tail name, relation) combinations."""
    keys = set()
    for doc in train_docs:
        for f in doc.facts:
            for hn in doc.entities[f.head].names:
                for tn in doc.entities[f.tail].names:
                    keys.add((hn, tn, f.relation))
    return keys


def entity_name_index(docs: Iterable[Document]) -> dict[tuple[Hashable, int], frozenset[str]]:
    return {(doc.id, i): ent.names for doc in docs for i, ent in enumerate(doc.entities)}


def _in_train(t: Triplet, train_keys: set, names: Mapping) -> bool:
    doc_id, h, tl, r = t
    hn, tn = names.get((doc_id, h), ()), names.get((doc_id, tl), ())
    return any((a, b, r) in train_keys for a in hn for b in tn)


def ign_f1(
    pred: Iterable[Triplet],
    gold: Iterable[Triplet],
    train_keys: set[tuple[str, str, int]],
    entity_names: Mapping[tuple[Hashable, int], frozenset[str]],
) -> float:
    """Micro F1 after dropping, from both sides, facts also present in train.

    Entities match across splits when their mention-name sets intersect.
    """
    pred = {t for t in pred if not _in_train(t, train_keys, entity_names)}
    gold = {t for t in gold if not _in_train(t, train_keys, entity_names)}
    if not gold:
        raise UndefinedMetric("no gold triplets remain after removing train overlap")
    return micro_f1(pred, gold)[2]


def per_relation_f1(pred: Iterable[Triplet], gold: Iterable[Triplet]) -> dict[int, float]:
    """F1 for every relation appearing in gold."""
    by_pred: dict[int, set] = defaultdict(set)
    by_gold: dict[int, set] = defaultdict(set)
    for t in set(pred):
        by_pred[t[3]].add(t)
    for t in set(gold):
        by_gold[t[3]].add(t)
    return {r: micro_f1(by_pred.get(r, ()), g)[2] for r, g in by_gold.items()}


def macro_at_k(
    pred: Iterable[Triplet], gold: Iterable[Triplet], train_freq: Sequence[int], k: float
) -> float:
    """Mean per-relation F1 over gold relations with fewer than ``k`` train triplets."""
    if k <= 0:
        raise ValueError("K must be positive")
    scores = [f for r, f in per_relation_f1(pred, gold).items() if train_freq[r] < k]
    if not scores:
        raise UndefinedMetric(f"no gold relation with train frequency below {k}")
    return sum(scores) / len(scores)


def macro_f1(pred: Iterable[Triplet], gold: Iterable[Triplet]) -> float:
    scores = list(per_relation_f1(pred, gold).values())
    if not scores:
        raise UndefinedMetric("gold set is empty")
    return sum(scores) / len(scores)


def multilabel_f1_by_count(pred: Iterable[Triplet], gold: Iterable[Triplet], count: int) -> float:
    """Micro F1 restricted to entity pairs carrying exactly ``count`` gold labels."""
    if count < 2:
        raise ValueError("count must be at least 2")
    per_pair: dict[tuple, set] = defaultdict(set)
    for t in set(gold):
        per_pair[t[:3]].add(t)
    pairs = {p for p, ts in per_pair.items() if len(ts) == count}
    if not pairs:
        raise UndefinedMetric(f"no gold entity pair with exactly {count} labels")
    g = {t for p in pairs for t in per_pair[p]}
    pr = {t for t in set(pred) if t[:3] in pairs}
    return micro_f1(pr, g)[2]


def multilabel_macro_f1(pred: Iterable[Triplet], gold: Iterable[Triplet], counts: Sequence[int] = (2, 3, 4)) -> float:
    """Equal-weight mean over the label-count buckets that have support."""
    pred, gold = set(pred), set(gold)
    scores = []
    for c in counts:
        try:
            scores.append(multilabel_f1_by_count(pred, gold, c))
        except UndefinedMetric:
            continue
    if not scores:
        raise UndefinedMetric("no multi-label entity pairs in gold")
    return sum(scores) / len(scores)


def two_sided_t_test(runs_a: Sequence[float], runs_b: Sequence[float]) -> float:
    """Welch's unequal-variance two-sample t-test, two-sided p-value."""
    if len(runs_a) < 2 or len(runs_b) < 2:
        raise ValueError("need at least two runs per sample")
    na, nb = len(runs_a), len(runs_b)
    ma, mb = math.fsum(runs_a) / na, math.fsum(runs_b) / nb
    va = math.fsum((x - ma) ** 2 for x in runs_a) / (na - 1)
    vb = math.fsum((x - mb) ** 2 for x in runs_b) / (nb - 1)
    sa, sb = va / na, vb / nb
    if sa + sb == 0.0:
        return 1.0 if ma == mb else 0.0
    t = (ma - mb) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa**2 / (na - 1) + sb**2 / (nb - 1))
    return float(2.0 * stats.t.sf(abs(t), df))


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    ign_f1: float | None = None
    macro_f1: float | None = None
    macro_at_k: dict[str, float | None] = field(default_factory=dict)
    multilabel_f1: dict[str, float | None] = field(default_factory=dict)
    support: dict[str, int] = field(default_factory=dict)
    undefined: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ign_f1": self.ign_f1,
            "macro_f1": self.macro_f1,
            "macro_at_k": self.macro_at_k,
            "multilabel_f1": self.multilabel_f1,
            "support": self.support,
            "undefined": self.undefined,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _attempt(report: MetricReport, key: str, fn, *args):
    try:
        return fn(*args)
    except UndefinedMetric as exc:
        report.undefined[key] = exc.reason
        return None


def evaluate(
    pred: Iterable[Triplet],
    gold: Iterable[Triplet],
    train_docs: Sequence[Document] | None = None,
    gold_docs: Sequence[Document] | None = None,
    train_freq: Sequence[int] | None = None,
    k_list: Sequence[int] = (500, 200, 100),
    label_counts: Sequence[int] = (2, 3, 4),
) -> MetricReport:
    pred, gold = set(pred), set(gold)
    p, r, f1 = micro_f1(pred, gold)
    report = MetricReport(p, r, f1, support={"pred": len(pred), "gold": len(gold), "correct": len(pred & gold)})
    if train_docs is not None and gold_docs is not None:
        keys = train_fact_keys(train_docs)
        report.ign_f1 = _attempt(report, "ign_f1", ign_f1, pred, gold, keys, entity_name_index(gold_docs))
    else:
        report.undefined["ign_f1"] = "no training set supplied"
    report.macro_f1 = _attempt(report, "macro_f1", macro_f1, pred, gold)
    if train_freq is not None:
        for k in k_list:
            key = f"macro@{k}"
            report.macro_at_k[str(k)] = _attempt(report, key, macro_at_k, pred, gold, train_freq, k)
    for c in label_counts:
        report.multilabel_f1[str(c)] = _attempt(report, f"multilabel@{c}", multilabel_f1_by_count, pred, gold, c)
    report.multilabel_f1["macro"] = _attempt(report, "multilabel_macro", multilabel_macro_f1, pred, gold, label_counts)
    return report


def gold_triplets(docs: Iterable[Document]) -> set[Triplet]:
    return {(d.id, f.head, f.tail, f.relation) for d in docs for f in d.facts}
