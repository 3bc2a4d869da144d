"""Synthetic DocRED-format corpus with planted relation co-occurrence.

Relations come in fixed partner pairs (0,1), (2,3), (4,5), (6,7): a document
expressing one member of a pair always expresses the other. Even relations
have their own trigger word. Odd relations share a trigger with another
odd relation (1 with 5, 3 with 7), so telling them apart requires knowing
which partner relation the document also expresses.
"""

from __future__ import annotations

from typing import Any

import numpy as np

NUM_RELATIONS = 8
PARTNERS = {0: 1, 1: 0, 2: 3, 3: 2, 4: 5, 5: 4, 6: 7, 7: 6}

_NAMES = [f"n{i:02d}" for i in range(20)]
_TRIGGERS = {0: "born", 2: "leads", 4: "wrote", 6: "joined", 1: "in", 5: "in", 3: "at", 7: "at"}
_FILLERS = [f"w{i:02d}" for i in range(73)]
_PERIOD = "."
VOCABULARY = sorted(set(_NAMES) | set(_TRIGGERS.values()) | set(_FILLERS) | {_PERIOD})

# pair groups that may share a document without making the shared triggers ambiguous
_COMPATIBLE = [(0,), (1,), (2,), (3,), (0, 1), (0, 3), (1, 2), (2, 3)]


def toy_schema() -> dict[str, str]:
    return {f"R{r}": f"relation {r} ({_TRIGGERS[r]})" for r in range(NUM_RELATIONS)}


def _sentence(rng: np.random.Generator, left: str, word: str, right: str) -> list[str]:
    pre = [str(w) for w in rng.choice(_FILLERS, size=rng.integers(0, 2))]
    mid = [str(w) for w in rng.choice(_FILLERS, size=rng.integers(0, 2))]
    post = [str(w) for w in rng.choice(_FILLERS, size=rng.integers(1, 3))]
    return [*pre, left, *mid, word, right, *post, _PERIOD]


def generate_document(rng: np.random.Generator, title: str, multi_label_rate: float = 0.3) -> dict[str, Any]:
    groups = _COMPATIBLE[rng.integers(len(_COMPATIBLE))]
    n_entities = int(rng.integers(1, 4)) + 4 * len(groups)
    names = [str(w) for w in rng.choice(_NAMES, size=n_entities, replace=False)]
    facts: list[tuple[int, int, int]] = []
    free = list(range(n_entities))
    rng.shuffle(free)
    for g in groups:
        even, odd = 2 * g, 2 * g + 1
        if rng.random() < multi_label_rate:
            h, t = free.pop(), free.pop()
            facts += [(h, t, even), (h, t, odd)]
        else:
            h1, t1, h2, t2 = (free.pop() for _ in range(4))
            facts += [(h1, t1, even), (h2, t2, odd)]

    # one trigger sentence per fact, order shuffled
    sentences: list[list[str]] = []
    mentions: dict[int, list[tuple[int, int]]] = {e: [] for e in range(n_entities)}

    def emit(h: int, word: str, t: int) -> None:
        sent = _sentence(rng, names[h], word, names[t])
        sid = len(sentences)
        sentences.append(sent)
        mentions[h].append((sid, sent.index(names[h])))
        mentions[t].append((sid, len(sent) - 1 - sent[::-1].index(names[t])))

    fact_order = rng.permutation(len(facts))
    for i in fact_order:
        h, t, r = facts[i]
        emit(h, _TRIGGERS[r], t)
    # distractor sentences: every entity is mentioned at least once, some twice
    for e in range(n_entities):
        if not mentions[e] or rng.random() < 0.3:
            other = int(rng.integers(n_entities - 1))
            other += other >= e
            emit(e, str(rng.choice(_FILLERS)), other)

    vertex_set = [
        [{"name": names[e], "sent_id": sid, "pos": [pos, pos + 1], "type": "ENT"} for sid, pos in sorted(mentions[e])]
        for e in range(n_entities)
    ]
    labels = [{"h": h, "t": t, "r": f"R{r}", "evidence": []} for h, t, r in facts]
    return {"title": title, "sents": sentences, "vertexSet": vertex_set, "labels": labels}


def generate_records(n_docs: int, seed: int, prefix: str = "doc") -> list[dict[str, Any]]:
    rng = np.random.default_rng(seed)
    return [generate_document(rng, f"{prefix}-{i:04d}") for i in range(n_docs)]


def toy_splits(seed: int = 0, n_train: int = 50, n_dev: int = 10) -> tuple[list[dict], list[dict]]:
    return generate_records(n_train, seed, "train"), generate_records(n_dev, seed + 10_000, "dev")
