"""Coarse (relation-level) and fine (entity-pair-level) co-occurrence prediction subtasks.

Examples are index-based: ``target`` and ``condition`` are rows of an
embedding table supplied at scoring time (relation-token states for the
coarse task, relation-aggregated pair embeddings for the fine task). This
keeps example construction independent of the autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

COARSE = "coarse"
FINE = "fine"


@dataclass(frozen=True)
class CooccurExample:
    target: int
    condition: tuple[int, ...]
    label: int  # 1 = co-occurs, 0 = does not
    grain: str

    def __post_init__(self):
        if not self.condition:
            raise ValueError("condition set must be non-empty")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


class CooccurHead(nn.Module):
    """Binary classifier over [target ; mean(condition)]."""

    def __init__(self, d_model: int):
        super().__init__()
        self.linear = nn.Linear(2 * d_model, 1)

    def forward(self, target: Tensor, condition_mean: Tensor) -> Tensor:
        return self.linear(torch.cat([target, condition_mean], dim=-1)).squeeze(-1)


def _sample(pool: Sequence[int], k: int, rng: np.random.Generator) -> list[int]:
    k = min(k, len(pool))
    if k == 0:
        return []
    return [int(x) for x in rng.choice(np.asarray(pool), size=k, replace=False)]


def build_crcp_examples(
    relation_set: Sequence[int] | frozenset[int],
    num_relations: int,
    neg_per_pos: int,
    rng: np.random.Generator,
) -> list[CooccurExample]:
    """One positive (r, R+ - {r}) per expressed relation, plus negatives (r-, R+ - {r}) with r- unexpressed."""
    expressed = sorted(relation_set)
    if len(expressed) < 2:
        return []
    present = set(expressed)
    absent = [r for r in range(num_relations) if r not in present]
    examples = []
    for r in expressed:
        cond = tuple(x for x in expressed if x != r)
        examples.append(CooccurExample(r, cond, 1, COARSE))
        for neg in _sample(absent, neg_per_pos, rng):
            examples.append(CooccurExample(neg, cond, 0, COARSE))
    return examples


def build_frcp_examples(
    non_na: Sequence[bool] | Tensor,
    neg_per_pos: int,
    rng: np.random.Generator,
) -> list[CooccurExample]:
    """Positives over non-NA pair representations; negatives swap in an NA pair's representation.

    ``non_na[i]`` flags whether pair ``i`` expresses any relation; indices
    refer to rows of the document's relation-aggregated embeddings.
    """
    flags = [bool(x) for x in (non_na.tolist() if isinstance(non_na, Tensor) else non_na)]
    pos = [i for i, f in enumerate(flags) if f]
    if len(pos) < 2:
        return []
    na = [i for i, f in enumerate(flags) if not f]
    examples = []
    for i in pos:
        cond = tuple(j for j in pos if j != i)
        examples.append(CooccurExample(i, cond, 1, FINE))
        for neg in _sample(na, neg_per_pos, rng):
            examples.append(CooccurExample(neg, cond, 0, FINE))
    return examples


def cooccur_logits(examples: Sequence[CooccurExample], embeddings: Tensor, head: CooccurHead) -> Tensor:
    targets = embeddings[torch.tensor([e.target for e in examples], dtype=torch.long)]
    member = torch.zeros(len(examples), embeddings.shape[0], dtype=embeddings.dtype)
    for i, e in enumerate(examples):
        member[i, list(e.condition)] = 1.0
    cond_mean = (member @ embeddings) / member.sum(dim=1, keepdim=True)
    return head(targets, cond_mean)


def cooccur_probability(examples: Sequence[CooccurExample], embeddings: Tensor, head: CooccurHead) -> Tensor:
    return torch.sigmoid(cooccur_logits(examples, embeddings, head))


def cooccur_loss(examples: Sequence[CooccurExample], embeddings: Tensor, head: CooccurHead) -> Tensor:
    """Binary cross-entropy summed over examples (zero when there are none)."""
    if not examples:
        return embeddings.new_zeros(())
    logits = cooccur_logits(examples, embeddings, head)
    labels = torch.tensor([float(e.label) for e in examples], dtype=logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, labels, reduction="sum")


def crcp_loss(examples: Sequence[CooccurExample], relation_embeddings: Tensor, head: CooccurHead) -> Tensor:
    return cooccur_loss(examples, relation_embeddings, head)


def frcp_loss(examples: Sequence[CooccurExample], pair_embeddings: Tensor, head: CooccurHead) -> Tensor:
    return cooccur_loss(examples, pair_embeddings, head)


def examples_to_json(examples: Sequence[CooccurExample]) -> list[dict]:
    return [{"grain": e.grain, "target": e.target, "condition": list(e.condition), "label": e.label} for e in examples]
