"""Turn documents into padded tensor batches for the encoder and pair scorer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .corpus import (
    Document,
    JointInput,
    TokenMapper,
    build_joint_input,
    enumerate_entity_pairs,
    insert_mention_markers,
)


@dataclass
class PreparedDocument:
    doc: Document
    joint: JointInput
    heads: Tensor  # [P] long
    tails: Tensor  # [P] long
    labels: Tensor  # [P, R] float, multi-hot
    marker_index: Tensor  # [p, max mentions] long, padded with 0
    marker_mask: Tensor  # [p, max mentions] bool

    @property
    def num_pairs(self) -> int:
        return self.heads.numel()

    @property
    def non_na(self) -> Tensor:
        return self.labels.sum(dim=1) > 0


def prepare_document(
    doc: Document,
    tokenizer: TokenMapper,
    num_relations: int,
    max_length: int,
    strict: bool = False,
) -> PreparedDocument:
    marked = insert_mention_markers(doc, tokenizer)
    joint = build_joint_input(marked, num_relations, tokenizer, max_length, strict=strict)
    pairs = enumerate_entity_pairs(doc)
    labels = torch.zeros(len(pairs), num_relations)
    for i, (_, _, rels) in enumerate(pairs):
        for r in rels:
            labels[i, r] = 1.0
    width = max((len(m) for m in joint.entity_markers), default=1)
    index = torch.zeros(len(joint.entity_markers), width, dtype=torch.long)
    mask = torch.zeros(len(joint.entity_markers), width, dtype=torch.bool)
    for e, positions in enumerate(joint.entity_markers):
        index[e, : len(positions)] = torch.tensor(positions)
        mask[e, : len(positions)] = True
    return PreparedDocument(
        doc=doc,
        joint=joint,
        heads=torch.tensor([h for h, _, _ in pairs], dtype=torch.long),
        tails=torch.tensor([t for _, t, _ in pairs], dtype=torch.long),
        labels=labels,
        marker_index=index,
        marker_mask=mask,
    )


def prepare_dataset(
    docs: Sequence[Document],
    tokenizer: TokenMapper,
    num_relations: int,
    max_length: int,
    strict: bool = False,
) -> list[PreparedDocument]:
    return [prepare_document(d, tokenizer, num_relations, max_length, strict) for d in docs]


def collate(items: Sequence[PreparedDocument], pad_id: int = 0) -> dict[str, Tensor]:
    length = max(it.joint.length for it in items)
    input_ids = torch.full((len(items), length), pad_id, dtype=torch.long)
    position_ids = torch.zeros((len(items), length), dtype=torch.long)
    attention_mask = torch.zeros((len(items), length), dtype=torch.bool)
    for b, it in enumerate(items):
        n = it.joint.length
        input_ids[b, :n] = torch.tensor(it.joint.token_ids)
        position_ids[b, :n] = torch.tensor(it.joint.position_ids)
        attention_mask[b, :n] = True
    return {"input_ids": input_ids, "position_ids": position_ids, "attention_mask": attention_mask}


def batches(items: Sequence[PreparedDocument], batch_size: int, order: Sequence[int] | None = None):
    order = list(range(len(items))) if order is None else list(order)
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start : start + batch_size]]
