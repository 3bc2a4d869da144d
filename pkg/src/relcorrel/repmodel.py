"""Entity-pair features and the grouped bilinear relation scorer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .batching import PreparedDocument
from .encoder import EncoderAdapter, EncoderOutput

NORM_EPS = 1e-12


def pool_entity(hidden: Tensor, positions: Sequence[int] | Tensor) -> Tensor:
    """Log-sum-exp over the mention rows of ``hidden``."""
    positions = torch.as_tensor(positions, dtype=torch.long)
    if positions.numel() == 0:
        raise ValueError("entity has no mention positions")
    return torch.logsumexp(hidden[positions], dim=0)


def entity_attention(attention: Tensor, positions: Sequence[int] | Tensor) -> Tensor:
    """Mean over mentions of the per-head attention rows: [heads, L, L] -> [heads, L]."""
    positions = torch.as_tensor(positions, dtype=torch.long)
    if positions.numel() == 0:
        raise ValueError("entity has no mention positions")
    return attention[:, positions, :].mean(dim=1)


def sum_normalize(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """x / sum(x) along the last axis; rows summing below ``eps`` become uniform."""
    total = x.sum(dim=-1, keepdim=True)
    degenerate = total < eps
    uniform = torch.full_like(x, 1.0 / x.shape[-1])
    return torch.where(degenerate, uniform, x / torch.where(degenerate, torch.ones_like(total), total))


def _aggregate(values: Tensor, att_s: Tensor, att_o: Tensor) -> Tensor:
    # att_*: [..., heads, n]; values: [n, d]
    weights = sum_normalize((att_s * att_o).sum(dim=-2))
    return weights @ values


def context_vector(h_doc: Tensor, att_s: Tensor, att_o: Tensor) -> Tensor:
    """Attention-weighted document context for an entity pair.

    ``att_s``/``att_o`` are [..., heads, n] slices over document positions.
    """
    return _aggregate(h_doc, att_s, att_o)


def relation_aggregated_embedding(h_rel: Tensor, att_rs: Tensor, att_ro: Tensor) -> Tensor:
    """Relation embeddings weighted by the pair's token-to-relation attention."""
    return _aggregate(h_rel, att_rs, att_ro)


def grouped_bilinear(f_s: Tensor, f_o: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """sum_i f_s^i . W_r^i . f_o^i + b_r for every relation r.

    f_s, f_o: [P, d]; weight: [R, k, d/k, d/k]; bias: [R] -> [P, R].
    """
    r, k, g, _ = weight.shape
    if f_s.shape[-1] != k * g or f_o.shape[-1] != k * g:
        raise ValueError(f"feature width {f_s.shape[-1]} does not match {k} groups of {g}")
    fs = f_s.reshape(-1, k, g)
    fo = f_o.reshape(-1, k, g)
    return torch.einsum("pki,rkij,pkj->pr", fs, weight, fo) + bias


class PairClassifier(nn.Module):
    """Fuses entity embeddings with pair context, then scores with a grouped bilinear form.

    With ``use_correlation`` the context is [c; r_so] and the fusion maps
    are 2d -> d; otherwise only c enters through d -> d maps.
    """

    def __init__(self, d_model: int, num_relations: int, groups: int, use_correlation: bool = True):
        super().__init__()
        if d_model % groups:
            raise ValueError(f"d_model={d_model} not divisible by groups={groups}")
        self.use_correlation = use_correlation
        self.groups = groups
        ctx_dim = 2 * d_model if use_correlation else d_model
        self.w_s = nn.Linear(d_model, d_model, bias=False)
        self.w_o = nn.Linear(d_model, d_model, bias=False)
        self.w_ctx_s = nn.Linear(ctx_dim, d_model, bias=False)
        self.w_ctx_o = nn.Linear(ctx_dim, d_model, bias=False)
        g = d_model // groups
        bound = 1.0 / (groups * g * g) ** 0.5
        self.bilinear = nn.Parameter(torch.empty(num_relations, groups, g, g).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(num_relations))

    def forward(self, h_s: Tensor, h_o: Tensor, c: Tensor, r_so: Tensor | None = None) -> Tensor:
        if self.use_correlation:
            if r_so is None:
                raise ValueError("correlation-augmented classifier needs relation-aggregated embeddings")
            ctx = torch.cat([c, r_so], dim=-1)
        else:
            ctx = c
        f_s = torch.tanh(self.w_s(h_s) + self.w_ctx_s(ctx))
        f_o = torch.tanh(self.w_o(h_o) + self.w_ctx_o(ctx))
        return grouped_bilinear(f_s, f_o, self.bilinear, self.bias)


def pair_logits(
    h_s: Tensor,
    h_o: Tensor,
    c: Tensor,
    r_so: Tensor | None,
    params: PairClassifier,
    use_correlation: bool,
) -> Tensor:
    if use_correlation != params.use_correlation:
        raise ValueError("classifier was built for a different correlation setting")
    return params(h_s, h_o, c, r_so if use_correlation else None)


@dataclass
class PairFeatures:
    h_s: Tensor  # [P, d]
    h_o: Tensor
    c: Tensor
    r_so: Tensor
    logits: Tensor  # [P, R]
    relation_embeddings: Tensor  # [R, d], this document's relation-token states


def document_pair_features(
    hidden: Tensor, attention: Tensor, item: PreparedDocument, classifier: PairClassifier
) -> PairFeatures:
    """Features and logits for every ordered entity pair of one document.

    hidden: [L, d], attention: [heads, L, L] (padding beyond the document is ignored).
    """
    idx, mask = item.marker_index, item.marker_mask
    mentions = hidden[idx]  # [p, m, d]
    mentions = mentions.masked_fill(~mask[..., None], float("-inf"))
    entity_emb = torch.logsumexp(mentions, dim=1)  # [p, d]

    rows = attention[:, idx, :]  # [heads, p, m, L]
    weights = mask.to(rows.dtype)[None, :, :, None]
    ent_att = (rows * weights).sum(dim=2) / weights.sum(dim=2)  # [heads, p, L]
    ent_att = ent_att.transpose(0, 1)  # [p, heads, L]

    d0, d1 = item.joint.doc_span
    rel_pos = item.joint.relation_positions
    r0, r1 = rel_pos[0], rel_pos[-1] + 1
    a_s, a_o = ent_att[item.heads], ent_att[item.tails]  # [P, heads, L]
    c = context_vector(hidden[d0:d1], a_s[..., d0:d1], a_o[..., d0:d1])
    h_rel = hidden[r0:r1]
    r_so = relation_aggregated_embedding(h_rel, a_s[..., r0:r1], a_o[..., r0:r1])
    h_s, h_o = entity_emb[item.heads], entity_emb[item.tails]
    logits = classifier(h_s, h_o, c, r_so if classifier.use_correlation else None)
    return PairFeatures(h_s, h_o, c, r_so, logits, h_rel)


class DocREModel(nn.Module):
    """Shared encoder over the joint input plus the pair classifier."""

    def __init__(self, encoder: nn.Module, classifier: PairClassifier):
        super().__init__()
        self.encoder = encoder
        self.classifier = classifier

    def forward(self, batch: dict[str, Tensor], items: Sequence[PreparedDocument]) -> list[PairFeatures]:
        out: EncoderOutput = self.encoder(batch["input_ids"], batch["position_ids"], batch["attention_mask"])
        return [
            document_pair_features(out.hidden[b], out.attention[b], item, self.classifier)
            for b, item in enumerate(items)
        ]
