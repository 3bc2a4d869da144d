"""Losses, optimization loop, threshold selection and model checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .batching import PreparedDocument, batches, collate, prepare_dataset
from .cooccur import CooccurHead, build_crcp_examples, build_frcp_examples, cooccur_loss, examples_to_json
from .corpus import Document, RelationSchema, Vocab
from .encoder import EncoderConfig, init_parameters, load_parameters, save_parameters
from .evaluator import Triplet, gold_triplets, micro_f1
from .repmodel import DocREModel, PairClassifier

logger = logging.getLogger(__name__)

DEFAULT_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainingConfig:
    batch_size: int = 4
    epochs: int = 50
    lr_encoder: float = 5e-5
    lr_other: float = 1e-4
    warmup_ratio: float = 0.06
    alpha: float = 0.7
    beta: float = 0.5
    neg_per_pos_coarse: int = 1
    neg_per_pos_fine: int = 1
    threshold_grid: tuple[float, ...] = DEFAULT_GRID
    seed: int = 0
    use_correlation: bool = True
    use_crcp: bool = True
    use_frcp: bool = True
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    keep_best: bool = True  # restore the best-dev weights after training
    # model shape
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 256
    dropout: float = 0.1
    groups: int = 8
    max_length: int = 512
    strict_length: bool = False

    def __post_init__(self):
        self.threshold_grid = tuple(float(x) for x in self.threshold_grid)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.lr_encoder <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if not self.threshold_grid or not all(0.0 < t < 1.0 for t in self.threshold_grid):
            raise ValueError("threshold grid must be a non-empty subset of (0, 1)")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainingConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["threshold_grid"] = list(self.threshold_grid)
        return d

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            ffn_dim=self.ffn_dim,
            max_length=self.max_length,
            dropout=self.dropout,
        )

    @property
    def effective_alpha(self) -> float | None:
        """Weight of the coarse loss inside the subtask mix; None when both subtasks are off."""
        if self.use_crcp and self.use_frcp:
            return self.alpha
        if self.use_crcp:
            return 1.0
        if self.use_frcp:
            return 0.0
        return None


# ---------------------------------------------------------------------------
# losses


def re_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Sigmoid BCE summed over relations, averaged over entity pairs."""
    if logits.shape != labels.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} differ")
    if logits.shape[0] == 0:
        return logits.sum()
    return F.binary_cross_entropy_with_logits(logits, labels, reduction="sum") / logits.shape[0]


def combine_losses(l_re, l_coarse, l_fine, alpha: float, beta: float):
    """(1 + b^2) L_re L_col / (b^2 L_col + L_re) with L_col = a L_coarse + (1 - a) L_fine.

    Evaluated as the smaller loss plus a non-negative correction, an identical
    quantity that avoids cancellation and returns L_re bit-for-bit when the two
    losses are equal. Both-zero inputs give 0, the limit of the expression.
    """
    l_col = alpha * l_coarse + (1.0 - alpha) * l_fine
    b2 = beta * beta
    denom = b2 * l_col + l_re
    if _scalar(denom) == 0.0:
        return 0.0 * (l_re + l_col)
    # each branch divides by denom first; the quotient lies in [0, 1]
    if _scalar(l_re) <= _scalar(l_col):
        return l_re + (l_re / denom) * (l_col - l_re)
    return l_col + b2 * l_col * ((l_re - l_col) / denom)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, Tensor) else float(x)


def lr_multiplier(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to 1 over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if step < warmup_steps:
        return step / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0 if step < total_steps else 0.0
    return max(0.0, (total_steps - step) / (total_steps - warmup_steps))


@dataclass
class BatchLoss:
    total: Tensor
    re: Tensor
    coarse: Tensor
    fine: Tensor
    col: Tensor
    examples: list = field(default_factory=list)


class CorrelationObjective(nn.Module):
    """Main RE loss plus the two co-occurrence subtasks, each with its own head."""

    def __init__(self, d_model: int):
        super().__init__()
        self.coarse_head = CooccurHead(d_model)
        self.fine_head = CooccurHead(d_model)

    def forward(self, features, items: Sequence[PreparedDocument], cfg: TrainingConfig, rng: np.random.Generator):
        logits = torch.cat([f.logits for f in features])
        labels = torch.cat([it.labels for it in items]).to(logits.dtype)
        l_re = re_loss(logits, labels)
        zero = l_re.new_zeros(())
        coarse, fine = [], []
        all_examples = []
        for feat, it in zip(features, items):
            if cfg.use_crcp:
                ex = build_crcp_examples(it.doc.relation_set, it.labels.shape[1], cfg.neg_per_pos_coarse, rng)
                if ex:
                    coarse.append(cooccur_loss(ex, feat.relation_embeddings, self.coarse_head))
                    all_examples.append((it.doc.id, ex))
            if cfg.use_frcp:
                ex = build_frcp_examples(it.non_na, cfg.neg_per_pos_fine, rng)
                if ex:
                    fine.append(cooccur_loss(ex, feat.r_so, self.fine_head))
                    all_examples.append((it.doc.id, ex))
        l_coarse = torch.stack(coarse).sum() / len(coarse) if coarse else zero
        l_fine = torch.stack(fine).sum() / len(fine) if fine else zero
        alpha = cfg.effective_alpha
        if alpha is None or not (coarse or fine):
            return BatchLoss(l_re, l_re, l_coarse, l_fine, zero, all_examples)
        l_col = alpha * l_coarse + (1.0 - alpha) * l_fine
        total = combine_losses(l_re, l_coarse, l_fine, alpha, cfg.beta)
        return BatchLoss(total, l_re, l_coarse, l_fine, l_col, all_examples)


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class TrainedModel:
    model: DocREModel
    objective: CorrelationObjective
    vocab: Vocab
    schema: RelationSchema
    config: TrainingConfig
    threshold: float
    history: list[dict[str, Any]] = field(default_factory=list)
    relation_embeddings: np.ndarray | None = None

    def prepare(self, docs: Sequence[Document]) -> list[PreparedDocument]:
        return prepare_dataset(docs, self.vocab, len(self.schema), self.config.max_length, self.config.strict_length)

    def scores(self, docs: Sequence[Document]) -> list[Tensor]:
        return predict_scores(self.model, self.prepare(docs), self.config.batch_size)

    def predict(self, docs: Sequence[Document], threshold: float | None = None) -> list[dict[str, Any]]:
        """DocRED leaderboard rows: title, h_idx, t_idx, r, score."""
        thr = self.threshold if threshold is None else threshold
        items = self.prepare(docs)
        rows = []
        for it, probs in zip(items, predict_scores(self.model, items, self.config.batch_size)):
            for p, r in (probs > thr).nonzero().tolist():
                rows.append(
                    {
                        "title": it.doc.id,
                        "h_idx": int(it.heads[p]),
                        "t_idx": int(it.tails[p]),
                        "r": self.schema.ids[r],
                        "score": float(probs[p, r]),
                    }
                )
        return rows

    def save(self, path: str | Path) -> None:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"objective.{k}": v for k, v in self.objective.state_dict().items()})
        if self.relation_embeddings is not None:
            tensors["relation_embeddings"] = torch.from_numpy(np.ascontiguousarray(self.relation_embeddings))
        config = {
            "training": self.config.to_dict(),
            "vocab": self.vocab.to_dict(),
            "schema": {"ids": list(self.schema.ids), "names": list(self.schema.names)},
        }
        save_parameters(path, config, tensors, threshold=self.threshold, history=self.history)

    @classmethod
    def load(cls, path: str | Path) -> TrainedModel:
        payload = load_parameters(path)
        cfg = TrainingConfig.from_dict(payload["config"]["training"])
        vocab = Vocab.from_dict(payload["config"]["vocab"])
        s = payload["config"]["schema"]
        schema = RelationSchema(tuple(s["ids"]), tuple(s["names"]))
        model, objective = build_model(cfg, len(vocab), len(schema), seed=cfg.seed)
        tensors = payload["tensors"]
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        objective.load_state_dict({k[10:]: v for k, v in tensors.items() if k.startswith("objective.")})
        rel = tensors.get("relation_embeddings")
        return cls(
            model,
            objective,
            vocab,
            schema,
            cfg,
            payload["extra"]["threshold"],
            list(payload["extra"].get("history", [])),
            None if rel is None else rel.numpy(),
        )


def build_model(cfg: TrainingConfig, vocab_size: int, num_relations: int, seed: int) -> tuple[DocREModel, CorrelationObjective]:
    encoder = init_parameters(cfg.encoder_config(vocab_size), seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        classifier = PairClassifier(cfg.d_model, num_relations, cfg.groups, cfg.use_correlation)
        objective = CorrelationObjective(cfg.d_model)
    return DocREModel(encoder, classifier), objective


# ---------------------------------------------------------------------------
# inference and threshold search


@torch.no_grad()
def predict_scores(model: DocREModel, items: Sequence[PreparedDocument], batch_size: int = 4) -> list[Tensor]:
    """Sigmoid probabilities [pairs, relations] per document."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for chunk in batches(items, batch_size):
            for feat in model(collate(chunk), chunk):
                out.append(torch.sigmoid(feat.logits).float())
    finally:
        model.train(was_training)
    return out


def decide(items: Sequence[PreparedDocument], scores: Sequence[Tensor], threshold: float) -> set[Triplet]:
    pred = set()
    for it, probs in zip(items, scores):
        for p, r in (probs > threshold).nonzero().tolist():
            pred.add((it.doc.id, int(it.heads[p]), int(it.tails[p]), r))
    return pred


def best_threshold(
    items: Sequence[PreparedDocument], scores: Sequence[Tensor], gold: set[Triplet], grid: Sequence[float]
) -> tuple[float, float]:
    """Grid value with the highest micro F1 (ties go to the smallest value) and that F1."""
    if not grid:
        raise ValueError("threshold grid is empty")
    best_t, best_f1 = None, -1.0
    for t in sorted(grid):
        f1 = micro_f1(decide(items, scores, t), gold)[2]
        if f1 > best_f1:
            best_t, best_f1 = t, f1
    return best_t, best_f1


def select_threshold(trained: TrainedModel, dev_docs: Sequence[Document], grid: Sequence[float] | None = None) -> float:
    items = trained.prepare(dev_docs)
    scores = predict_scores(trained.model, items, trained.config.batch_size)
    grid = trained.config.threshold_grid if grid is None else grid
    return best_threshold(items, scores, gold_triplets(dev_docs), grid)[0]


@torch.no_grad()
def mean_relation_embeddings(model: DocREModel, items: Sequence[PreparedDocument], batch_size: int = 4) -> np.ndarray:
    """Relation-token states averaged over documents: [R, d]."""
    was_training = model.training
    model.eval()
    total, n = None, 0
    try:
        for chunk in batches(items, batch_size):
            for feat in model(collate(chunk), chunk):
                emb = feat.relation_embeddings.double()
                total = emb if total is None else total + emb
                n += 1
    finally:
        model.train(was_training)
    return (total / n).numpy()


# ---------------------------------------------------------------------------
# training loop


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def train(
    train_docs: Sequence[Document],
    dev_docs: Sequence[Document],
    schema: RelationSchema,
    config: TrainingConfig,
    vocab: Vocab | None = None,
    on_epoch: Callable[[dict[str, Any]], None] | None = None,
    example_sink: list | None = None,
) -> TrainedModel:
    """Train with AdamW (two learning-rate groups), linear warmup/decay and dev-F1 model selection.

    ``example_sink`` collects the co-occurrence examples built in the first
    epoch, for debugging.
    """
    if not train_docs or not dev_docs:
        raise ValueError("train and dev splits must be non-empty")
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)
    vocab = vocab or Vocab.build(train_docs, len(schema))
    model, objective = build_model(config, len(vocab), len(schema), config.seed)
    trained = TrainedModel(model, objective, vocab, schema, config, threshold=config.threshold_grid[0])
    train_items = trained.prepare(train_docs)
    dev_items = trained.prepare(dev_docs)
    dev_gold = gold_triplets(dev_docs)

    encoder_params = list(model.encoder.parameters())
    other_params = list(model.classifier.parameters()) + list(objective.parameters())
    optimizer = torch.optim.AdamW(
        [{"params": encoder_params, "lr": config.lr_encoder}, {"params": other_params, "lr": config.lr_other}],
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = math.ceil(len(train_items) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup_steps = int(config.warmup_ratio * total_steps)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda s: lr_multiplier(s, warmup_steps, total_steps)
    )

    best_state, best_f1 = None, -1.0
    if config.epochs == 0:
        scores = predict_scores(model, dev_items, config.batch_size)
        trained.threshold, _ = best_threshold(dev_items, scores, dev_gold, config.threshold_grid)

    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        objective.train()
        sums = {"L_re": 0.0, "L_coarse": 0.0, "L_fine": 0.0, "L_col": 0.0, "L": 0.0}
        order = rng.permutation(len(train_items))
        for chunk in batches(train_items, config.batch_size, order):
            features = model(collate(chunk), chunk)
            loss = objective(features, chunk, config, rng)
            if not torch.isfinite(loss.total):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch} step {step}: L={float(loss.total)} "
                    f"L_re={float(loss.re)} L_coarse={float(loss.coarse)} L_fine={float(loss.fine)}"
                )
            if example_sink is not None and epoch == 1:
                example_sink.extend(
                    {"title": title, **e} for title, exs in loss.examples for e in examples_to_json(exs)
                )
            optimizer.zero_grad()
            loss.total.backward()
            torch.nn.utils.clip_grad_norm_(encoder_params + other_params, config.max_grad_norm)
            optimizer.step()
            scheduler.step()
            step += 1
            for key, val in zip(sums, (loss.re, loss.coarse, loss.fine, loss.col, loss.total)):
                sums[key] += float(val.detach()) if isinstance(val, Tensor) else float(val)

        scores = predict_scores(model, dev_items, config.batch_size)
        thr, dev_f1 = best_threshold(dev_items, scores, dev_gold, config.threshold_grid)
        record = {k: v / steps_per_epoch for k, v in sums.items()}
        record = {
            "epoch": epoch,
            **record,
            "alpha": config.effective_alpha,
            "dev_F1": dev_f1,
            "threshold": thr,
            "lr": optimizer.param_groups[1]["lr"],
        }
        trained.history.append(record)
        logger.info(json.dumps(record))
        if on_epoch is not None:
            on_epoch(record)
        if dev_f1 > best_f1:
            best_f1 = dev_f1
            best_state = (copy.deepcopy(model.state_dict()), copy.deepcopy(objective.state_dict()), thr)
    if not config.keep_best and trained.history:
        trained.threshold = trained.history[-1]["threshold"]

    if best_state is not None and config.keep_best:
        model.load_state_dict(best_state[0])
        objective.load_state_dict(best_state[1])
        trained.threshold = best_state[2]
    trained.relation_embeddings = mean_relation_embeddings(model, train_items, config.batch_size)
    model.eval()
    return trained
