"""Transformer encoder returning hidden states and last-layer attention.

``ToyEncoder`` is a small pre-norm transformer trainable on a CPU. Any other
module honoring the same call contract (``EncoderAdapter``) can replace it,
e.g. a pretrained model wrapped by ``HuggingFaceAdapter``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Protocol

import torch
from torch import Tensor, nn

from .corpus import LABEL_SEGMENT

CHECKPOINT_FORMAT = "relcorrel-parameters"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 256
    max_length: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_dim", "max_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class EncoderOutput:
    hidden: Tensor  # [B, L, d]
    attention: Tensor  # [B, heads, L, L], post-softmax, pre-dropout


class EncoderAdapter(Protocol):
    def __call__(self, input_ids: Tensor, position_ids: Tensor, attention_mask: Tensor) -> EncoderOutput: ...


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, key_mask: Tensor, bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
        b, n, d = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if bias is not None:
            scores = scores + bias
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        probs = scores.softmax(dim=-1)
        ctx = (self.dropout(probs) @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(ctx), probs


class EncoderBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.ln_attn = nn.LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln_ffn = nn.LayerNorm(cfg.d_model)
        self.ffn = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.ffn_dim),
            nn.GELU(),
            nn.Linear(cfg.ffn_dim, cfg.d_model),
        )
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, key_mask: Tensor, bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
        h, probs = self.attn(self.ln_attn(x), key_mask, bias)
        x = x + self.dropout(h)
        x = x + self.dropout(self.ffn(self.ln_ffn(x)))
        return x, probs


def sinusoidal_positions(length: int, dim: int) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table.float()


def relative_buckets(position_ids: Tensor, max_distance: int) -> Tensor:
    """[B, L] positions -> [B, L, L] bucket ids for the relative attention bias.

    Distances are clipped to ``max_distance``; any pair touching a relation
    slot falls into one extra bucket.
    """
    rel = (position_ids[:, None, :] - position_ids[:, :, None]).clamp(-max_distance, max_distance) + max_distance
    label = (position_ids == LABEL_SEGMENT)
    either = label[:, :, None] | label[:, None, :]
    return torch.where(either, torch.full_like(rel, 2 * max_distance + 1), rel)


class ToyEncoder(nn.Module):
    """Pre-norm transformer with learned positions (sinusoidal initialization)
    and a learned per-head relative-distance attention bias shared by all layers.

    All relation slots share one positional embedding (row ``max_length``
    of the position table) and one relative bucket, so the order of the
    relation list carries no information.
    """

    max_distance = 8

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_length + 1, cfg.d_model)
        self.emb_dropout = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_final = nn.LayerNorm(cfg.d_model)
        self.rel_bias = nn.Embedding(2 * self.max_distance + 2, cfg.n_heads)
        with torch.no_grad():
            # locality prior: head h starts with slope 2^-(h+1) per token of distance
            dist = torch.arange(-self.max_distance, self.max_distance + 1).abs().float()
            slopes = 2.0 ** -torch.arange(1, cfg.n_heads + 1).float()
            self.rel_bias.weight[:-1] = -dist[:, None] * slopes[None, :]
            self.rel_bias.weight[-1] = 0.0
        with torch.no_grad():
            self.pos_emb.weight[: cfg.max_length] = sinusoidal_positions(cfg.max_length, cfg.d_model)

    def forward(self, input_ids: Tensor, position_ids: Tensor, attention_mask: Tensor) -> EncoderOutput:
        cfg = self.config
        if input_ids.shape[-1] > cfg.max_length:
            raise ValueError(f"input length {input_ids.shape[-1]} exceeds max length {cfg.max_length}")
        if input_ids.numel() and (int(input_ids.max()) >= cfg.vocab_size or int(input_ids.min()) < 0):
            raise ValueError("token id outside the vocabulary")
        pos = torch.where(position_ids == LABEL_SEGMENT, torch.full_like(position_ids, cfg.max_length), position_ids)
        key_mask = attention_mask.bool()
        x = self.emb_dropout(self.tok_emb(input_ids) + self.pos_emb(pos))
        bias = self.rel_bias(relative_buckets(position_ids, self.max_distance)).permute(0, 3, 1, 2)
        probs = None
        for block in self.blocks:
            x, probs = block(x, key_mask, bias)
        return EncoderOutput(self.ln_final(x), probs)


class HuggingFaceAdapter(nn.Module):
    """Wrap a transformers encoder (built with eager attention) into the encoder contract.

    The wrapped model must already have embedding rows for the relation
    tokens. Positions are the model's own; relation slots are not tied.
    """

    def __init__(self, model: nn.Module):
        super().__init__()
        self.model = model

    def forward(self, input_ids: Tensor, position_ids: Tensor, attention_mask: Tensor) -> EncoderOutput:
        out = self.model(input_ids=input_ids, attention_mask=attention_mask, output_attentions=True)
        return EncoderOutput(out.last_hidden_state, out.attentions[-1])


def init_parameters(config: EncoderConfig, seed: int) -> ToyEncoder:
    """Build a ``ToyEncoder`` whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyEncoder(config)


def encode(encoder: EncoderAdapter, batch: dict[str, Tensor]) -> EncoderOutput:
    return encoder(batch["input_ids"], batch["position_ids"], batch["attention_mask"])


def save_parameters(path: str | Path, config: dict[str, Any], tensors: dict[str, Tensor], **extra: Any) -> None:
    """Single-file checkpoint: format tag, version, config and named tensors."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "tensors": {k: v.detach().cpu().clone() for k, v in tensors.items()},
        "extra": extra,
    }
    torch.save(payload, path)


def load_parameters(path: str | Path) -> dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def encoder_config_dict(cfg: EncoderConfig) -> dict[str, Any]:
    return asdict(cfg)
