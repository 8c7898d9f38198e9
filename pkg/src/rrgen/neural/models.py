"""Small pre-norm transformer encoder and encoder-decoder.

Architecture is written out by hand; torch supplies tensors and reverse-mode
gradients. Word-embedding outputs can be captured (for gradient readout) and
offset (for adversarial perturbations) without touching the embedding table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int | None = None
    dropout: float = 0.1
    pooling: str = "first_token"  # or "mean"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.pooling not in ("first_token", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_json_obj(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.ff_dim,
            "dropout": self.dropout,
            "pooling": self.pooling,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EncoderConfig":
        return cls(
            vocab_size=obj["vocab_size"],
            d_model=obj["d_model"],
            n_heads=obj["n_heads"],
            n_layers=obj["n_layers"],
            d_ff=obj.get("d_ff"),
            dropout=obj.get("dropout", 0.1),
            pooling=obj.get("pooling", "first_token"),
        )


def sinusoidal_positions(length: int, d_model: int, dtype: torch.dtype) -> Tensor:
    """Classic fixed sin/cos position table, shape [length, d_model]."""
    position = torch.arange(length, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, d_model, 2, dtype=dtype)
    div = torch.exp(-half * math.log(10000.0) / d_model)
    table = torch.zeros(length, d_model, dtype=dtype)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return x.view(b, length, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, query: Tensor, memory: Tensor, mask: Tensor | None = None) -> Tensor:
        """mask: bool, True = may attend, broadcastable to [B, H, Lq, Lk]."""
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(memory))
        v = self._split(self.v_proj(memory))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores.masked_fill(~mask, torch.finfo(scores.dtype).min / 2)
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = weights @ v
        b, _, lq, _ = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, lq, -1))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.w1 = nn.Linear(d_model, d_ff)
        self.w2 = nn.Linear(d_ff, d_model)

    def forward(self, x: Tensor) -> Tensor:
        return self.w2(torch.nn.functional.gelu(self.w1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor, mask: Tensor | None) -> Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.attn(h, h, mask))
        x = x + self.dropout(self.ff(self.norm2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)
        self.dropout = nn.Dropout(dropout)

    def forward(
        self, x: Tensor, memory: Tensor,
        self_mask: Tensor | None, memory_mask: Tensor | None,
    ) -> Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, self_mask))
        x = x + self.dropout(self.cross_attn(self.norm2(x), memory, memory_mask))
        x = x + self.dropout(self.ff(self.norm3(x)))
        return x


class _EmbeddingFrontend(nn.Module):
    """Embedding lookup + positional encoding with capture/offset hooks on the
    word-embedding output (the surface adversarial perturbations act on)."""

    def __init__(self, vocab_size: int, d_model: int, dropout: float):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, d_model)
        self.d_model = d_model
        self.dropout = nn.Dropout(dropout)
        self._captured: Tensor | None = None
        self._offset: Tensor | None = None

    def forward(self, ids: Tensor, capture_embed: bool = False) -> Tensor:
        tok = self.embedding(ids) * math.sqrt(self.d_model)
        if capture_embed:
            tok.retain_grad()
            self._captured = tok
        if self._offset is not None:
            tok = tok + self._offset
        pos = sinusoidal_positions(ids.shape[1], self.d_model, tok.dtype).to(ids.device)
        return self.dropout(tok + pos.unsqueeze(0))

    def captured_embedding_grad(self) -> Tensor:
        if self._captured is None:
            raise RuntimeError("no captured embeddings: run a forward pass with capture_embed=True")
        if self._captured.grad is None:
            raise RuntimeError("captured embeddings have no gradient: call backward() first")
        return self._captured.grad

    def set_offset(self, offset: Tensor) -> None:
        self._offset = offset

    def clear_offset(self) -> None:
        self._offset = None
        self._captured = None


def pad_key_mask(pad_mask: Tensor | None) -> Tensor | None:
    """[B, Lk] bool (True = real token) -> attention mask [B, 1, 1, Lk]."""
    if pad_mask is None:
        return None
    return pad_mask[:, None, None, :]


class TransformerEncoder(nn.Module):
    """Encoder with first-token or mean pooling; the dual-encoder and
    cross-encoder substrate."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.frontend = _EmbeddingFrontend(config.vocab_size, config.d_model, config.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.ff_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.final_norm = nn.LayerNorm(config.d_model)
        # BERT-style pooler head; keeps pooled dot products in a trainable range.
        self.pooler = nn.Linear(config.d_model, config.d_model)

    def forward(
        self,
        ids: Tensor,
        pad_mask: Tensor | None = None,
        capture_embed: bool = False,
    ) -> tuple[Tensor, Tensor]:
        """ids [B, L] -> (pooled [B, d], states [B, L, d])."""
        if ids.numel() == 0 or ids.shape[1] == 0:
            raise ValueError("cannot encode an empty id sequence")
        x = self.frontend(ids, capture_embed=capture_embed)
        mask = pad_key_mask(pad_mask)
        for layer in self.layers:
            x = layer(x, mask)
        x = self.final_norm(x)
        if self.config.pooling == "first_token":
            reduced = x[:, 0]
        else:
            if pad_mask is None:
                reduced = x.mean(dim=1)
            else:
                keep = pad_mask.unsqueeze(-1).to(x.dtype)
                reduced = (x * keep).sum(dim=1) / keep.sum(dim=1).clamp(min=1.0)
        pooled = torch.tanh(self.pooler(reduced))
        return pooled, x

    def captured_embedding_grad(self) -> Tensor:
        return self.frontend.captured_embedding_grad()

    def set_embed_offset(self, offset: Tensor) -> None:
        self.frontend.set_offset(offset)

    def clear_embed_offset(self) -> None:
        self.frontend.clear_offset()


@dataclass(frozen=True)
class Seq2SeqConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int | None = None
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    @property
    def ff_dim(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_json_obj(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.ff_dim,
            "dropout": self.dropout,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Seq2SeqConfig":
        return cls(
            vocab_size=obj["vocab_size"],
            d_model=obj["d_model"],
            n_heads=obj["n_heads"],
            n_layers=obj["n_layers"],
            d_ff=obj.get("d_ff"),
            dropout=obj.get("dropout", 0.1),
        )


def causal_mask(length: int, device: torch.device) -> Tensor:
    """[1, 1, L, L] bool; position t may attend to positions <= t."""
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()[None, None]


class TransformerSeq2Seq(nn.Module):
    """Encoder-decoder with a shared embedding table and cross-attention that
    accepts encoder memories of any length (the fusion hook)."""

    def __init__(self, config: Seq2SeqConfig):
        super().__init__()
        self.config = config
        self.frontend = _EmbeddingFrontend(config.vocab_size, config.d_model, config.dropout)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(config.d_model, config.n_heads, config.ff_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.encoder_norm = nn.LayerNorm(config.d_model)
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(config.d_model, config.n_heads, config.ff_dim, config.dropout)
            for _ in range(config.n_layers)
        )
        self.decoder_norm = nn.LayerNorm(config.d_model)
        self.out_proj = nn.Linear(config.d_model, config.vocab_size)

    def encode(
        self, ids: Tensor, pad_mask: Tensor | None = None, capture_embed: bool = False
    ) -> Tensor:
        if ids.numel() == 0 or ids.shape[1] == 0:
            raise ValueError("cannot encode an empty id sequence")
        x = self.frontend(ids, capture_embed=capture_embed)
        mask = pad_key_mask(pad_mask)
        for layer in self.encoder_layers:
            x = layer(x, mask)
        return self.encoder_norm(x)

    def decode(
        self,
        tgt_ids: Tensor,
        memory: Tensor,
        memory_pad_mask: Tensor | None = None,
    ) -> Tensor:
        """tgt_ids [B, T], memory [B, M, d] -> logits [B, T, vocab]."""
        # Decoder positions restart at 0; shared embedding, no capture (the
        # adversarial surface is the encoder input).
        tok = self.frontend.embedding(tgt_ids) * math.sqrt(self.config.d_model)
        pos = sinusoidal_positions(tgt_ids.shape[1], self.config.d_model, tok.dtype).to(tgt_ids.device)
        x = self.frontend.dropout(tok + pos.unsqueeze(0))
        self_mask = causal_mask(tgt_ids.shape[1], tgt_ids.device)
        mem_mask = pad_key_mask(memory_pad_mask)
        for layer in self.decoder_layers:
            x = layer(x, memory, self_mask, mem_mask)
        return self.out_proj(self.decoder_norm(x))

    def forward(
        self,
        src_ids: Tensor,
        tgt_ids: Tensor,
        src_pad_mask: Tensor | None = None,
        capture_embed: bool = False,
    ) -> Tensor:
        memory = self.encode(src_ids, src_pad_mask, capture_embed=capture_embed)
        return self.decode(tgt_ids, memory, src_pad_mask)

    def captured_embedding_grad(self) -> Tensor:
        return self.frontend.captured_embedding_grad()

    def set_embed_offset(self, offset: Tensor) -> None:
        self.frontend.set_offset(offset)

    def clear_embed_offset(self) -> None:
        self.frontend.clear_offset()


def embedding_gradient(model: nn.Module) -> Tensor:
    """Gradient of the last backward pass with respect to the captured
    word-embedding output, shape [B, L, d]."""
    return model.captured_embedding_grad()
