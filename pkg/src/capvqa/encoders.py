"""Language encoder, selection head, and the capsule-interleaved visual encoder.

The text encoder is a stack of post-norm transformer layers that keeps every
layer's output: the [CLS] feature of text layer i drives the capsule mask for
visual layer i through a selection head shared across layers.  Visual layer 1
consumes the masked capsule tokens directly; deeper layers receive the
re-masked, upsampled capsules as an additive residual on every token except
[IMG].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .capsules import CapsuleGrid, VisualTokenAssembler, select_capsules
from .config import ModelConfig


class MultiHeadAttention(nn.Module):
    """Standard scaled dot-product attention returning softmax records.

    Returned probabilities are pre-dropout, so every row over key positions
    sums to 1.
    """

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        keyvalue: torch.Tensor,
        key_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """key_mask: (B, Tk) bool, True where the key is a real token."""
        q = self._split(self.q(query))
        k = self._split(self.k(keyvalue))
        v = self._split(self.v(keyvalue))
        scores = q @ k.transpose(-2, -1) / (self.head_dim**0.5)
        if key_mask is not None:
            scores = scores.masked_fill(
                ~key_mask[:, None, None, :], torch.finfo(scores.dtype).min
            )
        probs = torch.softmax(scores, dim=-1)
        ctx = self.dropout(probs) @ v
        b, _, t, _ = ctx.shape
        out = self.out(ctx.transpose(1, 2).reshape(b, t, -1))
        return out, probs


class FeedForward(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, ffn_dim),
            nn.GELU(),
            nn.Linear(ffn_dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EncoderLayer(nn.Module):
    """Post-norm (BERT-style) transformer encoder layer."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.attn_drop = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.norm2 = nn.LayerNorm(dim)

    def forward(
        self, x: torch.Tensor, key_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, probs = self.attn(x, x, key_mask)
        x = self.norm1(x + self.attn_drop(attn_out))
        x = self.norm2(x + self.ffn(x))
        return x, probs


class TextEncoder(nn.Module):
    """L-layer language encoder over [CLS] w_1..w_l [SEP] id sequences."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.position_embedding = nn.Parameter(
            torch.randn(cfg.max_text_len, cfg.dim) * 0.02
        )
        self.embed_norm = nn.LayerNorm(cfg.dim)
        self.embed_drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.dropout)
            for _ in range(cfg.layers)
        )

    def forward(
        self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> list[torch.Tensor]:
        """ids: (B, T) -> list of L per-layer outputs, each (B, T, d)."""
        if ids.max().item() >= self.vocab_size or ids.min().item() < 0:
            raise ValueError(
                f"token id out of range for vocabulary of size {self.vocab_size}"
            )
        t = ids.shape[1]
        if t > self.position_embedding.shape[0]:
            raise ValueError(
                f"sequence length {t} exceeds max_text_len "
                f"{self.position_embedding.shape[0]}"
            )
        x = self.token_embedding(ids) + self.position_embedding[:t].unsqueeze(0)
        x = self.embed_drop(self.embed_norm(x))
        outputs = []
        for layer in self.layers:
            x, _ = layer(x, pad_mask)
            outputs.append(x)
        return outputs


class SelectionHead(nn.Module):
    """Capsule mask from a [CLS] feature; one set of weights serves all layers."""

    def __init__(self, dim: int, capsules: int):
        super().__init__()
        self.proj = nn.Linear(dim, capsules)

    def forward(self, h_cls: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.proj(h_cls), dim=-1)


@dataclass
class VisualTrace:
    """Per-layer visual features plus the masks used, for auditability."""

    layers: list[torch.Tensor] = field(default_factory=list)
    masks: list[torch.Tensor] = field(default_factory=list)


def add_capsule_residual(tokens: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Add the capsule residual to every token except [IMG] at position 0."""
    zeros = residual.new_zeros(residual.shape[0], 1, residual.shape[2])
    return tokens + torch.cat([zeros, residual], dim=1)


class VisualEncoder(nn.Module):
    """Visual stream with per-layer text-guided capsule selection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.assembler = VisualTokenAssembler(cfg.packed_dim, cfg.dim, cfg.n_cells)
        self.selection = SelectionHead(cfg.dim, cfg.capsules)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.dropout)
            for _ in range(cfg.layers)
        )

    def layer_step(
        self,
        prev: torch.Tensor,
        grid: CapsuleGrid,
        mask: torch.Tensor,
        layer_index: int,
    ) -> torch.Tensor:
        """Apply layer ``layer_index`` (>= 1) with the masked-capsule residual."""
        residual = self.assembler.residual(select_capsules(grid, mask))
        x, _ = self.layers[layer_index](add_capsule_residual(prev, residual))
        return x

    def forward(self, grid: CapsuleGrid, text_layers: list[torch.Tensor]) -> VisualTrace:
        if len(text_layers) != len(self.layers):
            raise ValueError(
                f"text stack has {len(text_layers)} layers, visual encoder has "
                f"{len(self.layers)}"
            )
        trace = VisualTrace()
        x = None
        for i, layer in enumerate(self.layers):
            mask = self.selection(text_layers[i][:, 0])
            trace.masks.append(mask)
            if i == 0:
                x = self.assembler.tokens(select_capsules(grid, mask))
            else:
                residual = self.assembler.residual(select_capsules(grid, mask))
                x = add_capsule_residual(x, residual)
            x, _ = layer(x)
            trace.layers.append(x)
        return trace
