"""Cross-modal interaction stack, feature pooling, and the task heads.

Each cross-modal block runs bidirectional cross-attention (queries from one
stream, keys/values from the other), then per-stream self-attention, then
per-stream feedforward, all post-norm.  Per-head softmax score matrices of
all four attention directions are recorded for the grounding evaluation;
the [IMG] row of ``vision_self`` is what the grounding metrics consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .encoders import FeedForward, MultiHeadAttention

ATTENTION_DIRECTIONS = ("text_to_vision", "vision_to_text", "text_self", "vision_self")


class CrossModalBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.cross_text = MultiHeadAttention(dim, heads, dropout)
        self.cross_vision = MultiHeadAttention(dim, heads, dropout)
        self.self_text = MultiHeadAttention(dim, heads, dropout)
        self.self_vision = MultiHeadAttention(dim, heads, dropout)
        self.ffn_text = FeedForward(dim, ffn_dim, dropout)
        self.ffn_vision = FeedForward(dim, ffn_dim, dropout)
        self.drop = nn.Dropout(dropout)
        self.norms = nn.ModuleDict(
            {
                name: nn.LayerNorm(dim)
                for name in (
                    "cross_t", "cross_v", "self_t", "self_v", "ffn_t", "ffn_v",
                )
            }
        )

    def forward(
        self,
        text: torch.Tensor,
        vision: torch.Tensor,
        text_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, dict]:
        # Both cross directions read the same pre-update sequences.
        t_cross, p_t2v = self.cross_text(text, vision)
        v_cross, p_v2t = self.cross_vision(vision, text, key_mask=text_mask)
        text = self.norms["cross_t"](text + self.drop(t_cross))
        vision = self.norms["cross_v"](vision + self.drop(v_cross))

        t_self, p_tself = self.self_text(text, text, key_mask=text_mask)
        text = self.norms["self_t"](text + self.drop(t_self))
        v_self, p_vself = self.self_vision(vision, vision)
        vision = self.norms["self_v"](vision + self.drop(v_self))

        text = self.norms["ffn_t"](text + self.ffn_text(text))
        vision = self.norms["ffn_v"](vision + self.ffn_vision(vision))
        records = {
            "text_to_vision": p_t2v,
            "vision_to_text": p_v2t,
            "text_self": p_tself,
            "vision_self": p_vself,
        }
        return text, vision, records


@dataclass
class CrossModalOutput:
    text: torch.Tensor
    vision: torch.Tensor
    records: list[dict] = field(default_factory=list)


class CrossModalStack(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            CrossModalBlock(cfg.dim, cfg.heads, cfg.ffn_dim, cfg.dropout)
            for _ in range(cfg.cross_layers)
        )

    def forward(
        self,
        text: torch.Tensor,
        vision: torch.Tensor,
        text_mask: torch.Tensor | None = None,
    ) -> CrossModalOutput:
        out = CrossModalOutput(text=text, vision=vision)
        for block in self.blocks:
            out.text, out.vision, records = block(out.text, out.vision, text_mask)
            out.records.append(records)
        return out


class FeaturePool(nn.Module):
    """tanh(W [text_cls; img_token]): shared by both pretraining stages."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(2 * dim, dim)

    def forward(self, text_cls: torch.Tensor, img_token: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.proj(torch.cat([text_cls, img_token], dim=-1)))


class MlmHead(nn.Module):
    def __init__(self, dim: int, vocab_size: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.decoder = nn.Linear(dim, vocab_size)

    def forward(
        self, features: torch.Tensor, positions: torch.Tensor
    ) -> torch.Tensor:
        """features: (B, T, d); positions: (N, 2) of (batch, token) indices."""
        if positions.numel() == 0:
            return features.new_zeros(0, self.vocab_size)
        b, t, _ = features.shape
        if positions[:, 0].max() >= b or positions[:, 1].max() >= t:
            raise ValueError("masked position out of range for the feature tensor")
        picked = features[positions[:, 0], positions[:, 1]]
        return self.decoder(picked)


class ItmHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, 2)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.proj(pooled)


class VqaHead(nn.Module):
    """Two fully connected layers with GELU and layer norm in between."""

    def __init__(self, dim: int, answers: int, hidden: int = 0):
        super().__init__()
        hidden = hidden or dim
        self.fc1 = nn.Linear(dim, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.fc2 = nn.Linear(hidden, answers)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.norm(F.gelu(self.fc1(pooled))))


class LossNumericsError(RuntimeError):
    def __init__(self, term: str):
        super().__init__(f"non-finite value in loss term {term!r}")
        self.term = term


def combined_loss(terms: dict[str, torch.Tensor | None]) -> torch.Tensor:
    """Unweighted sum of the present loss terms; absent terms contribute 0."""
    total = None
    for name, value in terms.items():
        if value is None:
            continue
        if not torch.isfinite(value).all():
            raise LossNumericsError(name)
        total = value if total is None else total + value
    if total is None:
        raise ValueError("combined_loss needs at least one present term")
    return total


def save_attention_record(
    path: str | Path,
    scores: np.ndarray,
    layer: int,
    head: int | str,
    direction: str,
    query_token: str,
) -> None:
    """Binary attention blob (.npy) + sidecar metadata (.json)."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), np.asarray(scores))
    meta = {
        "layer": layer,
        "head": head,
        "direction": direction,
        "query_token": query_token,
        "shape": list(np.asarray(scores).shape),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
