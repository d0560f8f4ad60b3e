"""Full two-stream model: stem, capsules, encoders, cross-modal stack, heads."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .capsules import CapsuleGrid, EMRouting, PrimaryCapsuleLayer
from .config import ModelConfig
from .crossmodal import (
    CrossModalOutput,
    CrossModalStack,
    FeaturePool,
    ItmHead,
    MlmHead,
    VqaHead,
)
from .encoders import TextEncoder, VisualEncoder, VisualTrace
from .features import ConvStem, GridProjection


@dataclass
class ModelOutput:
    """Everything one forward pass produces, kept for heads, audit, and eval."""

    text_layers: list[torch.Tensor]
    visual: VisualTrace
    grid: CapsuleGrid
    pooled_stage1: torch.Tensor
    cross: CrossModalOutput | None = None
    pooled_stage2: torch.Tensor | None = None

    @property
    def masks(self) -> list[torch.Tensor]:
        return self.visual.masks


class GroundedVqaModel(nn.Module):
    """Capsule-interleaved two-stream transformer for VQA with grounding.

    Image embeddings become capsules once per forward pass; every visual
    layer re-selects them with a mask computed from the matching text
    layer's [CLS] feature.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stem = ConvStem(cfg.grid_h, cfg.grid_w, cfg.image_size, cfg.stem_channels)
        self.projection = GridProjection(cfg.stem_channels, cfg.dim)
        self.primary = PrimaryCapsuleLayer(cfg.dim, cfg.capsules, cfg.pose_size)
        self.routing = EMRouting(cfg.capsules, cfg.pose_size, cfg.routing)
        self.text_encoder = TextEncoder(cfg)
        self.visual_encoder = VisualEncoder(cfg)
        self.cross_stack = CrossModalStack(cfg)
        self.pool = FeaturePool(cfg.dim)
        self.mlm_head = MlmHead(cfg.dim, cfg.vocab_size)
        self.itm_head = ItmHead(cfg.dim)
        self.vqa_head = VqaHead(cfg.dim, cfg.answer_vocab_size, cfg.vqa_hidden)
        self._scale_residual_projections()

    def _scale_residual_projections(self) -> None:
        # Post-norm stacks train poorly from scratch unless residual-branch
        # output projections start small; scale by 1/sqrt(2 * depth).
        from .encoders import FeedForward, MultiHeadAttention

        factor = 1.0 / ((2 * (self.cfg.layers + self.cfg.cross_layers)) ** 0.5)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, MultiHeadAttention):
                    module.out.weight.mul_(factor)
                elif isinstance(module, FeedForward):
                    module.net[2].weight.mul_(factor)

    # Parameter scopes for the two-stage pretraining contract.
    def backbone_modules(self) -> list[nn.Module]:
        return [
            self.stem,
            self.projection,
            self.primary,
            self.routing,
            self.text_encoder,
            self.visual_encoder,
        ]

    def cross_modules(self) -> list[nn.Module]:
        return [self.cross_stack]

    def head_modules(self) -> list[nn.Module]:
        return [self.pool, self.mlm_head, self.itm_head, self.vqa_head]

    def named_scope_parameters(self, scopes: tuple[str, ...]):
        groups = {
            "backbone": self.backbone_modules(),
            "cross": self.cross_modules(),
            "heads": self.head_modules(),
        }
        for scope in scopes:
            for module in groups[scope]:
                yield from module.parameters()

    def embed_image(
        self,
        images: torch.Tensor | None = None,
        feature_grids: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """(B, 3, H, W) rasters or (B, h, w, d1) precomputed grids -> (B, h, w, d)."""
        if (images is None) == (feature_grids is None):
            raise ValueError("provide exactly one of images or feature_grids")
        raw = self.stem(images) if images is not None else feature_grids
        return self.projection(raw)

    def capsule_grid(self, embedding: torch.Tensor) -> CapsuleGrid:
        """Primary capsules + EM routing; runs once per forward pass."""
        return self.routing(self.primary(embedding))

    def forward(
        self,
        text_ids: torch.Tensor,
        text_pad_mask: torch.Tensor | None = None,
        images: torch.Tensor | None = None,
        feature_grids: torch.Tensor | None = None,
        run_cross: bool = True,
    ) -> ModelOutput:
        embedding = self.embed_image(images, feature_grids)
        grid = self.capsule_grid(embedding)
        text_layers = self.text_encoder(text_ids, text_pad_mask)
        visual = self.visual_encoder(grid, text_layers)
        text_final = text_layers[-1]
        vis_final = visual.layers[-1]
        pooled1 = self.pool(text_final[:, 0], vis_final[:, 0])
        out = ModelOutput(
            text_layers=text_layers,
            visual=visual,
            grid=grid,
            pooled_stage1=pooled1,
        )
        if run_cross:
            cross = self.cross_stack(text_final, vis_final, text_pad_mask)
            out.cross = cross
            out.pooled_stage2 = self.pool(cross.text[:, 0], cross.vision[:, 0])
        return out


def build_model(cfg: ModelConfig, seed: int | None = None) -> GroundedVqaModel:
    """Deterministic construction: same seed, same initial parameters."""
    if seed is not None:
        torch.manual_seed(seed)
    return GroundedVqaModel(cfg)
