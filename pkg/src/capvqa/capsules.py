"""Capsule encodings for the visual stream.

A capsule is a KxK pose matrix plus a scalar presence activation.  Image
embeddings become primary capsules through a per-cell convolution; an EM
routing layer then clusters primary-capsule votes into the capsule grid
that the visual encoder consumes.  Text-derived masks select capsules by
scaling each capsule's packed block, and the selected grid is flattened
and upsampled into transformer tokens.

Packed layout contract (version 1): per capsule, the pose matrix in
row-major order followed by the activation scalar; capsules concatenated
in index order, cells flattened row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import RoutingConfig

PACKED_LAYOUT_VERSION = 1


class RoutingNumericsError(RuntimeError):
    """Non-finite intermediate produced inside EM routing."""

    def __init__(self, iteration: int, what: str):
        super().__init__(
            f"non-finite {what} in EM routing iteration {iteration}"
        )
        self.iteration = iteration


@dataclass
class CapsuleGrid:
    """Per-cell capsules: poses (B, h, w, C, K, K) and activations (B, h, w, C, 1)."""

    poses: torch.Tensor
    activations: torch.Tensor

    def __post_init__(self):
        if self.poses.shape[:4] != self.activations.shape[:4]:
            raise ValueError(
                f"pose/activation shape mismatch: {tuple(self.poses.shape)} vs "
                f"{tuple(self.activations.shape)}"
            )

    @property
    def batch(self) -> int:
        return self.poses.shape[0]

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.poses.shape[1], self.poses.shape[2]

    @property
    def capsules(self) -> int:
        return self.poses.shape[3]

    @property
    def pose_size(self) -> int:
        return self.poses.shape[4]

    @property
    def packed_dim(self) -> int:
        k = self.pose_size
        return self.capsules * (k * k + 1)

    def packed(self) -> torch.Tensor:
        """(B, h, w, C*(K*K+1)) with the version-1 packed layout."""
        b, h, w, c, k, _ = self.poses.shape
        flat_poses = self.poses.reshape(b, h, w, c, k * k)
        blocks = torch.cat([flat_poses, self.activations], dim=-1)
        return blocks.reshape(b, h, w, c * (k * k + 1))


def unpack_grid(packed: torch.Tensor, capsules: int, pose_size: int) -> CapsuleGrid:
    """Inverse of CapsuleGrid.packed()."""
    b, h, w, d = packed.shape
    k2 = pose_size * pose_size
    if d != capsules * (k2 + 1):
        raise ValueError(f"packed dim {d} != {capsules}*({k2}+1)")
    blocks = packed.reshape(b, h, w, capsules, k2 + 1)
    poses = blocks[..., :k2].reshape(b, h, w, capsules, pose_size, pose_size)
    return CapsuleGrid(poses=poses, activations=blocks[..., k2:])


class PrimaryCapsuleLayer(nn.Module):
    """Per-cell convolution from the image embedding to primary capsules.

    Pose entries stay unconstrained; activations pass through a logistic
    so they land in [0, 1].
    """

    def __init__(self, dim: int, capsules: int, pose_size: int):
        super().__init__()
        self.capsules = capsules
        self.pose_size = pose_size
        self.packed_dim = capsules * (pose_size * pose_size + 1)
        self.conv = nn.Conv2d(dim, self.packed_dim, kernel_size=1)

    def forward(self, embedding: torch.Tensor) -> CapsuleGrid:
        """embedding: (B, h, w, dim) -> primary CapsuleGrid."""
        b, h, w, d = embedding.shape
        out = self.conv(embedding.permute(0, 3, 1, 2))
        if out.shape[1] != self.packed_dim:
            raise ValueError(
                f"conv produced {out.shape[1]} channels, expected {self.packed_dim}"
            )
        k2 = self.pose_size * self.pose_size
        blocks = out.permute(0, 2, 3, 1).reshape(b, h, w, self.capsules, k2 + 1)
        poses = blocks[..., :k2].reshape(
            b, h, w, self.capsules, self.pose_size, self.pose_size
        )
        activations = torch.sigmoid(blocks[..., k2:])
        return CapsuleGrid(poses=poses, activations=activations)


class EMRouting(nn.Module):
    """One EM routing step between equal-sized capsule layers.

    Votes come from learned per-(input, output) KxK transforms shared across
    spatial cells; each cell is routed independently.  The routing
    coefficients form, for every input capsule, a distribution over output
    capsules.  ``call_count`` tracks forward invocations so the
    routing-happens-once contract can be asserted.
    """

    def __init__(self, capsules: int, pose_size: int, cfg: RoutingConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.capsules = capsules
        self.pose_size = pose_size
        eye = torch.eye(pose_size).expand(capsules, capsules, pose_size, pose_size)
        noise = 0.05 * torch.randn(capsules, capsules, pose_size, pose_size)
        self.transforms = nn.Parameter(eye + noise)
        self.beta_a = nn.Parameter(torch.zeros(capsules))
        # A zero offset saturates the activation logistic when votes agree
        # (cost ~ sum of very negative log sigmas); +2 keeps it mid-range so
        # activations stay informative and their gradients alive.
        self.beta_u = nn.Parameter(torch.full((capsules,), 2.0))
        self.register_buffer(
            "inverse_temperatures",
            torch.tensor(cfg.inverse_temperatures, dtype=torch.float64),
            persistent=False,
        )
        self.call_count = 0

    def forward(
        self, primary: CapsuleGrid, return_internals: bool = False
    ) -> CapsuleGrid | tuple[CapsuleGrid, dict]:
        self.call_count += 1
        eps = self.cfg.epsilon
        b, h, w = primary.batch, *primary.grid_hw
        c_in = primary.capsules
        c_out = self.capsules
        k = self.pose_size
        k2 = k * k
        n = h * w

        poses = primary.poses.reshape(b, n, c_in, k, k)
        a_in = primary.activations.reshape(b, n, c_in)

        # Votes: V[b,n,i,o] = P[b,n,i] @ W[i,o], flattened to K*K components.
        votes = torch.einsum("bnixy,ioyz->bnioxz", poses, self.transforms)
        votes = votes.reshape(b, n, c_in, c_out, k2)

        dtype = votes.dtype
        lambdas = self.inverse_temperatures.to(dtype)
        r = torch.full((b, n, c_in, c_out), 1.0 / c_out, dtype=dtype, device=votes.device)
        coefficients = [r]

        mu = act_logit = None
        for t in range(self.cfg.iterations):
            lam = lambdas[t]
            # M-step: activation-weighted Gaussian fit per output capsule.
            weighted = r * a_in.unsqueeze(-1)
            w_sum = weighted.sum(dim=2)
            denom = torch.clamp(w_sum, min=eps).unsqueeze(-1)
            mu = torch.einsum("bnio,bnioh->bnoh", weighted, votes) / denom
            diff2 = (votes - mu.unsqueeze(2)) ** 2
            var = torch.einsum("bnio,bnioh->bnoh", weighted, diff2) / denom + eps
            # cost_h = (beta_u + log sigma_h) * sum_i r_i; summed over components.
            cost = (self.beta_u.unsqueeze(-1) + 0.5 * torch.log(var)).sum(dim=-1)
            cost = cost * w_sum
            act_logit = lam * (self.beta_a - cost)
            if not torch.isfinite(act_logit).all() or not torch.isfinite(mu).all():
                raise RoutingNumericsError(t + 1, "M-step statistics")

            if t + 1 < self.cfg.iterations:
                # E-step: re-assign inputs by posterior over output capsules.
                log_p = -0.5 * (diff2 / var.unsqueeze(2)).sum(dim=-1)
                log_p = log_p - 0.5 * torch.log(2.0 * torch.pi * var).sum(dim=-1).unsqueeze(2)
                logits = F.logsigmoid(act_logit).unsqueeze(2) + log_p
                r = torch.softmax(logits, dim=-1)
                if not torch.isfinite(r).all():
                    raise RoutingNumericsError(t + 1, "E-step coefficients")
                coefficients.append(r)

        activations = torch.sigmoid(act_logit)
        grid = CapsuleGrid(
            poses=mu.reshape(b, h, w, c_out, k, k),
            activations=activations.reshape(b, h, w, c_out, 1),
        )
        if return_internals:
            return grid, {"coefficients": coefficients, "votes": votes}
        return grid


def select_capsules(grid: CapsuleGrid, mask: torch.Tensor) -> CapsuleGrid:
    """Scale each capsule's whole packed block (pose + activation) by mask[c].

    mask: (C,) or (B, C) probabilities. No cross-capsule mixing.
    """
    c = grid.capsules
    if mask.shape[-1] != c:
        raise ValueError(f"mask length {mask.shape[-1]} != capsule count {c}")
    if mask.dim() == 1:
        scale = mask.view(1, 1, 1, c)
    elif mask.dim() == 2:
        scale = mask.view(mask.shape[0], 1, 1, c)
    else:
        raise ValueError(f"mask must be 1- or 2-dimensional, got {mask.dim()}")
    return CapsuleGrid(
        poses=grid.poses * scale.unsqueeze(-1).unsqueeze(-1),
        activations=grid.activations * scale.unsqueeze(-1),
    )


def flatten_capsules(grid: CapsuleGrid) -> torch.Tensor:
    """(B, h*w, d_c) token sequence; cell j is row-major cell j of the grid."""
    b, (h, w) = grid.batch, grid.grid_hw
    return grid.packed().reshape(b, h * w, grid.packed_dim)


class VisualTokenAssembler(nn.Module):
    """Upsampler sigma, the [IMG] token, and the learned position table.

    ``tokens`` builds the layer-1 input: [IMG] + upsampled capsule tokens
    + position embeddings (position 0 = [IMG]).  ``residual`` builds the
    capsule residual for deeper layers: upsampled tokens only, no [IMG]
    slot and no positions.
    """

    def __init__(self, packed_dim: int, dim: int, n_cells: int):
        super().__init__()
        self.n_cells = n_cells
        self.upsample = nn.Linear(packed_dim, dim)
        self.img_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.positions = nn.Parameter(torch.randn(n_cells + 1, dim) * 0.02)

    def residual(self, selected: CapsuleGrid) -> torch.Tensor:
        flat = flatten_capsules(selected)
        if flat.shape[1] != self.n_cells:
            raise ValueError(
                f"grid has {flat.shape[1]} cells, assembler expects {self.n_cells}"
            )
        return self.upsample(flat)

    def tokens(self, selected: CapsuleGrid) -> torch.Tensor:
        up = self.residual(selected)
        img = self.img_token.expand(up.shape[0], 1, -1)
        seq = torch.cat([img, up], dim=1)
        return seq + self.positions.unsqueeze(0)


def save_capsule_grid(path: str | Path, grid: CapsuleGrid) -> None:
    """Binary tensor blob (.npy, packed layout) + sidecar metadata (.json)."""
    path = Path(path)
    packed = grid.packed().detach().cpu().numpy()
    np.save(path.with_suffix(".npy"), packed)
    h, w = grid.grid_hw
    meta = {
        "h": h,
        "w": w,
        "capsules": grid.capsules,
        "pose_size": grid.pose_size,
        "packed_layout_version": PACKED_LAYOUT_VERSION,
        "order": "per capsule: pose row-major then activation",
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_capsule_grid(path: str | Path) -> CapsuleGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta["packed_layout_version"] != PACKED_LAYOUT_VERSION:
        raise ValueError(
            f"unsupported packed layout version {meta['packed_layout_version']}"
        )
    packed = torch.from_numpy(np.load(path.with_suffix(".npy")))
    return unpack_grid(packed, meta["capsules"], meta["pose_size"])
