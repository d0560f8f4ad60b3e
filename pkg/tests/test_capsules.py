"""Capsule construction, EM routing oracles, selection, and token assembly."""

import numpy as np
import pytest
import torch

from capvqa.capsules import (
    CapsuleGrid,
    EMRouting,
    PrimaryCapsuleLayer,
    RoutingNumericsError,
    VisualTokenAssembler,
    flatten_capsules,
    load_capsule_grid,
    save_capsule_grid,
    select_capsules,
    unpack_grid,
)
from capvqa.config import ConfigError, RoutingConfig


def make_grid(b=1, h=2, w=2, c=3, k=2, seed=0, activations=None):
    g = torch.Generator().manual_seed(seed)
    poses = torch.randn(b, h, w, c, k, k, generator=g)
    if activations is None:
        activations = torch.rand(b, h, w, c, 1, generator=g)
    return CapsuleGrid(poses=poses, activations=activations)


class TestPrimaryCapsules:
    def test_packed_dim_formula(self):
        # C=16, K=4 -> 16 * (16 + 1) = 272 per cell
        layer = PrimaryCapsuleLayer(dim=8, capsules=16, pose_size=4)
        assert layer.packed_dim == 272

    def test_zero_input_zero_weights(self):
        layer = PrimaryCapsuleLayer(dim=4, capsules=3, pose_size=2)
        with torch.no_grad():
            layer.conv.weight.zero_()
            layer.conv.bias.zero_()
        grid = layer(torch.zeros(1, 2, 2, 4))
        assert torch.equal(grid.poses, torch.zeros_like(grid.poses))
        assert torch.allclose(grid.activations, torch.full_like(grid.activations, 0.5))

    def test_paper_scale_shapes(self):
        layer = PrimaryCapsuleLayer(dim=16, capsules=16, pose_size=4)
        grid = layer(torch.randn(1, 7, 7, 16))
        assert grid.poses.shape == (1, 7, 7, 16, 4, 4)
        assert grid.activations.shape == (1, 7, 7, 16, 1)

    def test_activations_in_unit_interval(self):
        layer = PrimaryCapsuleLayer(dim=4, capsules=2, pose_size=2)
        grid = layer(torch.randn(2, 3, 3, 4) * 50)
        assert (grid.activations >= 0).all() and (grid.activations <= 1).all()


def routing_cfg(iterations=3):
    return RoutingConfig(
        iterations=iterations,
        inverse_temperatures=tuple(float(i + 1) for i in range(iterations)),
    )


class TestEMRouting:
    def test_single_capsule_pose_equals_vote(self):
        # One input, one output capsule: the weighted mean of a single vote
        # is that vote, so the output pose is the vote matrix exactly.
        router = EMRouting(capsules=1, pose_size=2, cfg=routing_cfg())
        grid = make_grid(c=1, k=2, activations=torch.full((1, 2, 2, 1, 1), 0.7))
        out = router(grid)
        votes = torch.einsum(
            "bnixy,ioyz->bnioxz",
            grid.poses.reshape(1, 4, 1, 2, 2),
            router.transforms,
        ).reshape(1, 2, 2, 1, 2, 2)
        assert torch.allclose(out.poses, votes, atol=1e-12)

    def test_identical_votes_recovered(self):
        # Two inputs casting identical votes: output pose = that vote.
        router = EMRouting(capsules=2, pose_size=2, cfg=routing_cfg())
        with torch.no_grad():
            router.transforms[1] = router.transforms[0]
        poses = torch.randn(1, 1, 1, 1, 2, 2).repeat(1, 1, 1, 2, 1, 1)
        grid = CapsuleGrid(poses=poses, activations=torch.full((1, 1, 1, 2, 1), 0.9))
        out = router(grid)
        expected = torch.einsum("xy,oyz->oxz", poses[0, 0, 0, 0], router.transforms[0])
        assert torch.allclose(out.poses[0, 0, 0], expected, atol=1e-10)

    def test_zero_activation_bound(self):
        # No input evidence: cost term vanishes, so every output activation
        # is sigmoid(lambda * beta_a) <= sigmoid(lambda * max beta_a).
        cfg = routing_cfg()
        router = EMRouting(capsules=3, pose_size=2, cfg=cfg)
        with torch.no_grad():
            router.beta_a.copy_(torch.tensor([-0.3, 0.2, 0.8]))
        grid = make_grid(c=3, k=2, activations=torch.zeros(1, 2, 2, 3, 1))
        out = router(grid)
        lam = cfg.inverse_temperatures[-1]
        bound = torch.sigmoid(lam * router.beta_a.max()).item()
        assert (out.activations <= bound + 1e-7).all()

    def test_activations_in_unit_interval(self):
        router = EMRouting(capsules=4, pose_size=3, cfg=routing_cfg())
        out = router(make_grid(b=2, c=4, k=3, seed=3))
        assert (out.activations >= 0).all() and (out.activations <= 1).all()

    def test_coefficient_rows_sum_to_one_every_iteration(self):
        router = EMRouting(capsules=4, pose_size=2, cfg=routing_cfg(iterations=4))
        _, internals = router(make_grid(c=4, k=2, seed=5), return_internals=True)
        assert len(internals["coefficients"]) == 4  # init + 3 E-steps
        for r in internals["coefficients"]:
            sums = r.sum(dim=-1)
            assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)

    def test_permutation_equivariance(self):
        cfg = routing_cfg()
        router = EMRouting(capsules=3, pose_size=2, cfg=cfg)
        grid = make_grid(c=3, k=2, seed=9)
        perm = torch.tensor([2, 0, 1])
        permuted = EMRouting(capsules=3, pose_size=2, cfg=cfg)
        with torch.no_grad():
            permuted.transforms.copy_(router.transforms[:, perm])
            permuted.beta_a.copy_(router.beta_a[perm])
            permuted.beta_u.copy_(router.beta_u[perm])
        out = router(grid)
        out_p = permuted(grid)
        assert torch.allclose(out_p.poses, out.poses[:, :, :, perm], atol=1e-6)
        assert torch.allclose(
            out_p.activations, out.activations[:, :, :, perm], atol=1e-6
        )

    def test_call_counter(self):
        router = EMRouting(capsules=2, pose_size=2, cfg=routing_cfg())
        grid = make_grid(c=2, k=2)
        assert router.call_count == 0
        router(grid)
        router(grid)
        assert router.call_count == 2

    def test_numerics_error_names_iteration(self):
        router = EMRouting(capsules=2, pose_size=2, cfg=routing_cfg())
        grid = make_grid(c=2, k=2)
        grid.poses[0, 0, 0, 0, 0, 0] = float("inf")
        with pytest.raises(RoutingNumericsError) as err:
            router(grid)
        assert err.value.iteration == 1

    def test_schedule_length_validated(self):
        with pytest.raises(ConfigError):
            EMRouting(2, 2, RoutingConfig(iterations=2, inverse_temperatures=(1.0,)))


class TestSelection:
    def test_one_hot_zeroes_other_blocks(self):
        grid = make_grid(c=4, k=2)
        mask = torch.zeros(4)
        mask[2] = 1.0
        sel = select_capsules(grid, mask)
        assert torch.equal(sel.poses[..., 2, :, :], grid.poses[..., 2, :, :])
        for c in (0, 1, 3):
            assert torch.equal(sel.poses[..., c, :, :],
                               torch.zeros_like(sel.poses[..., c, :, :]))
            assert torch.equal(sel.activations[..., c, :],
                               torch.zeros_like(sel.activations[..., c, :]))

    def test_uniform_mask_scales_all_blocks(self):
        grid = make_grid(c=4, k=2)
        sel = select_capsules(grid, torch.full((4,), 0.25))
        assert torch.allclose(sel.poses, grid.poses * 0.25)
        assert torch.allclose(sel.activations, grid.activations * 0.25)

    def test_softmax_shift_invariance(self):
        grid = make_grid(c=5, k=2)
        logits = torch.randn(5)
        m1 = torch.softmax(logits, dim=-1)
        m2 = torch.softmax(logits + 3.7, dim=-1)
        s1 = select_capsules(grid, m1)
        s2 = select_capsules(grid, m2)
        assert torch.allclose(s1.poses, s2.poses, atol=1e-6)

    def test_linearity_in_mask(self):
        grid = make_grid(c=3, k=2)
        m1, m2 = torch.rand(3), torch.rand(3)
        a, b = 0.3, 1.4
        combined = select_capsules(grid, a * m1 + b * m2)
        parts_poses = a * select_capsules(grid, m1).poses + b * select_capsules(grid, m2).poses
        assert torch.allclose(combined.poses, parts_poses, atol=1e-6)

    def test_per_sample_masks(self):
        grid = make_grid(b=2, c=3, k=2)
        masks = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        sel = select_capsules(grid, masks)
        assert torch.equal(sel.poses[0, ..., 0, :, :], grid.poses[0, ..., 0, :, :])
        assert torch.equal(sel.poses[1, ..., 0, :, :],
                           torch.zeros_like(sel.poses[1, ..., 0, :, :]))


class TestTokenAssembly:
    def test_sequence_length(self):
        # 7x7 grid -> 49 cells + [IMG] = 50 tokens
        grid = make_grid(h=7, w=7, c=2, k=2)
        asm = VisualTokenAssembler(grid.packed_dim, dim=16, n_cells=49)
        assert asm.tokens(grid).shape == (1, 50, 16)

    def test_zero_grid_zero_bias_gives_positions(self):
        grid = CapsuleGrid(
            poses=torch.zeros(1, 2, 2, 2, 2, 2),
            activations=torch.zeros(1, 2, 2, 2, 1),
        )
        asm = VisualTokenAssembler(grid.packed_dim, dim=8, n_cells=4)
        with torch.no_grad():
            asm.upsample.bias.zero_()
        tokens = asm.tokens(grid)
        assert torch.allclose(tokens[0, 1:], asm.positions[1:])
        assert torch.allclose(tokens[0, 0], asm.img_token + asm.positions[0])

    def test_row_major_cell_order(self):
        grid = make_grid(h=2, w=3, c=2, k=2, seed=4)
        flat = flatten_capsules(grid)
        packed = grid.packed()
        for r in range(2):
            for c in range(3):
                assert torch.equal(flat[0, r * 3 + c], packed[0, r, c])

    def test_permuting_cells_permutes_tokens(self):
        grid = make_grid(h=2, w=2, c=2, k=2, seed=8)
        swapped = CapsuleGrid(
            poses=grid.poses.clone(), activations=grid.activations.clone()
        )
        swapped.poses[0, 0, 0], swapped.poses[0, 1, 1] = (
            grid.poses[0, 1, 1],
            grid.poses[0, 0, 0],
        )
        swapped.activations[0, 0, 0], swapped.activations[0, 1, 1] = (
            grid.activations[0, 1, 1],
            grid.activations[0, 0, 0],
        )
        f1, f2 = flatten_capsules(grid), flatten_capsules(swapped)
        assert torch.equal(f1[0, 0], f2[0, 3])
        assert torch.equal(f1[0, 3], f2[0, 0])
        assert torch.equal(f1[0, 1], f2[0, 1])

    def test_packed_layout_roundtrip(self):
        grid = make_grid(c=3, k=2, seed=2)
        packed = grid.packed()
        # Per capsule: K*K pose entries row-major, then the activation.
        assert packed[0, 0, 0, 4] == grid.activations[0, 0, 0, 0, 0]
        assert packed[0, 0, 0, 3] == grid.poses[0, 0, 0, 0, 1, 1]
        back = unpack_grid(packed, capsules=3, pose_size=2)
        assert torch.equal(back.poses, grid.poses)
        assert torch.equal(back.activations, grid.activations)


def test_grid_serialization_roundtrip(tmp_path):
    grid = make_grid(b=1, h=3, w=2, c=4, k=3, seed=6)
    save_capsule_grid(tmp_path / "grid", grid)
    loaded = load_capsule_grid(tmp_path / "grid")
    assert torch.allclose(loaded.poses, grid.poses)
    assert torch.allclose(loaded.activations, grid.activations)
    meta = (tmp_path / "grid.json").read_text()
    assert '"packed_layout_version": 1' in meta
