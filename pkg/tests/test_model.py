"""Network architecture: invariances, interaction wiring, refinement loop."""

import numpy as np
import pytest
import torch

from dualreg.geometry import RigidTransform, compose
from dualreg.model import ModelConfig, RegistrationNet, contribution_map

from conftest import cloud_tensor, small_model_config


def make_model(seed=0, **overrides) -> RegistrationNet:
    torch.manual_seed(seed)
    return RegistrationNet(small_model_config(**overrides))


class TestModelConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.feature_dim == 512
        assert cfg.hybrid_dim == 512

    def test_single_branch_doubles_channels(self):
        cfg = ModelConfig(dual_branch=False)
        assert cfg.encoder_channels == (128, 128, 256, 512)
        assert cfg.feature_dim == 1024

    def test_pfi_position_bounds(self):
        with pytest.raises(ValueError):
            ModelConfig(pfi_positions=(1,))
        with pytest.raises(ValueError):
            ModelConfig(pfi_positions=(5,))

    def test_iterations_positive(self):
        with pytest.raises(ValueError):
            ModelConfig(iterations=0)


class TestParameterLayout:
    def test_param_count_is_config_pure(self):
        a = make_model(seed=0)
        b = make_model(seed=99)
        shapes_a = [(n, tuple(p.shape)) for n, p in a.named_parameters()]
        shapes_b = [(n, tuple(p.shape)) for n, p in b.named_parameters()]
        assert shapes_a == shapes_b

    def test_test_width_param_count_frozen(self):
        # Layout manifest for the test-width config; changes here are
        # architecture changes and must be deliberate.
        model = make_model()
        assert sum(p.numel() for p in model.parameters()) == 28391

    def test_dual_branches_have_disjoint_parameters(self):
        model = make_model()
        r_params = {id(p) for p in model.encoder_r.parameters()}
        t_params = {id(p) for p in model.encoder_t.parameters()}
        assert r_params.isdisjoint(t_params)

    def test_single_branch_shares_the_encoder(self):
        model = make_model(dual_branch=False)
        assert model.encoder_r is model.encoder_t

    def test_toggles_change_layout(self):
        base = sum(p.numel() for p in make_model().parameters())
        no_pfi = sum(p.numel() for p in make_model(use_pfi=False).parameters())
        no_gfi = sum(p.numel() for p in make_model(use_gfi=False).parameters())
        no_sal = sum(p.numel() for p in make_model(use_saliency=False).parameters())
        assert no_pfi < base  # exchange blocks are narrower without the summary
        assert no_gfi < base  # mixers gone
        assert no_sal != base


class TestForwardShapes:
    def test_forward_once_outputs(self):
        model = make_model()
        rng = np.random.default_rng(0)
        out = model.forward_once(cloud_tensor(rng, 20, batch=3), cloud_tensor(rng, 24, batch=3))
        assert out.q.shape == (3, 4)
        assert out.t.shape == (3, 3)
        assert out.saliency_x.shape == (3, 3)
        assert out.saliency_y.shape == (3, 3)
        dim = model.config.feature_dim
        assert out.encoded.fr_x.shape == (3, dim)
        assert out.encoded.ft_y.shape == (3, dim)

    def test_quaternion_is_unit_and_canonical(self):
        model = make_model()
        rng = np.random.default_rng(1)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            with torch.no_grad():
                out = model.forward_once(cloud_tensor(rng, 16), cloud_tensor(rng, 16))
            assert float(out.q.norm(dim=-1)) == pytest.approx(1.0, abs=1e-6)
            assert float(out.q[0, 0]) >= 0.0

    def test_translation_is_saliency_difference(self):
        model = make_model()
        rng = np.random.default_rng(2)
        out = model.forward_once(cloud_tensor(rng, 16), cloud_tensor(rng, 16))
        assert torch.equal(out.t, out.saliency_y - out.saliency_x)

    def test_no_saliency_direct_head(self):
        model = make_model(use_saliency=False)
        rng = np.random.default_rng(3)
        out = model.forward_once(cloud_tensor(rng, 16), cloud_tensor(rng, 16))
        assert out.saliency_x is None and out.saliency_y is None
        assert out.t.shape == (1, 3)

    def test_register_rejects_bad_shapes(self):
        model = make_model()
        with pytest.raises(ValueError):
            model.register(torch.zeros(1, 10, 2), torch.zeros(1, 10, 3))
        with pytest.raises(ValueError):
            model.register(torch.zeros(1, 10, 3), torch.zeros(2, 10, 3))


class TestPoolingInvariances:
    def test_global_feature_permutation_invariant(self):
        # max over points is order-blind, bitwise
        model = make_model()
        rng = np.random.default_rng(4)
        for seed in range(10):
            rng = np.random.default_rng(seed)
            px, py = cloud_tensor(rng, 24), cloud_tensor(rng, 20)
            perm = torch.randperm(24)
            enc = model.encode(px, py)
            enc_p = model.encode(px[:, perm], py)
            assert torch.equal(enc.fr_x, enc_p.fr_x)
            assert torch.equal(enc.ft_x, enc_p.ft_x)

    def test_global_feature_duplication_invariant(self):
        model = make_model()
        rng = np.random.default_rng(5)
        px, py = cloud_tensor(rng, 24), cloud_tensor(rng, 20)
        dup = torch.cat([px, px[:, :5]], dim=1)
        enc = model.encode(px, py)
        enc_d = model.encode(dup, py)
        assert torch.equal(enc.fr_x, enc_d.fr_x)
        assert torch.equal(enc.ft_x, enc_d.ft_x)

    def test_register_final_permutation_invariant(self):
        model = make_model()
        rng = np.random.default_rng(6)
        px, py = cloud_tensor(rng, 24), cloud_tensor(rng, 20)
        q1, t1, _ = model.register(px, py)
        q2, t2, _ = model.register(px[:, torch.randperm(24)], py[:, torch.randperm(20)])
        assert torch.allclose(q1, q2, atol=1e-6)
        assert torch.allclose(t1, t2, atol=1e-6)


class TestPointwiseInteraction:
    def test_self_permutation_equivariant(self):
        # permuting a cloud's points permutes its point-wise features the
        # same way at every level
        model = make_model()
        rng = np.random.default_rng(7)
        px, py = cloud_tensor(rng, 18), cloud_tensor(rng, 18)
        perm = torch.randperm(18)
        enc = model.encode(px, py)
        enc_p = model.encode(px[:, perm], py)
        for f, f_p in zip(enc.pointwise_r_x, enc_p.pointwise_r_x):
            assert torch.equal(f[:, perm], f_p)

    def test_other_cloud_permutation_invariant(self):
        # the exchanged summary is pooled, so shuffling Y leaves X's
        # point-wise features untouched
        model = make_model()
        rng = np.random.default_rng(8)
        px, py = cloud_tensor(rng, 18), cloud_tensor(rng, 22)
        enc = model.encode(px, py)
        enc_p = model.encode(px, py[:, torch.randperm(22)])
        for f, f_p in zip(enc.pointwise_r_x, enc_p.pointwise_r_x):
            assert torch.equal(f, f_p)
        for f, f_p in zip(enc.pointwise_t_x, enc_p.pointwise_t_x):
            assert torch.equal(f, f_p)

    def test_exchange_feeds_other_cloud_information(self):
        # with PFI on, changing Y changes X's late point-wise features
        model = make_model()
        rng = np.random.default_rng(9)
        px, py = cloud_tensor(rng, 18), cloud_tensor(rng, 18)
        py2 = py + 0.5
        enc = model.encode(px, py)
        enc2 = model.encode(px, py2)
        assert torch.equal(enc.pointwise_r_x[0], enc2.pointwise_r_x[0])  # before first exchange
        assert not torch.equal(enc.pointwise_r_x[2], enc2.pointwise_r_x[2])  # after it

    def test_no_pfi_encoders_are_independent(self):
        model = make_model(use_pfi=False)
        rng = np.random.default_rng(10)
        px, py = cloud_tensor(rng, 18), cloud_tensor(rng, 18)
        enc = model.encode(px, py)
        enc2 = model.encode(px, py + 0.5)
        for f, f2 in zip(enc.pointwise_r_x, enc2.pointwise_r_x):
            assert torch.equal(f, f2)
        assert torch.equal(enc.fr_x, enc2.fr_x)

    def test_single_cloud_forward_matches_pair(self):
        model = make_model()
        rng = np.random.default_rng(11)
        px, py = cloud_tensor(rng, 18), cloud_tensor(rng, 18)
        feats_x, feats_y, gx, gy = model.encoder_r.forward_pair(px, py)
        # lockstep: the summary consumed at position k is the other cloud's
        # level k-1 output, pooled
        summaries = {k: feats_y[k - 2].max(dim=1).values for k in model.encoder_r.pfi_positions}
        feats_single, g_single = model.encoder_r(px, other_summaries=summaries)
        for f_pair, f_one in zip(feats_x, feats_single):
            assert torch.equal(f_pair, f_one)
        assert torch.equal(gx, g_single)

    def test_single_cloud_forward_requires_summaries(self):
        model = make_model()
        rng = np.random.default_rng(12)
        with pytest.raises(ValueError, match="missing other-cloud summaries"):
            model.encoder_r(cloud_tensor(rng, 18))


class TestGlobalMixing:
    def test_gfi_mixes_both_clouds(self):
        model = make_model()
        rng = np.random.default_rng(13)
        px, py = cloud_tensor(rng, 16), cloud_tensor(rng, 16)
        out = model.forward_once(px, py)
        out2 = model.forward_once(px, py + 0.3)
        assert not torch.equal(out.hybrid_r_x, out2.hybrid_r_x)

    def test_no_gfi_hybrid_equals_global(self):
        model = make_model(use_gfi=False)
        rng = np.random.default_rng(14)
        px, py = cloud_tensor(rng, 16), cloud_tensor(rng, 16)
        out = model.forward_once(px, py)
        assert torch.equal(out.hybrid_r_x, out.encoded.fr_x)
        assert torch.equal(out.hybrid_t_y, out.encoded.ft_y)


class TestRegister:
    def test_iteration_count_and_composition(self):
        model = make_model(iterations=3)
        rng = np.random.default_rng(15)
        src = rng.uniform(-1, 1, size=(20, 3))
        ref = rng.uniform(-1, 1, size=(20, 3))
        result = model.register_arrays(src, ref)
        assert len(result.per_iteration) == 3
        acc = RigidTransform.identity()
        for step in result.per_iteration:
            acc = compose(step, acc)
        # float32 accumulation inside the net vs float64 here
        assert np.allclose(acc.as_matrix4(), result.final.as_matrix4(), atol=1e-5)

    def test_iterations_override(self):
        model = make_model(iterations=2)
        rng = np.random.default_rng(16)
        src = rng.uniform(-1, 1, size=(12, 3))
        result = model.register_arrays(src, src, iterations=5)
        assert len(result.per_iteration) == 5

    def test_register_deterministic(self):
        model = make_model()
        rng = np.random.default_rng(17)
        src = rng.uniform(-1, 1, size=(16, 3))
        ref = rng.uniform(-1, 1, size=(16, 3))
        a = model.register_arrays(src, ref)
        b = model.register_arrays(src, ref)
        assert np.array_equal(a.final.as_matrix4(), b.final.as_matrix4())

    def test_nan_fails_fast_with_iteration_index(self):
        model = make_model()
        with torch.no_grad():
            model.rotation_head.net[0].weight.fill_(float("nan"))
        rng = np.random.default_rng(18)
        with pytest.raises(RuntimeError, match="iteration 1"):
            model.register(cloud_tensor(rng, 10), cloud_tensor(rng, 10))

    def test_saliency_collected_per_iteration(self):
        model = make_model(iterations=2)
        rng = np.random.default_rng(19)
        src = rng.uniform(-1, 1, size=(14, 3))
        result = model.register_arrays(src, src)
        assert len(result.saliency_source) == 2
        assert all(s.shape == (3,) for s in result.saliency_source)


class TestContributionMap:
    def test_counts_sum_to_feature_dim(self):
        model = make_model()
        rng = np.random.default_rng(20)
        src = rng.uniform(-1, 1, size=(16, 3))
        ref = rng.uniform(-1, 1, size=(16, 3))
        result = model.register_arrays(src, ref, collect_features=True)
        cmap = contribution_map(result.bundles_source[0])
        dim = model.config.feature_dim
        assert cmap["r"].sum() == dim
        assert cmap["t"].sum() == dim
        assert cmap["r"].shape == (16,)

    def test_ties_go_to_lowest_index(self):
        from dualreg.model import FeatureBundle

        f = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
        bundle = FeatureBundle(
            pointwise_r=[f], pointwise_t=[f],
            global_r=f.max(0), global_t=f.max(0),
            hybrid_r=f.max(0), hybrid_t=f.max(0),
        )
        cmap = contribution_map(bundle)
        assert cmap["r"].tolist() == [2, 0, 0]


class TestDropoutMasking:
    def test_row_mask_restricts_the_pool(self):
        model = make_model(use_pfi=False)
        rng = np.random.default_rng(21)
        px, py = cloud_tensor(rng, 12), cloud_tensor(rng, 12)
        mask = torch.ones(1, 12)
        mask[0, :4] = 0.0
        enc_masked = model.encode(px, py, mask_x=mask, mask_y=None)
        # with the dropped rows removed *and* the zero floor kept, the pool
        # must agree: zeroed rows contribute exactly 0 to each channel max
        feats_x, _, _, _ = model.encoder_r.forward_pair(px, py)
        stacked = torch.cat(feats_x, dim=-1)
        manual = (stacked * mask.unsqueeze(-1)).max(dim=1).values
        assert torch.equal(enc_masked.fr_x, manual)
