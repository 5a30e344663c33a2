"""Generator: fusion equation, stage composition, ablation and shape contracts."""

import numpy as np
import pytest

import mri2ct.tensor as T
from mri2ct.generator import (GeneratorConfig, bottleneck, encoder_stage,
                              fuse_features, generator_forward, init_generator,
                              param_count, transformer_branch_tensors)
from mri2ct.swin import swin_block
from mri2ct.tensor import Tensor

SMALL = GeneratorConfig(stage_channels=(4, 8), stage_heads=(2, 2),
                        window=(2, 2, 2), swin_depth=2)


@pytest.fixture
def small_params():
    return init_generator(SMALL, np.random.default_rng(0))


def fd_friendly_state(params):
    """Bias every pre-ReLU activation well away from its kink and give the
    fusion projections weight so the attention branch matters; finite
    differences then measure the smooth local derivative."""
    for sp in params.stages:
        sp.in1.shift.data[:] = 4.0
        sp.in2.shift.data[:] = 4.0
        sp.fuse.w.data = 0.2 * np.random.default_rng(3).standard_normal(
            sp.fuse.w.shape).astype(sp.fuse.w.dtype)
        for blk in sp.blocks:
            blk.mlp_b1.data[:] = 0.5
    params.bottleneck.fuse.w.data = 0.2 * np.random.default_rng(4).standard_normal(
        params.bottleneck.fuse.w.shape).astype(params.bottleneck.fuse.w.dtype)
    for blk in params.bottleneck.blocks:
        blk.mlp_b1.data[:] = 0.5
    for dp in params.decoder:
        dp.in1.shift.data[:] = 4.0
        dp.in2.shift.data[:] = 4.0


class TestFuseFeatures:
    def test_zero_inputs_zero_output(self, small_params):
        proj = small_params.stages[0].fuse
        z = Tensor(np.zeros((1, 4, 2, 2, 2), dtype=np.float32))
        out = fuse_features(z, z, proj)
        assert np.all(out.data == 0)

    def test_zero_projection_returns_conv_stream(self, rng, small_params):
        proj = small_params.stages[0].fuse     # zero-initialized by design
        f_c = Tensor(rng.standard_normal((1, 4, 2, 2, 2)).astype(np.float32))
        f_t = Tensor(rng.standard_normal((1, 4, 2, 2, 2)).astype(np.float32))
        out = fuse_features(f_c, f_t, proj)
        np.testing.assert_array_equal(out.data, f_c.data)

    def test_hand_matrix_arithmetic(self):
        # 2-channel single-voxel case: fusion is the 2x4 matrix times the
        # concatenated features plus the residual
        from mri2ct.generator import ConvP
        m = np.array([[1.0, 2.0, 3.0, 4.0],
                      [-1.0, 0.5, 0.0, 2.0]], dtype=np.float32)
        proj = ConvP(Tensor(m.reshape(2, 4, 1, 1, 1)),
                     Tensor(np.array([0.5, -0.5], dtype=np.float32)))
        f_c = Tensor(np.array([1.0, 2.0], dtype=np.float32).reshape(1, 2, 1, 1, 1))
        f_t = Tensor(np.array([3.0, -1.0], dtype=np.float32).reshape(1, 2, 1, 1, 1))
        out = fuse_features(f_c, f_t, proj)
        cat = np.array([1.0, 2.0, 3.0, -1.0])
        expect = m @ cat + np.array([0.5, -0.5]) + np.array([1.0, 2.0])
        np.testing.assert_allclose(out.data.ravel(), expect, rtol=1e-6)

    def test_shape_mismatch_rejected(self, small_params):
        proj = small_params.stages[0].fuse
        a = Tensor(np.zeros((1, 4, 2, 2, 2), dtype=np.float32))
        b = Tensor(np.zeros((1, 4, 4, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="fusion"):
            fuse_features(a, b, proj)


class TestEncoderStage:
    def test_branch_ablation_reduces_to_conv_stage(self, rng, small_params):
        sp = small_params.stages[0]
        x = Tensor(rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32))
        with T.no_grad():
            sf = encoder_stage(x, sp, SMALL)
        # fusion projection is zero-initialized: f == f_c exactly
        np.testing.assert_array_equal(sf.f.data, sf.f_c.data)
        assert sf.f_c.shape == sf.f_t.shape == sf.f.shape

    def test_matches_op_composition_oracle(self, rng, small_params):
        sp = small_params.stages[0]
        sp.fuse.w.data = 0.1 * np.random.default_rng(5).standard_normal(
            sp.fuse.w.shape).astype(np.float32)
        x = Tensor(rng.standard_normal((1, 4, 8, 8, 8)).astype(np.float32))
        with T.no_grad():
            sf = encoder_stage(x, sp, SMALL)

            # hand-composed: conv/IN/relu twice; per-dilation conv -> swin
            # stack; sum; concat -> 1x1x1 conv -> + f_c
            fc = T.relu(T.instance_norm(
                T.conv3d(x, sp.conv1.w, sp.conv1.b, padding=1, pad_mode="replicate"),
                sp.in1.scale, sp.in1.shift, 1e-5))
            fc = T.relu(T.instance_norm(
                T.conv3d(fc, sp.conv2.w, sp.conv2.b, padding=1, pad_mode="replicate"),
                sp.in2.scale, sp.in2.shift, 1e-5))
            branches = []
            from mri2ct.generator import _block_spec
            for d, cp in zip(SMALL.dilations, sp.dil_convs):
                z = T.conv3d(x, cp.w, cp.b, dilation=d, padding=d,
                             pad_mode="replicate")
                for i, blk in enumerate(sp.blocks):
                    z = swin_block(z, blk, _block_spec(SMALL, i),
                                   pad_mode="replicate")
                branches.append(z)
            ft = branches[0] + branches[1]
            fused = T.conv3d(T.concat([fc, ft], axis=1), sp.fuse.w, sp.fuse.b) + fc

        np.testing.assert_allclose(sf.f.data, fused.data, rtol=1e-5, atol=1e-5)
        np.testing.assert_allclose(sf.f_t.data, ft.data, rtol=1e-5, atol=1e-5)


class TestBottleneck:
    def test_zero_paths_identity_on_input(self, rng, small_params):
        bp = small_params.bottleneck
        x = Tensor(rng.standard_normal((1, 8, 4, 4, 4)).astype(np.float32))
        with T.no_grad():
            y = bottleneck(x, bp, SMALL)
        # fuse projection zero-initialized: output is exactly the input
        np.testing.assert_array_equal(y.data, x.data)

    def test_shape_preserved(self, rng, small_params):
        x = Tensor(rng.standard_normal((2, 8, 4, 6, 4)).astype(np.float32))
        with T.no_grad():
            y = bottleneck(x, small_params.bottleneck, SMALL)
        assert y.shape == x.shape

    def test_matches_composition_oracle(self, rng):
        cfg = GeneratorConfig(stage_channels=(16,), stage_heads=(4,),
                              window=(2, 2, 2))
        params = init_generator(cfg, np.random.default_rng(0))
        bp = params.bottleneck
        bp.fuse.w.data = 0.1 * np.random.default_rng(5).standard_normal(
            bp.fuse.w.shape).astype(np.float32)
        x = Tensor(rng.standard_normal((1, 16, 4, 4, 4)).astype(np.float32))
        with T.no_grad():
            y = bottleneck(x, bp, cfg)
            from mri2ct.generator import _block_spec
            paths = []
            for i, (d, cp) in enumerate(zip(cfg.dilations, bp.dil_convs)):
                z = T.conv3d(x, cp.w, cp.b, dilation=d, padding=d,
                             pad_mode="replicate")
                z = swin_block(z, bp.blocks[i], _block_spec(cfg, i),
                               pad_mode="replicate")
                paths.append(z)
            ft = paths[0] + paths[1]
            expect = T.conv3d(T.concat([x, ft], axis=1), bp.fuse.w, bp.fuse.b) + x
        np.testing.assert_allclose(y.data, expect.data, rtol=1e-5, atol=1e-5)


class TestDecoderAndHead:
    def test_output_strictly_inside_unit_interval(self, rng, small_params):
        x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32))
        with T.no_grad():
            y = generator_forward(x, small_params, SMALL)
        assert np.all(y.data > -1.0)
        assert np.all(y.data < 1.0)

    def test_zero_head_gives_zero_output(self, rng, small_params):
        small_params.head.w.data = np.zeros_like(small_params.head.w.data)
        small_params.head.b.data = np.zeros_like(small_params.head.b.data)
        x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32))
        with T.no_grad():
            y = generator_forward(x, small_params, SMALL)
        assert np.all(y.data == 0)

    def test_shape_propagation_through_stage_list(self, rng):
        cfg = GeneratorConfig(stage_channels=(4, 8, 8), stage_heads=(2, 2, 2),
                              window=(2, 2, 2))
        params = init_generator(cfg, np.random.default_rng(0))
        x = Tensor(rng.standard_normal((1, 1, 16, 16, 16)).astype(np.float32))
        with T.no_grad():
            y = generator_forward(x, params, cfg)
        assert y.shape == (1, 1, 16, 16, 16)


class TestGeneratorForward:
    def test_deterministic(self, rng, small_params):
        x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32))
        with T.no_grad():
            a = generator_forward(x, small_params, SMALL)
            b = generator_forward(x, small_params, SMALL)
        np.testing.assert_array_equal(a.data, b.data)

    def test_incompatible_extents_report_padding(self, small_params):
        x = Tensor(np.zeros((1, 1, 9, 8, 8), dtype=np.float32))
        with pytest.raises(ValueError, match=r"divisible by 2.*D\+1"):
            generator_forward(x, small_params, SMALL)

    def test_param_count_matches_closed_form(self, small_params):
        # independent recount from the config formulas
        c1, c2 = SMALL.stage_channels
        heads = SMALL.stage_heads
        win_tokens_table = 27  # (2*2-1)^3
        mlp = SMALL.mlp_ratio

        def conv(cout, cin, k=3):
            return cout * cin * k ** 3 + cout

        def norm(c):
            return 2 * c

        def swin(c, h):
            return (2 * norm(c)                      # two layer norms
                    + c * 3 * c + 3 * c              # qkv
                    + c * c + c                      # proj
                    + c * mlp * c + mlp * c          # mlp in
                    + mlp * c * c + c                # mlp out
                    + h * win_tokens_table)          # bias table

        expected = conv(c1, 1)                                    # stem
        for c, h in zip(SMALL.stage_channels, heads):
            expected += 2 * conv(c, c) + 2 * norm(c)               # conv stream
            expected += 2 * conv(c, c)                             # dilated convs
            expected += SMALL.swin_depth * swin(c, h)              # shared blocks
            expected += conv(c, 2 * c, k=1)                        # fusion
        expected += conv(c2, c1)                                   # downsample
        expected += 2 * conv(c2, c2) + 2 * swin(c2, heads[-1])     # bottleneck paths
        expected += conv(c2, 2 * c2, k=1)                          # bottleneck fusion
        expected += conv(c1, c2 + c1) + norm(c1) + conv(c1, c1) + norm(c1)  # decoder
        expected += conv(1, c1, k=1)                               # head

        assert param_count(small_params) == expected

    def test_fusion_ablation_invariance(self, rng, small_params):
        # zero fusion projections (the init default): output must be exactly
        # invariant to arbitrary transformer-branch perturbations
        x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)).astype(np.float32))
        with T.no_grad():
            base = generator_forward(x, small_params, SMALL)
        pert_rng = np.random.default_rng(9)
        for t in transformer_branch_tensors(small_params):
            t.data = t.data + pert_rng.standard_normal(t.shape).astype(t.dtype)
        with T.no_grad():
            perturbed = generator_forward(x, small_params, SMALL)
        np.testing.assert_array_equal(base.data, perturbed.data)

    def test_constant_input_constant_output(self, small_params):
        x = Tensor(np.full((1, 1, 8, 8, 8), 0.25, dtype=np.float32))
        with T.no_grad():
            y = generator_forward(x, small_params, SMALL)
        assert np.unique(y.data).size == 1

    def test_end_to_end_gradcheck_sampled_params(self, rng):
        # finite differences on a 1% random sample of parameters, float64.
        # Central differences at h=1e-3 only measure the true derivative away
        # from ReLU/|.| kinks, so the check point biases every pre-activation
        # ~4 sigma off the kink (see fd_friendly_state): the chain rule being
        # verified is the same.
        from oracles import rel_err
        cfg = GeneratorConfig(stage_channels=(4, 4), stage_heads=(2, 2),
                              window=(2, 2, 2), swin_depth=1)
        params = init_generator(cfg, np.random.default_rng(0), dtype=np.float64)
        fd_friendly_state(params)

        x = Tensor(rng.standard_normal((1, 1, 8, 8, 8)))
        target = (np.sign(rng.standard_normal((1, 1, 8, 8, 8)))
                  * rng.uniform(0.5, 1.5, (1, 1, 8, 8, 8)))

        def loss_value(record):
            for _, p in params.named():
                p.requires_grad = record
                if record:
                    p.grad = None
            out = generator_forward(x, params, cfg)
            loss = T.mean_all(T.abs_(out - Tensor(target)))
            if record:
                return loss
            v = loss.item()
            T.clear_tape()
            return v

        loss = loss_value(True)
        T.backward(loss)
        named = list(params.named())
        grabs = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                 for name, p in named}

        sample_rng = np.random.default_rng(42)
        total = sum(p.size for _, p in named)
        n_samples = max(20, total // 100)
        checked = failures = 0
        h = 1e-3
        for _ in range(n_samples):
            name, p = named[int(sample_rng.integers(len(named)))]
            i = int(sample_rng.integers(p.size))
            keep = p.data.reshape(-1)[i]
            p.data.reshape(-1)[i] = keep + h
            up = loss_value(False)
            p.data.reshape(-1)[i] = keep - h
            down = loss_value(False)
            p.data.reshape(-1)[i] = keep
            fd = (up - down) / (2 * h)
            if rel_err(grabs[name].reshape(-1)[i], fd, floor=1e-6) > 1e-2:
                failures += 1
            checked += 1
        assert failures == 0, f"{failures}/{checked} FD mismatches"
