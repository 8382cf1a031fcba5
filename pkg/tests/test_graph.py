"""Block specs, receptive fields, graph assembly, freezing semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patch2image.errors import ConfigError, DimensionError, ParseError, UsageError
from patch2image.graph import (
    BlockSpec,
    NetworkGraph,
    build_patch_net,
    format_block_specs,
    parse_block_specs,
    receptive_field_of,
)
from patch2image.layers import (
    BatchNorm,
    Conv,
    Dense,
    Flatten,
    GlobalAvgPool,
    Pool,
    ReLU,
    ResidualUnit,
)

from oracles import fd_grad, rel_err


class TestBlockSpecs:
    def test_plain(self):
        assert parse_block_specs("16x3") == [BlockSpec((16,), 3)]

    def test_bottleneck(self):
        assert parse_block_specs("[8-8-24]x2") == [BlockSpec((8, 8, 24), 2)]

    def test_mixed_list(self):
        specs = parse_block_specs("8x1,[4-4-8]x2,32x2")
        assert [s.repeats for s in specs] == [1, 2, 2]

    @pytest.mark.parametrize(
        "text,pos",
        [
            ("", 0),
            ("x3", 0),
            ("[8-8]x2", 0),        # two widths is not a bottleneck
            ("8x2,,16x1", 4),
            ("8x2,", 4),
            ("8x0", 0),            # zero repeats
            ("8x2 16x2", 3),
        ],
    )
    def test_parse_errors_carry_position(self, text, pos):
        with pytest.raises(ParseError) as err:
            parse_block_specs(text)
        assert err.value.pos == pos

    @given(st.lists(
        st.one_of(
            st.tuples(st.integers(1, 99)),
            st.tuples(st.integers(1, 99), st.integers(1, 99), st.integers(1, 99)),
        ).flatmap(lambda w: st.integers(1, 9).map(lambda r: BlockSpec(w, r))),
        min_size=1, max_size=5))
    @settings(max_examples=50, deadline=None)
    def test_round_trip(self, specs):
        assert parse_block_specs(format_block_specs(specs)) == specs


class TestReceptiveField:
    def test_single_conv(self):
        layers = [Conv(1, 1, 3, 1, "valid", name="c", group="g")]
        rf = receptive_field_of(layers)
        assert (rf.size, rf.stride) == (3, 1)

    def test_strided_stack(self):
        layers = [
            Conv(1, 2, 3, 2, "valid", name="c1", group="g"),
            Conv(2, 2, 3, 1, "valid", name="c2", group="g"),
        ]
        rf = receptive_field_of(layers)
        # 3, then + (3-1)*2
        assert (rf.size, rf.stride) == (7, 2)

    def test_pool_counts_like_conv(self):
        layers = [
            Conv(1, 2, 3, 1, "valid", name="c", group="g"),
            Pool("max", 2, 2, name="p", group="g"),
        ]
        rf = receptive_field_of(layers)
        assert (rf.size, rf.stride) == (4, 2)

    def test_stops_at_global_pool(self):
        layers = [
            Conv(1, 2, 3, 1, "valid", name="c", group="g"),
            GlobalAvgPool(name="gap", group="g"),
            Conv(2, 2, 9, 1, "valid", name="after", group="g"),
        ]
        rf = receptive_field_of(layers)
        assert rf.size == 3

    def test_matches_actual_cone_by_probing(self):
        # Jiggle one input pixel: exactly the cells within the cone move.
        rng = np.random.default_rng(0)
        layers = [
            Conv(1, 2, 3, 2, "valid", name="c1", group="g", rng=rng),
            ReLU(name="r", group="g"),
            Conv(2, 1, 3, 1, "valid", name="c2", group="g", rng=rng),
        ]
        net = NetworkGraph("probe", layers)
        rf = receptive_field_of(layers)
        x = rng.standard_normal((1, 1, 21, 21))
        base = net.forward(x)
        x2 = x.copy()
        x2[0, 0, 0, 0] += 1.0  # top-left pixel sits in cell (0,0)'s cone only
        moved = np.abs(net.forward(x2) - base) > 1e-12
        assert moved[0, :, 0, 0].any()
        assert not moved[0, :, 1:, :].any() and not moved[0, :, :, 1:].any()
        assert rf.stride == 2


class TestBackboneBuilders:
    @pytest.mark.parametrize("kind,rf,pad_t", [("mini-resnet", 59, 43), ("mini-vgg", 74, 58)])
    def test_geometry(self, kind, rf, pad_t):
        net = build_patch_net(kind, rng=np.random.default_rng(0))
        assert net.meta["backbone_rf"] == rf
        assert net.meta["stride"] == 16
        assert net.meta["feature_extent"] == 4
        (pt, pb), (pl, pr) = net.input_pad
        assert pt + pb == pad_t and pl + pr == pad_t
        assert abs(pt - pb) <= 1  # asymmetry only when the total is odd

    @pytest.mark.parametrize("kind", ["mini-resnet", "mini-vgg"])
    def test_patch_forward_shape(self, kind):
        net = build_patch_net(kind, rng=np.random.default_rng(1))
        y = net.forward(np.random.default_rng(2).standard_normal((3, 1, 64, 64)))
        assert y.shape == (3, 5)

    @pytest.mark.parametrize("kind", ["mini-resnet", "mini-vgg"])
    def test_out_shape_agrees_with_forward(self, kind):
        net = build_patch_net(kind, rng=np.random.default_rng(3))
        assert net.out_shape((2, 1, 64, 64)) == (2, 5)

    def test_groups_cover_bottom_top_head(self):
        net = build_patch_net("mini-resnet", rng=np.random.default_rng(0))
        assert net.groups() == ["bottom", "top", "head"]

    def test_indivisible_patch_size_rejected(self):
        with pytest.raises(ConfigError):
            build_patch_net("mini-vgg", patch_size=60, rng=np.random.default_rng(0))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            build_patch_net("alexnet", rng=np.random.default_rng(0))

    def test_custom_stage_spec(self):
        net = build_patch_net("mini-resnet", stages="[4-4-8]x1,[4-4-8]x1,[6-6-12]x1",
                              stem_width=6, rng=np.random.default_rng(0))
        y = net.forward(np.random.default_rng(1).standard_normal((1, 1, 64, 64)))
        assert y.shape == (1, 5)

    def test_wrong_spec_shape_for_kind(self):
        with pytest.raises(ConfigError):
            build_patch_net("mini-resnet", stages="16x2,32x2,64x2",
                            rng=np.random.default_rng(0))


class TestFreezing:
    def make(self):
        return build_patch_net("mini-vgg", stages="4x1,6x1,6x1,8x1",
                               rng=np.random.default_rng(7))

    def test_set_trainable_partitions_params(self):
        net = self.make()
        whole = {p.name for p in net.all_params()}
        net.set_trainable(["head"])
        head = {p.name for p in net.trainable_params()}
        assert head == {"head.fc.w", "head.fc.b"}
        net.set_trainable(["head", "top"])
        both = {p.name for p in net.trainable_params()}
        assert head < both < whole
        net.set_trainable("all")
        assert {p.name for p in net.trainable_params()} == whole

    def test_unknown_group_raises(self):
        with pytest.raises(UsageError):
            self.make().set_trainable(["backbone"])

    def test_backward_stops_below_earliest_trainable(self):
        net = self.make()
        net.set_trainable(["head"])
        x = np.random.default_rng(0).standard_normal((2, 1, 64, 64))
        y = net.forward(x, training=True)
        net.backward(np.ones_like(y))
        for p in net.all_params():
            if p.name.startswith("head."):
                assert p.grad is not None, p.name
            else:
                assert p.grad is None, p.name

    def test_frozen_batchnorm_uses_running_stats_in_training(self):
        net = self.make()
        net.set_trainable(["head"])
        bn = next(l for l in net.layers if isinstance(l, BatchNorm))
        rm = bn.state.running_mean.copy()
        x = np.random.default_rng(1).standard_normal((2, 1, 64, 64))
        net.forward(x, training=True)
        np.testing.assert_array_equal(bn.state.running_mean, rm)
        assert bn.state.updates == 0
        net.set_trainable("all")
        net.forward(x, training=True)
        assert bn.state.updates == 1
        assert not np.array_equal(bn.state.running_mean, rm)

    def test_fully_frozen_backward_rejected(self):
        net = self.make()
        for layer in net.layers:
            layer.trainable = False
        x = np.random.default_rng(2).standard_normal((1, 1, 64, 64))
        y = net.forward(x, training=True)
        with pytest.raises(UsageError):
            net.backward(np.ones_like(y))


class TestResidualUnit:
    def zeroed(self, unit):
        for p in unit.params():
            if p.name.endswith(".w"):
                p.value[:] = 0.0
        return unit

    @pytest.mark.parametrize("training", [True, False])
    def test_identity_invariant_valid_padding(self, training):
        # zero conv weights, fresh stats: output = centre crop of input + beta
        unit = self.zeroed(ResidualUnit(6, (4, 4, 6), 1, "valid", name="u", group="g",
                                        rng=np.random.default_rng(0)))
        beta = np.random.default_rng(1).standard_normal(6)
        unit.bn3.state.beta.value[:] = beta
        x = np.random.default_rng(2).standard_normal((2, 6, 9, 9))
        y = unit.forward(x, training=training)
        np.testing.assert_allclose(y, x[:, :, 1:-1, 1:-1] + beta[:, None, None], atol=1e-12)

    @pytest.mark.parametrize("training", [True, False])
    def test_identity_invariant_same_padding(self, training):
        unit = self.zeroed(ResidualUnit(5, (3, 3, 5), 1, "same", name="u", group="g",
                                        rng=np.random.default_rng(3)))
        beta = np.random.default_rng(4).standard_normal(5)
        unit.bn3.state.beta.value[:] = beta
        x = np.random.default_rng(5).standard_normal((1, 5, 7, 7))
        y = unit.forward(x, training=training)
        np.testing.assert_allclose(y, x + beta[:, None, None], atol=1e-12)

    @pytest.mark.parametrize("stride,in_ch,n", [(1, 4, 9), (2, 4, 12), (2, 4, 13)])
    def test_valid_unit_matches_probe_cone(self, stride, in_ch, n):
        # output spatial size must follow the main path exactly
        unit = ResidualUnit(in_ch, (3, 3, 6), stride, "valid", name="u", group="g",
                            rng=np.random.default_rng(6))
        x = np.random.default_rng(7).standard_normal((1, in_ch, n, n))
        y = unit.forward(x)
        assert y.shape == unit.out_shape(x.shape)

    def test_fd_gradient_through_unit(self):
        rng = np.random.default_rng(8)
        unit = ResidualUnit(3, (2, 2, 4), 2, "valid", name="u", group="g", rng=rng)
        net = NetworkGraph("one-unit", [unit])
        x = rng.standard_normal((2, 3, 8, 8))
        y = net.forward(x, training=True)
        r = rng.standard_normal(y.shape)
        net.zero_grads()
        # re-run forward so every sublayer holds a fresh training context
        y = net.forward(x, training=True)
        net.backward(r.copy())

        checked = 0
        for p in net.all_params():
            if p.value.size > 40 or p.grad is None:
                continue

            def loss(p=p):
                return float((net.forward(x, training=True) * r).sum())

            assert rel_err(p.grad, fd_grad(loss, p.value)) < 5e-5, p.name
            checked += 1
        assert checked >= 4

    def test_too_small_input_raises(self):
        unit = ResidualUnit(3, (2, 2, 4), 2, "valid", name="u", group="g",
                            rng=np.random.default_rng(9))
        with pytest.raises(DimensionError):
            unit.forward(np.zeros((1, 3, 4, 4)))


class TestGraphPlumbing:
    def test_dtype_mismatch_rejected(self):
        net = build_patch_net("mini-vgg", stages="4x1,4x1,4x1,4x1",
                              rng=np.random.default_rng(0))
        with pytest.raises(UsageError):
            net.forward(np.zeros((1, 1, 64, 64), dtype=np.float32))

    def test_float32_end_to_end(self):
        net = build_patch_net("mini-vgg", stages="4x1,4x1,4x1,4x1",
                              rng=np.random.default_rng(0), dtype=np.float32)
        y = net.forward(np.zeros((1, 1, 64, 64), dtype=np.float32))
        assert y.dtype == np.float32

    def test_topology_round_trip_structure(self):
        net = build_patch_net("mini-resnet", stages="[4-4-8]x1,[4-4-8]x1,[6-6-12]x1",
                              stem_width=4, rng=np.random.default_rng(0))
        clone = NetworkGraph.from_topology(net.topology())
        assert [type(l) for l in clone.layers] == [type(l) for l in net.layers]
        assert clone.input_pad == net.input_pad
        assert {p.name for p in clone.all_params()} == {p.name for p in net.all_params()}
        # fresh parameters are zero-valued, not copies
        fc = next(p for p in clone.all_params() if p.name == "head.fc.w")
        assert not fc.value.any()

    def test_duplicate_param_names_rejected(self):
        a = Dense(3, 2, name="fc", group="g", rng=np.random.default_rng(0))
        b = Dense(3, 2, name="fc", group="g", rng=np.random.default_rng(1))
        flat = Flatten(name="fl", group="g")
        with pytest.raises(UsageError):
            NetworkGraph("dup", [flat, a, b])

    def test_grad_zeroing(self):
        net = build_patch_net("mini-vgg", stages="4x1,4x1,4x1,4x1",
                              rng=np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((2, 1, 64, 64))
        y = net.forward(x, training=True)
        net.backward(np.ones_like(y))
        assert any(p.grad is not None for p in net.all_params())
        net.zero_grads()
        assert all(p.grad is None for p in net.all_params())
