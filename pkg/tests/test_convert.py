"""Convolutionalization, the sliding-window oracle, and image tops.

The heavyweight multi-draw equivalence sweep is an acceptance criterion;
here we pin the structural behaviour and a fast equivalence sample.
"""

import csv

import numpy as np
import pytest

from patch2image.convert import (
    ATTACH_VARIANTS,
    EquivalenceReport,
    attach_top,
    convolutionalize_head,
    equivalence_check,
    heatmap_grid,
    heatmap_to_csv,
    heatmap_to_pngs,
    sliding_window_scores,
    strip_head,
)
from patch2image.errors import (
    ConfigError,
    DimensionError,
    EquivalenceError,
    UsageError,
)
from patch2image.graph import PATCH_CLASSES, build_patch_net
from patch2image.kernels import softmax

SMALL_RESNET = dict(stages="[4-4-8]x1,[4-4-8]x1,[6-6-12]x1", stem_width=4)
SMALL_VGG = dict(stages="4x1,6x1,6x1,8x1")


def small_net(kind, seed=0, **kw):
    base = SMALL_RESNET if kind == "mini-resnet" else SMALL_VGG
    return build_patch_net(kind, rng=np.random.default_rng(seed), **{**base, **kw})


def warm_up(net, seed=99, steps=3):
    """A few training-mode forwards so batch-norm running stats move off
    their (0, 1) defaults; equivalence must not depend on fresh stats."""
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        net.forward(rng.standard_normal((4, 1, 64, 64)), training=True)
    return net


class TestGridArithmetic:
    @pytest.mark.parametrize("n,cells", [(64, 1), (80, 2), (96, 3), (160, 7), (256, 13)])
    def test_cells_per_axis(self, n, cells):
        assert heatmap_grid((n, n), 64, 16) == (cells, cells)

    def test_rectangular(self):
        assert heatmap_grid((96, 160), 64, 16) == (3, 7)

    def test_sub_patch_image_rejected(self):
        with pytest.raises(ConfigError):
            heatmap_grid((48, 96), 64, 16)


class TestStripAndConvolutionalize:
    def test_strip_head_splits_at_the_pool(self):
        net = small_net("mini-vgg")
        backbone, head = strip_head(net)
        assert len(backbone) + 3 == len(net.layers)
        assert head[2].name == "head.fc"

    def test_strip_requires_pooled_head(self):
        net = small_net("mini-vgg")
        conv = convolutionalize_head(net)
        with pytest.raises(UsageError):
            strip_head(conv)

    def test_head_weights_are_shared_not_copied(self):
        net = small_net("mini-resnet")
        conv = convolutionalize_head(net)
        fc = next(p for p in net.all_params() if p.name == "head.fc.w")
        pos = next(p for p in conv.all_params() if p.name == "head.fc.w")
        assert fc is pos

    def test_single_patch_grid_is_softmaxed_head(self):
        # On one 64x64 patch the converted net yields a 1x1 grid equal to
        # softmax of the patch logits; same kernels, so near-bitwise.
        net = small_net("mini-resnet")
        conv = convolutionalize_head(net)
        x = np.random.default_rng(5).standard_normal((3, 1, 64, 64))
        grid = conv.forward(x)
        assert grid.shape == (3, 5, 1, 1)
        want = softmax(net.forward(x), axis=1)
        np.testing.assert_allclose(grid[:, :, 0, 0], want, atol=1e-15)

    def test_probabilities_sum_to_one_per_cell(self):
        conv = convolutionalize_head(small_net("mini-vgg"))
        x = np.random.default_rng(6).standard_normal((1, 1, 96, 96))
        grid = conv.forward(x)
        np.testing.assert_allclose(grid.sum(axis=1), 1.0, atol=1e-12)


class TestEquivalence:
    @pytest.mark.parametrize("kind", ["mini-resnet", "mini-vgg"])
    def test_fresh_net_96(self, kind):
        net = small_net(kind, seed=3)
        rep = equivalence_check(convolutionalize_head(net), net,
                                np.random.default_rng(8).standard_normal((2, 1, 96, 96)))
        assert rep.passed, str(rep)
        assert rep.grid == (3, 3)

    @pytest.mark.parametrize("kind", ["mini-resnet", "mini-vgg"])
    def test_after_stats_warm_up(self, kind):
        net = warm_up(small_net(kind, seed=4))
        rep = equivalence_check(convolutionalize_head(net), net,
                                np.random.default_rng(9).standard_normal((1, 1, 112, 112)))
        assert rep.passed, str(rep)

    def test_oracle_shape_and_normalization(self):
        net = small_net("mini-vgg", seed=5)
        imgs = np.random.default_rng(10).standard_normal((2, 1, 96, 128))
        ref = sliding_window_scores(net, imgs)
        assert ref.shape == (2, 5, 3, 5)
        np.testing.assert_allclose(ref.sum(axis=1), 1.0, atol=1e-12)

    def test_mismatched_nets_fail_loudly(self):
        a = small_net("mini-vgg", seed=1)
        b = small_net("mini-vgg", seed=2)  # different weights entirely
        conv_a = convolutionalize_head(a)
        img = np.random.default_rng(11).standard_normal((1, 1, 96, 96))
        rep = equivalence_check(conv_a, b, img)
        assert not rep.passed
        with pytest.raises(EquivalenceError):
            equivalence_check(conv_a, b, img, raise_on_fail=True)

    def test_report_prints_verdict(self):
        rep = EquivalenceReport(1.2e-13, (0, 1, 2, 2), (3, 3), 1e-9, True)
        assert "OK" in str(rep) and "3x3" in str(rep)


class TestAttachTop:
    @pytest.mark.parametrize("variant", ["allconv", "heatmap_residual"])
    def test_fullconv_tops_take_any_size(self, variant):
        conv = convolutionalize_head(small_net("mini-resnet", seed=6))
        net = attach_top(conv, variant, rng=np.random.default_rng(1))
        for n in (112, 176):
            y = net.forward(np.random.default_rng(2).standard_normal((2, 1, n, n)))
            assert y.shape == (2, 2)

    def test_heatmap_fc_is_pinned_to_its_build_size(self):
        conv = convolutionalize_head(small_net("mini-vgg", seed=7))
        net = attach_top(conv, "heatmap_fc", image_hw=(144, 144),
                         rng=np.random.default_rng(3))
        ok = net.forward(np.random.default_rng(4).standard_normal((1, 1, 144, 144)))
        assert ok.shape == (1, 2)
        with pytest.raises(DimensionError) as err:
            net.forward(np.random.default_rng(5).standard_normal((1, 1, 224, 224)))
        assert "1x1" in str(err.value)  # names the grid it was built for

    def test_heatmap_fc_requires_build_size(self):
        conv = convolutionalize_head(small_net("mini-vgg", seed=8))
        with pytest.raises(ConfigError):
            attach_top(conv, "heatmap_fc", rng=np.random.default_rng(0))

    def test_hybrid_drops_the_positionwise_head(self):
        conv = convolutionalize_head(small_net("mini-vgg", seed=9))
        net = attach_top(conv, "hybrid", rng=np.random.default_rng(1))
        names = [l.name for l in net.layers]
        assert "head.fc" not in names and "head.softmax" not in names
        y = net.forward(np.random.default_rng(2).standard_normal((1, 1, 128, 128)))
        assert y.shape == (1, 2)

    def test_unknown_variant(self):
        conv = convolutionalize_head(small_net("mini-vgg", seed=10))
        with pytest.raises(ConfigError):
            attach_top(conv, "transformer")

    def test_needs_convolutionalized_input(self):
        with pytest.raises(UsageError):
            attach_top(small_net("mini-vgg", seed=11), "allconv")

    def test_image_top_is_its_own_freezing_group(self):
        conv = convolutionalize_head(small_net("mini-resnet", seed=12))
        net = attach_top(conv, "allconv", rng=np.random.default_rng(6))
        assert net.groups() == ["bottom", "top", "head", "image-top"]
        net.set_trainable(["image-top"])
        assert all(p.name.startswith("itop.") for p in net.trainable_params())

    def test_all_variants_constructible(self):
        conv = convolutionalize_head(small_net("mini-resnet", seed=13))
        for variant in ATTACH_VARIANTS:
            kw = {"image_hw": (144, 144)} if variant == "heatmap_fc" else {}
            net = attach_top(conv, variant, rng=np.random.default_rng(7), **kw)
            assert net.meta["top_variant"] == variant

    def test_allconv_top_survives_checkpoint_round_trip(self, tmp_path):
        from patch2image.checkpoint import load_graph, save_checkpoint

        conv = convolutionalize_head(small_net("mini-resnet", seed=14))
        net = attach_top(conv, "allconv", rng=np.random.default_rng(8))
        x = np.random.default_rng(9).standard_normal((2, 1, 112, 112))
        before = net.forward(x)
        save_checkpoint(tmp_path / "a.ckpt", net, meta={})
        again, _ = load_graph(tmp_path / "a.ckpt")
        np.testing.assert_array_equal(before, again.forward(x))

    def test_allconv_top_pools_by_smooth_max(self):
        from patch2image.layers import GlobalLSEPool

        conv = convolutionalize_head(small_net("mini-resnet", seed=15))
        net = attach_top(conv, "allconv", rng=np.random.default_rng(10))
        pool = [l for l in net.layers if l.name == "itop.pool"][0]
        assert isinstance(pool, GlobalLSEPool)


class TestHeatmapArtifacts:
    def test_csv_round_trips_exact_floats(self, tmp_path):
        rng = np.random.default_rng(20)
        probs = softmax(rng.standard_normal((5, 3, 4)).reshape(5, -1).T, axis=1).T.reshape(5, 3, 4)
        path = tmp_path / "cells.csv"
        heatmap_to_csv(probs, PATCH_CLASSES, path)
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12
        for row in rows:
            i, j = int(row["row"]), int(row["col"])
            for ci, cname in enumerate(PATCH_CLASSES):
                assert float(row[cname]) == probs[ci, i, j]  # repr round-trip

    def test_pngs_one_per_class(self, tmp_path):
        from PIL import Image

        probs = np.zeros((5, 3, 3))
        probs[2, 1, 1] = 1.0
        paths = heatmap_to_pngs(probs, PATCH_CLASSES, tmp_path, "img007")
        assert len(paths) == 5
        img = np.asarray(Image.open(tmp_path / "img007_mass-malignant.png"))
        assert img.shape == (3, 3)
        assert img[1, 1] == 255 and img.sum() == 255

    def test_csv_shape_guard(self, tmp_path):
        with pytest.raises(UsageError):
            heatmap_to_csv(np.zeros((4, 3, 3)), PATCH_CLASSES, tmp_path / "x.csv")
