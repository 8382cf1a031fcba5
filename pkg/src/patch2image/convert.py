"""Turning a trained patch classifier into a whole-image network.

The pooled head (global pool -> flatten -> dense) only ever looks at a
4x4 feature window, so it can be replayed at every grid position: a 4x4
average pool with stride 1, the dense layer applied positionwise, and a
positionwise softmax. The result maps an HxW image to a (classes, G, G)
probability grid with G = (n - patch)/stride + 1 per axis, one cell per
patch placement.

Because the parent network carries all of its zero padding at the input,
the converted net is a sliding-window machine in the strict sense, and
``equivalence_check`` verifies that against ``sliding_window_scores``,
which literally crops every window out of the padded image and runs the
patch net on the stack. Agreement is required to 1e-9, corners included.

The positionwise dense layer reuses the patch head's Parameter objects,
so fine-tuning the converted network *is* fine-tuning the patch network.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, EquivalenceError, UsageError
from .graph import NetworkGraph, parse_block_specs
from .kernels import pad_input, softmax
from .layers import (
    BatchNorm,
    Conv,
    Dense,
    Flatten,
    GlobalAvgPool,
    GlobalLSEPool,
    Pool,
    PositionwiseDense,
    PositionwiseSoftmax,
    ReLU,
    ResidualUnit,
)

IMAGE_CLASSES = ("no-cancer", "cancer")


def strip_head(patch_net: NetworkGraph):
    """Split a patch net into (backbone layers, [pool, flatten, dense])."""
    tail = patch_net.layers[-3:]
    if not (isinstance(tail[0], GlobalAvgPool) and isinstance(tail[1], Flatten)
            and isinstance(tail[2], Dense)):
        raise UsageError(
            f"{patch_net.name} does not end in pool/flatten/dense; nothing to strip"
        )
    return patch_net.layers[:-3], tail


def convolutionalize_head(patch_net: NetworkGraph) -> NetworkGraph:
    """Replace the pooled head with its positionwise twin, sharing weights."""
    backbone, (_, _, fc) = strip_head(patch_net)
    feat = patch_net.meta.get("feature_extent")
    if not feat:
        raise UsageError(f"{patch_net.name} has no recorded feature extent")
    layers = list(backbone) + [
        Pool("avg", feat, 1, name="head.pool", group="head"),
        PositionwiseDense.from_dense(fc, name="head.fc", group="head"),
        PositionwiseSoftmax(name="head.softmax", group="head"),
    ]
    meta = dict(patch_net.meta)
    meta["converted_from"] = patch_net.name
    return NetworkGraph(f"{patch_net.name}-fullconv", layers,
                        input_pad=patch_net.input_pad,
                        patch_size=patch_net.patch_size,
                        dtype=patch_net.dtype, meta=meta)


def heatmap_grid(image_hw, patch_size: int, stride: int):
    """Cells per axis: floor((n - patch)/stride) + 1, needing n >= patch."""
    h, w = image_hw
    if h < patch_size or w < patch_size:
        raise ConfigError(f"image {h}x{w} smaller than the {patch_size} patch")
    return ((h - patch_size) // stride + 1, (w - patch_size) // stride + 1)


# -- image-level tops ---------------------------------------------------------

ALLCONV_TOP = "12x2,16x2"
RESIDUAL_TOP = "[8-8-16]x2"
HYBRID_TOP = "[12-12-24]x2"
FC_TOP = {"pool": 5, "hidden": (64, 32)}

ATTACH_VARIANTS = ("allconv", "heatmap_residual", "heatmap_fc", "hybrid")


def _conv_stages(specs, in_ch, rng, dtype, prefix="itop"):
    layers = []
    ch = in_ch
    for si, spec in enumerate(specs, start=1):
        width = spec.widths[0]
        for ci in range(spec.repeats):
            stride = 2 if ci == 0 else 1
            layers.extend([
                Conv(ch, width, 3, stride, "same", bias=False,
                     name=f"{prefix}.s{si}c{ci + 1}", group="image-top", rng=rng, dtype=dtype),
                BatchNorm(width, name=f"{prefix}.s{si}bn{ci + 1}", group="image-top", dtype=dtype),
                ReLU(name=f"{prefix}.s{si}r{ci + 1}", group="image-top"),
            ])
            ch = width
    return layers, ch


def _residual_stages(specs, in_ch, rng, dtype, prefix="itop"):
    layers = []
    ch = in_ch
    for si, spec in enumerate(specs, start=1):
        for ui in range(spec.repeats):
            stride = 2 if ui == 0 else 1
            layers.append(ResidualUnit(ch, spec.widths, stride, "same",
                                       name=f"{prefix}.s{si}u{ui + 1}", group="image-top",
                                       rng=rng, dtype=dtype))
            ch = spec.widths[-1]
    return layers, ch


def attach_top(converted: NetworkGraph, variant: str, *, top_spec: str | None = None,
               image_hw=None, num_classes: int = len(IMAGE_CLASSES),
               rng: np.random.Generator | None = None) -> NetworkGraph:
    """Append an image-level classifier (freezing group 'image-top').

    allconv / heatmap_residual read the probability grid and stay fully
    convolutional, so the result still accepts any image size. heatmap_fc
    flattens a fixed grid (image_hw required) and is honestly fixed-size.
    hybrid discards the positionwise head and builds its residual top on
    raw backbone features.
    """
    if variant not in ATTACH_VARIANTS:
        raise ConfigError(f"unknown top variant {variant!r}; choose from {ATTACH_VARIANTS}")
    tail = converted.layers[-3:]
    if not (isinstance(tail[0], Pool) and isinstance(tail[1], PositionwiseDense)
            and isinstance(tail[2], PositionwiseSoftmax)):
        raise UsageError("attach_top expects a convolutionalized net (pool/posdense/possoftmax tail)")
    dtype = converted.dtype
    k = tail[1].fan_out  # heatmap channel count

    if variant == "allconv":
        specs = parse_block_specs(top_spec or ALLCONV_TOP)
        if any(len(s.widths) != 1 for s in specs):
            raise ConfigError("allconv top wants plain specs like 12x2")
        body, ch = _conv_stages(specs, k, rng, dtype)
        # log-sum-exp, not average: one lesion-sized region must be able to
        # carry a whole image, however many background cells surround it
        layers = converted.layers + body + [
            GlobalLSEPool(name="itop.pool", group="image-top"),
            Flatten(name="itop.flatten", group="image-top"),
            Dense(ch, num_classes, name="itop.fc", group="image-top", rng=rng, dtype=dtype),
        ]
    elif variant == "heatmap_residual":
        specs = parse_block_specs(top_spec or RESIDUAL_TOP)
        if any(len(s.widths) != 3 for s in specs):
            raise ConfigError("heatmap_residual top wants bottleneck specs like [8-8-16]x2")
        body, ch = _residual_stages(specs, k, rng, dtype)
        layers = converted.layers + body + [
            GlobalAvgPool(name="itop.pool", group="image-top"),
            Flatten(name="itop.flatten", group="image-top"),
            Dense(ch, num_classes, name="itop.fc", group="image-top", rng=rng, dtype=dtype),
        ]
    elif variant == "heatmap_fc":
        if image_hw is None:
            raise ConfigError("heatmap_fc is fixed-size: pass image_hw at build time")
        stride = converted.meta["stride"]
        grid = heatmap_grid(image_hw, converted.patch_size, stride)
        win = FC_TOP["pool"]
        if grid[0] < win or grid[1] < win:
            raise ConfigError(f"grid {grid} too small for the {win}x{win} pool")
        ph = (grid[0] - win) // win + 1
        pw = (grid[1] - win) // win + 1
        h1, h2 = FC_TOP["hidden"]
        layers = converted.layers + [
            Pool("max", win, win, name="itop.pool", group="image-top"),
            Flatten(name="itop.flatten", group="image-top", expect_hw=(ph, pw)),
            Dense(k * ph * pw, h1, name="itop.fc1", group="image-top", rng=rng, dtype=dtype),
            ReLU(name="itop.relu1", group="image-top"),
            Dense(h1, h2, name="itop.fc2", group="image-top", rng=rng, dtype=dtype),
            ReLU(name="itop.relu2", group="image-top"),
            Dense(h2, num_classes, name="itop.fc3", group="image-top", rng=rng, dtype=dtype),
        ]
    else:  # hybrid: residual stack on backbone features, heatmap head dropped
        specs = parse_block_specs(top_spec or HYBRID_TOP)
        if any(len(s.widths) != 3 for s in specs):
            raise ConfigError("hybrid top wants bottleneck specs like [12-12-24]x2")
        backbone = converted.layers[:-3]
        feat_ch = _backbone_channels(backbone)
        body, ch = _residual_stages(specs, feat_ch, rng, dtype)
        layers = backbone + body + [
            GlobalAvgPool(name="itop.pool", group="image-top"),
            Flatten(name="itop.flatten", group="image-top"),
            Dense(ch, num_classes, name="itop.fc", group="image-top", rng=rng, dtype=dtype),
        ]

    meta = dict(converted.meta)
    meta["top_variant"] = variant
    if image_hw is not None:
        meta["built_for_hw"] = list(image_hw)
    return NetworkGraph(f"{converted.name}-{variant}", layers,
                        input_pad=converted.input_pad, patch_size=converted.patch_size,
                        dtype=dtype, meta=meta)


def _backbone_channels(backbone) -> int:
    for layer in reversed(backbone):
        if isinstance(layer, ResidualUnit):
            return layer.out_ch
        if isinstance(layer, Conv):
            return layer.out_ch
        if isinstance(layer, (BatchNorm,)):
            return layer.channels
    raise UsageError("cannot infer backbone channel count")


# -- the oracle and the check -------------------------------------------------

def sliding_window_scores(patch_net: NetworkGraph, images: np.ndarray) -> np.ndarray:
    """Reference heatmap: run the patch net on every patch-sized crop.

    Crops are cut from the zero-padded image at the output stride, each one
    exactly the receptive-field extent of one grid cell, and fed with
    prepadded=True so no second padding happens. Returns (B, K, GH, GW)
    softmax probabilities.
    """
    if patch_net.input_pad is None:
        raise UsageError("patch net has no input padding; was it built by build_patch_net?")
    stride = patch_net.meta["stride"]
    padded = pad_input(images, patch_net.input_pad)
    (pt, pb), (pl, pr) = patch_net.input_pad
    crop = patch_net.patch_size + pt + pb  # receptive-field extent per cell
    gh, gw = heatmap_grid(images.shape[2:], patch_net.patch_size, stride)
    b = images.shape[0]
    k = patch_net.meta["num_classes"]
    out = np.empty((b, k, gh, gw), dtype=images.dtype)
    for i in range(gh):
        row = np.concatenate(
            [padded[:, :, i * stride:i * stride + crop, j * stride:j * stride + crop]
             for j in range(gw)], axis=0)
        logits = patch_net.forward(np.ascontiguousarray(row), training=False, prepadded=True)
        probs = softmax(logits, axis=1)
        for j in range(gw):
            out[:, :, i, j] = probs[j * b:(j + 1) * b]
    return out


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    where: tuple
    grid: tuple
    tol: float
    passed: bool

    def __str__(self):
        verdict = "OK" if self.passed else "MISMATCH"
        return (f"[{verdict}] grid {self.grid[0]}x{self.grid[1]}: "
                f"max |fullconv - sliding| = {self.max_abs_diff:.3e} "
                f"(tol {self.tol:.1e}) at {self.where}")


def equivalence_check(converted: NetworkGraph, patch_net: NetworkGraph,
                      images: np.ndarray, tol: float = 1e-9,
                      raise_on_fail: bool = False) -> EquivalenceReport:
    """Compare the convolutionalized net against the crop-by-crop oracle."""
    got = converted.forward(images, training=False)
    want = sliding_window_scores(patch_net, images)
    if got.shape != want.shape:
        raise EquivalenceError(float("inf"), ("shape", got.shape, want.shape), tol)
    diff = np.abs(got - want)
    where = np.unravel_index(int(diff.argmax()), diff.shape)
    report = EquivalenceReport(float(diff[where]), tuple(int(v) for v in where),
                               got.shape[2:], tol, bool(diff[where] <= tol))
    if raise_on_fail and not report.passed:
        raise EquivalenceError(report.max_abs_diff, report.where, tol)
    return report


# -- heatmap artifacts --------------------------------------------------------

def heatmap_to_csv(probs: np.ndarray, class_names, path) -> None:
    """One row per grid cell, full-precision probabilities per class."""
    if probs.ndim != 3 or probs.shape[0] != len(class_names):
        raise UsageError(f"expected (classes, GH, GW) with {len(class_names)} classes, "
                         f"got {probs.shape}")
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", *class_names])
        for i in range(probs.shape[1]):
            for j in range(probs.shape[2]):
                writer.writerow([i, j, *[repr(float(v)) for v in probs[:, i, j]]])


def heatmap_to_pngs(probs: np.ndarray, class_names, out_dir, stem: str) -> list[Path]:
    """One 8-bit grayscale PNG per class (white = probability 1).

    PNGs quantize; the CSV written alongside is the exact artifact.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ci, cname in enumerate(class_names):
        img = np.round(probs[ci] * 255.0).astype(np.uint8)
        p = out_dir / f"{stem}_{cname}.png"
        Image.fromarray(img, mode="L").save(p)
        paths.append(p)
    return paths
