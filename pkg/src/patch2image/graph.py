"""Network assembly: block specs, receptive fields, sequential graphs.

The patch networks built here follow one structural rule: every spatial
operator runs without internal padding, and all zero padding the network
will ever need is applied once, to the input. The total pad is derived
from the backbone's receptive-field cone, sized so that one 64x64 patch
yields a 4x4 feature map (patch size / output stride) ahead of the global
pool. That single rule is what later makes the fully convolutional form
agree with a sliding window to the last bit, border cells included.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, ParseError, UsageError
from .kernels import Parameter, pad_input
from .layers import (
    BatchNorm,
    Conv,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    Pool,
    ReLU,
    ResidualUnit,
    layer_from_topology,
)

PATCH_CLASSES = ("background", "mass-benign", "mass-malignant",
                 "calc-benign", "calc-malignant")


@dataclass(frozen=True)
class BlockSpec:
    """One stage of a backbone or image-top stack.

    widths has one entry for plain conv stages ("16x3") and three for
    bottleneck stages ("[8-8-24]x2"); repeats is the unit count.
    """

    widths: tuple[int, ...]
    repeats: int

    def __str__(self):
        if len(self.widths) == 1:
            return f"{self.widths[0]}x{self.repeats}"
        return "[" + "-".join(str(w) for w in self.widths) + f"]x{self.repeats}"


_PLAIN = re.compile(r"(\d+)x(\d+)")
_BOTTLENECK = re.compile(r"\[(\d+)-(\d+)-(\d+)\]x(\d+)")


def parse_block_specs(text: str) -> list[BlockSpec]:
    """Parse a comma-separated stage list like "[8-8-24]x2,[12-12-36]x2".

    Raises ParseError with the character position of the first problem.
    """
    specs = []
    pos = 0
    text = text.strip()
    if not text:
        raise ParseError(text, 0, "empty spec")
    while pos < len(text):
        m = _BOTTLENECK.match(text, pos) or _PLAIN.match(text, pos)
        if m is None:
            raise ParseError(text, pos, "expected WIDTHxN or [A-B-C]xN")
        nums = [int(g) for g in m.groups()]
        widths, repeats = tuple(nums[:-1]), nums[-1]
        if repeats < 1:
            raise ParseError(text, pos, "repeat count must be >= 1")
        if any(w < 1 for w in widths):
            raise ParseError(text, pos, "widths must be >= 1")
        specs.append(BlockSpec(widths, repeats))
        pos = m.end()
        if pos < len(text):
            if text[pos] != ",":
                raise ParseError(text, pos, "expected ',' between stages")
            pos += 1
            if pos == len(text):
                raise ParseError(text, pos, "trailing comma")
    return specs


def format_block_specs(specs) -> str:
    return ",".join(str(s) for s in specs)


@dataclass(frozen=True)
class ReceptiveField:
    """Cone geometry of a stack of sliding operators: one output cell sees
    a size x size input window, and adjacent cells are stride apart."""

    size: int
    stride: int


def _geometry(layer: Layer):
    """(kernel, stride) pairs describing a layer's sliding-window effect.
    None marks the end of the spatial part of the network."""
    if isinstance(layer, Conv):
        if layer.kernel[0] != layer.kernel[1] or layer.stride[0] != layer.stride[1]:
            raise UsageError(f"{layer.name}: receptive-field math assumes square kernels")
        return [(layer.kernel[0], layer.stride[0])]
    if isinstance(layer, Pool):
        if layer.window[0] != layer.window[1] or layer.stride[0] != layer.stride[1]:
            raise UsageError(f"{layer.name}: receptive-field math assumes square windows")
        return [(layer.window[0], layer.stride[0])]
    if isinstance(layer, ResidualUnit):
        # main path 1x1(s) -> 3x3(1) -> 1x1(1) dominates the shortcut's cone
        return [(1, layer.stride), (3, 1), (1, 1)]
    if isinstance(layer, (BatchNorm, ReLU)):
        return []
    return None


def receptive_field_of(layers) -> ReceptiveField:
    """Compose the cone over the spatial prefix of a layer list."""
    size, stride = 1, 1
    for layer in layers:
        geo = _geometry(layer)
        if geo is None:
            break
        for k, s in geo:
            size += (k - 1) * stride
            stride *= s
    return ReceptiveField(size, stride)


class NetworkGraph:
    """A straight-line stack of layers with named freezing groups.

    input_pad, when set, is applied to every input unless the caller says
    the array is already padded (the sliding-window oracle feeds crops cut
    from a padded image, which must not be padded again).
    """

    def __init__(self, name: str, layers: list[Layer], *, input_pad=None,
                 patch_size: int | None = None, dtype=np.float64, meta: dict | None = None):
        if not layers:
            raise UsageError("a network needs at least one layer")
        self.name = name
        self.layers = list(layers)
        self.input_pad = tuple(tuple(p) for p in input_pad) if input_pad else None
        self.patch_size = patch_size
        self.dtype = np.dtype(dtype)
        self.meta = dict(meta or {})
        seen = {}
        for p in self.all_params():
            if p.name in seen and seen[p.name] is not p:
                raise UsageError(f"two different parameters share the name {p.name!r}")
            seen[p.name] = p

    # -- structure ---------------------------------------------------------

    def groups(self) -> list[str]:
        out = []
        for layer in self.layers:
            if layer.group not in out:
                out.append(layer.group)
        return out

    def all_params(self) -> list[Parameter]:
        out, ids = [], set()
        for layer in self.layers:
            for p in layer.params():
                if id(p) not in ids:
                    ids.add(id(p))
                    out.append(p)
        return out

    def trainable_params(self) -> list[Parameter]:
        out, ids = [], set()
        for layer in self.layers:
            if not layer.trainable:
                continue
            for p in layer.params():
                if id(p) not in ids:
                    ids.add(id(p))
                    out.append(p)
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.all_params())

    def set_trainable(self, groups) -> None:
        """Freeze everything outside ``groups`` ('all' unfreezes everything)."""
        if groups == "all":
            for layer in self.layers:
                layer.trainable = True
            return
        wanted = set([groups] if isinstance(groups, str) else groups)
        known = set(self.groups())
        unknown = wanted - known
        if unknown:
            raise UsageError(f"unknown group(s) {sorted(unknown)}; this net has {sorted(known)}")
        for layer in self.layers:
            layer.trainable = layer.group in wanted
        if not self.trainable_params():
            raise UsageError(f"groups {sorted(wanted)} contain no parameters")

    def zero_grads(self) -> None:
        for p in self.all_params():
            p.zero_grad()

    # -- execution ---------------------------------------------------------

    def forward(self, x: np.ndarray, training: bool = False, prepadded: bool = False):
        if x.dtype != self.dtype:
            raise UsageError(f"{self.name} is a {self.dtype} network, input is {x.dtype}")
        if self.input_pad is not None and not prepadded:
            x = pad_input(x, self.input_pad)
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, gy: np.ndarray) -> None:
        """Backpropagate from the output. The walk stops below the earliest
        layer holding trainable parameters; nothing deeper is touched."""
        stop = None
        for i, layer in enumerate(self.layers):
            if layer.trainable and layer.params():
                stop = i
                break
        if stop is None:
            raise UsageError("backward on a fully frozen network")
        g = gy
        for layer in reversed(self.layers[stop:]):
            g = layer.backward(g)

    def out_shape(self, in_shape: tuple, prepadded: bool = False) -> tuple:
        b, c, h, w = in_shape
        if self.input_pad is not None and not prepadded:
            (pt, pb), (pl, pr) = self.input_pad
            h, w = h + pt + pb, w + pl + pr
        shape = (b, c, h, w)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    # -- serialization support ----------------------------------------------

    def topology(self) -> dict:
        return {
            "name": self.name,
            "patch_size": self.patch_size,
            "input_pad": [list(p) for p in self.input_pad] if self.input_pad else None,
            "dtype": self.dtype.name,
            "meta": self.meta,
            "layers": [layer.topology() for layer in self.layers],
        }

    @classmethod
    def from_topology(cls, topo: dict) -> "NetworkGraph":
        dtype = np.dtype(topo["dtype"])
        layers = [layer_from_topology(t, dtype) for t in topo["layers"]]
        return cls(topo["name"], layers, input_pad=topo.get("input_pad"),
                   patch_size=topo.get("patch_size"), dtype=dtype,
                   meta=topo.get("meta") or {})

    def __repr__(self):
        return (f"NetworkGraph({self.name!r}, {len(self.layers)} layers, "
                f"{self.param_count()} params, groups={self.groups()})")


# -- backbone builders -------------------------------------------------------

RESNET_STAGES = "[8-8-24]x1,[12-12-36]x1,[16-16-48]x1"
VGG_STAGES = "8x1,16x2,24x2,32x2"


def _input_pad_for(layers, patch_size: int):
    rf = receptive_field_of(layers)
    if patch_size % rf.stride != 0:
        raise ConfigError(
            f"patch size {patch_size} is not a multiple of the output stride {rf.stride}"
        )
    total = rf.size - rf.stride
    before = total // 2
    return ((before, total - before), (before, total - before)), rf


def build_patch_net(kind: str, *, num_classes: int = len(PATCH_CLASSES),
                    stages: str | None = None, stem_width: int = 12,
                    patch_size: int = 64, in_channels: int = 1,
                    rng: np.random.Generator | None = None,
                    dtype=np.float64) -> NetworkGraph:
    """Build one of the two standard patch backbones plus its pooled head.

    kind='mini-resnet': stride-2 conv stem, then bottleneck stages whose
    first unit downsamples. kind='mini-vgg': conv stages separated by 2x2
    max pools. Both end at overall stride 16 and carry group tags bottom /
    top (last stage) / head (pool + classifier).
    """
    if kind == "mini-resnet":
        specs = parse_block_specs(stages or RESNET_STAGES)
        if any(len(s.widths) != 3 for s in specs):
            raise ConfigError("mini-resnet stages must be bottleneck specs like [8-8-24]x2")
        layers: list[Layer] = [
            Conv(in_channels, stem_width, 3, 2, "valid", bias=False,
                 name="stem.conv", group="bottom", rng=rng, dtype=dtype),
            BatchNorm(stem_width, name="stem.bn", group="bottom", dtype=dtype),
        ]
        ch = stem_width
        for si, spec in enumerate(specs, start=1):
            group = "top" if si == len(specs) else "bottom"
            for ui in range(spec.repeats):
                stride = 2 if ui == 0 else 1
                layers.append(ResidualUnit(ch, spec.widths, stride, "valid",
                                           name=f"stage{si}.unit{ui + 1}", group=group,
                                           rng=rng, dtype=dtype))
                ch = spec.widths[-1]
    elif kind == "mini-vgg":
        specs = parse_block_specs(stages or VGG_STAGES)
        if any(len(s.widths) != 1 for s in specs):
            raise ConfigError("mini-vgg stages must be plain specs like 16x2")
        layers = []
        ch = in_channels
        for si, spec in enumerate(specs, start=1):
            group = "top" if si == len(specs) else "bottom"
            width = spec.widths[0]
            for ci in range(spec.repeats):
                layers.extend([
                    Conv(ch, width, 3, 1, "valid", bias=False,
                         name=f"stage{si}.conv{ci + 1}", group=group, rng=rng, dtype=dtype),
                    BatchNorm(width, name=f"stage{si}.bn{ci + 1}", group=group, dtype=dtype),
                    ReLU(name=f"stage{si}.relu{ci + 1}", group=group),
                ])
                ch = width
            layers.append(Pool("max", 2, 2, name=f"stage{si}.pool", group=group))
    else:
        raise ConfigError(f"unknown backbone kind {kind!r}; use 'mini-resnet' or 'mini-vgg'")

    pad, rf = _input_pad_for(layers, patch_size)
    feat = patch_size // rf.stride
    layers.extend([
        GlobalAvgPool(name="head.pool", group="head"),
        Flatten(name="head.flatten", group="head"),
        Dense(ch, num_classes, name="head.fc", group="head", rng=rng, dtype=dtype),
    ])
    meta = {"kind": kind, "backbone_rf": rf.size, "stride": rf.stride,
            "feature_extent": feat, "num_classes": num_classes,
            "stages": format_block_specs(specs), "in_channels": in_channels}
    return NetworkGraph(f"patch-{kind}", layers, input_pad=pad,
                        patch_size=patch_size, dtype=dtype, meta=meta)
