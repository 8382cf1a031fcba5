"""Layer objects: kernels plus parameter ownership and a training cache.

A layer stores the forward context exactly when asked to run in training
mode, consumes it on backward, and exposes its learnables as Parameter
objects. ``trainable`` is a freezing flag: for most layers it only gates
the optimizer, but batch-norm layers additionally switch to their running
statistics when frozen, so a frozen layer's behaviour stops depending on
batch composition.

``topology()`` returns a JSON-able description sufficient to rebuild the
layer with fresh parameters; values travel separately (checkpoints).
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import DimensionError, UsageError
from .kernels import BatchNormState, Parameter


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Fan-in-scaled normal init, the right variance for ReLU stacks."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    name: str = ""
    group: str = ""
    trainable: bool = True

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def topology(self) -> dict:
        raise NotImplementedError

    def _take_ctx(self):
        ctx = getattr(self, "_ctx", None)
        if ctx is None:
            raise UsageError(f"backward before training-mode forward in layer {self.name!r}")
        self._ctx = None
        return ctx

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, group={self.group!r})"


class Conv(Layer):
    def __init__(self, in_ch: int, out_ch: int, kernel=3, stride=1, padding="valid",
                 bias: bool = True, *, name: str, group: str,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.name, self.group = name, group
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = (kh, kw)
        self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self.padding = padding
        fan_in = in_ch * kh * kw
        if rng is None:
            w = np.zeros((out_ch, in_ch, kh, kw), dtype=dtype)
        else:
            w = he_normal(rng, (out_ch, in_ch, kh, kw), fan_in, dtype)
        self.weight = Parameter(w, f"{name}.w")
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype), f"{name}.b") if bias else None
        self._ctx = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training=False):
        y, ctx = K.conv2d_forward(x, self.weight, self.bias, self.stride, self.padding)
        self._ctx = ctx if training else None
        return y

    def backward(self, gy):
        return K.conv2d_backward(gy, self._take_ctx())

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        if c != self.in_ch:
            raise DimensionError(f"{self.name}: expected {self.in_ch} channels, got {c}")
        (pt, pb), (pl, pr) = K.resolve_padding(self.padding, (h, w), self.kernel, self.stride)
        oh = (h + pt + pb - self.kernel[0]) // self.stride[0] + 1
        ow = (w + pl + pr - self.kernel[1]) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise DimensionError(f"{self.name}: input {h}x{w} too small for kernel {self.kernel}")
        return (b, self.out_ch, oh, ow)

    def topology(self):
        return {"kind": "conv", "name": self.name, "group": self.group,
                "in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": list(self.kernel), "stride": list(self.stride),
                "padding": self.padding if isinstance(self.padding, str)
                else [list(p) for p in self.padding],
                "bias": self.bias is not None}


class BatchNorm(Layer):
    def __init__(self, channels: int, *, name: str, group: str,
                 momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.name, self.group = name, group
        self.channels = channels
        self.state = BatchNormState.create(channels, dtype=dtype, momentum=momentum,
                                           eps=eps, name=name)
        self._ctx = None

    def params(self):
        return [self.state.gamma, self.state.beta]

    def forward(self, x, training=False):
        # Frozen batch norm never sees batch statistics: inference formula,
        # running buffers untouched, even mid-training.
        mode = training and self.trainable
        y, ctx = K.batchnorm_apply(x, self.state, training=mode)
        self._ctx = ctx if training else None
        return y

    def backward(self, gy):
        return K.batchnorm_backward(gy, self._take_ctx())

    def out_shape(self, in_shape):
        if in_shape[1] != self.channels:
            raise DimensionError(f"{self.name}: expected {self.channels} channels, got {in_shape[1]}")
        return in_shape

    def topology(self):
        return {"kind": "batchnorm", "name": self.name, "group": self.group,
                "channels": self.channels, "momentum": self.state.momentum,
                "eps": self.state.eps}


class ReLU(Layer):
    def __init__(self, *, name: str, group: str):
        self.name, self.group = name, group
        self._ctx = None

    def forward(self, x, training=False):
        y, ctx = K.relu_forward(x)
        self._ctx = ctx if training else None
        return y

    def backward(self, gy):
        return K.relu_backward(gy, self._take_ctx())

    def out_shape(self, in_shape):
        return in_shape

    def topology(self):
        return {"kind": "relu", "name": self.name, "group": self.group}


class Pool(Layer):
    def __init__(self, kind: str, window, stride=None, *, name: str, group: str):
        self.name, self.group = name, group
        self.kind = kind
        self.window = (window, window) if isinstance(window, int) else tuple(window)
        if stride is None:
            self.stride = self.window
        else:
            self.stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
        self._ctx = None

    def forward(self, x, training=False):
        y, ctx = K.pool2d_forward(x, self.kind, self.window, self.stride)
        self._ctx = ctx if training else None
        return y

    def backward(self, gy):
        return K.pool2d_backward(gy, self._take_ctx())

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        if self.window[0] > h or self.window[1] > w:
            raise DimensionError(f"{self.name}: window {self.window} exceeds input {h}x{w}")
        oh = (h - self.window[0]) // self.stride[0] + 1
        ow = (w - self.window[1]) // self.stride[1] + 1
        return (b, c, oh, ow)

    def topology(self):
        return {"kind": "pool", "name": self.name, "group": self.group,
                "pool": self.kind, "window": list(self.window), "stride": list(self.stride)}


class GlobalAvgPool(Layer):
    """Average over the whole spatial extent, whatever it currently is."""

    def __init__(self, *, name: str, group: str):
        self.name, self.group = name, group
        self._ctx = None

    def forward(self, x, training=False):
        y, ctx = K.pool2d_forward(x, "avg", x.shape[2:])
        self._ctx = ctx if training else None
        return y

    def backward(self, gy):
        return K.pool2d_backward(gy, self._take_ctx())

    def out_shape(self, in_shape):
        return (in_shape[0], in_shape[1], 1, 1)

    def topology(self):
        return {"kind": "gap", "name": self.name, "group": self.group}


class GlobalLSEPool(Layer):
    """Log-sum-exp over the whole spatial extent: a smooth maximum, so one
    strongly responding region dominates instead of being averaged away.
    Size-independent like GlobalAvgPool (constant maps pass through)."""

    def __init__(self, *, name: str, group: str):
        self.name, self.group = name, group
        self._ctx = None

    def forward(self, x, training=False):
        y, ctx = K.lse_pool_forward(x)
        self._ctx = ctx if training else None
        return y

    def backward(self, gy):
        return K.lse_pool_backward(gy, self._take_ctx())

    def out_shape(self, in_shape):
        return (in_shape[0], in_shape[1], 1, 1)

    def topology(self):
        return {"kind": "lsepool", "name": self.name, "group": self.group}


class Flatten(Layer):
    """(B,C,H,W) -> (B, C*H*W). With expect_hw set the spatial extent is
    pinned at build time; anything else raises, naming both sizes. That is
    what makes a flatten-headed net honestly fixed-input-size."""

    def __init__(self, *, name: str, group: str, expect_hw=None):
        self.name, self.group = name, group
        self.expect_hw = tuple(expect_hw) if expect_hw is not None else None
        self._shape = None

    def forward(self, x, training=False):
        if self.expect_hw is not None and x.shape[2:] != self.expect_hw:
            raise DimensionError(
                f"{self.name}: built for a {self.expect_hw[0]}x{self.expect_hw[1]} grid, "
                f"got {x.shape[2]}x{x.shape[3]}; this head cannot change input size"
            )
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gy):
        if self._shape is None:
            raise UsageError(f"backward before forward in layer {self.name!r}")
        return gy.reshape(self._shape)

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        if self.expect_hw is not None and (h, w) != self.expect_hw:
            raise DimensionError(
                f"{self.name}: built for a {self.expect_hw[0]}x{self.expect_hw[1]} grid, got {h}x{w}"
            )
        return (b, c * h * w)

    def topology(self):
        return {"kind": "flatten", "name": self.name, "group": self.group,
                "expect_hw": list(self.expect_hw) if self.expect_hw else None}


class Dense(Layer):
    def __init__(self, fan_in: int, fan_out: int, *, name: str, group: str,
                 rng: np.random.Generator | None = None, dtype=np.float64,
                 weight: Parameter | None = None, bias: Parameter | None = None):
        self.name, self.group = name, group
        self.fan_in, self.fan_out = fan_in, fan_out
        if weight is not None:
            self.weight, self.bias = weight, bias
        else:
            if rng is None:
                w = np.zeros((fan_in, fan_out), dtype=dtype)
            else:
                w = he_normal(rng, (fan_in, fan_out), fan_in, dtype)
            self.weight = Parameter(w, f"{name}.w")
            self.bias = Parameter(np.zeros(fan_out, dtype=dtype), f"{name}.b")
        self._ctx = None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training=False):
        y, ctx = K.dense_forward(x, self.weight, self.bias)
        self._ctx = ctx if training else None
        return y

    def backward(self, gy):
        return K.dense_backward(gy, self._take_ctx())

    def out_shape(self, in_shape):
        if in_shape[1] != self.fan_in:
            raise DimensionError(f"{self.name}: expected {self.fan_in} features, got {in_shape[1]}")
        return (in_shape[0], self.fan_out)

    def topology(self):
        return {"kind": "dense", "name": self.name, "group": self.group,
                "fan_in": self.fan_in, "fan_out": self.fan_out,
                "bias": self.bias is not None}


class PositionwiseDense(Layer):
    """The dense head applied independently at every spatial position.

    Equivalent to a 1x1 convolution with the dense weight matrix. Built from
    an existing Dense it reuses that layer's Parameter objects, so the
    converted network and the patch network share weights, not copies.
    """

    def __init__(self, fan_in: int, fan_out: int, *, name: str, group: str,
                 weight: Parameter | None = None, bias: Parameter | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float64):
        self.name, self.group = name, group
        self.fan_in, self.fan_out = fan_in, fan_out
        if weight is not None:
            self.weight, self.bias = weight, bias
        else:
            w = (he_normal(rng, (fan_in, fan_out), fan_in, dtype) if rng is not None
                 else np.zeros((fan_in, fan_out), dtype=dtype))
            self.weight = Parameter(w, f"{name}.w")
            self.bias = Parameter(np.zeros(fan_out, dtype=dtype), f"{name}.b")
        self._ctx = None

    @classmethod
    def from_dense(cls, dense: Dense, *, name: str, group: str) -> "PositionwiseDense":
        return cls(dense.fan_in, dense.fan_out, name=name, group=group,
                   weight=dense.weight, bias=dense.bias)

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x, training=False):
        b, c, h, w = x.shape
        if c != self.fan_in:
            raise DimensionError(f"{self.name}: expected {self.fan_in} channels, got {c}")
        flat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(b * h * w, c)
        y, ctx = K.dense_forward(flat, self.weight, self.bias)
        self._ctx = (ctx, (b, h, w)) if training else None
        return np.ascontiguousarray(y.reshape(b, h, w, self.fan_out).transpose(0, 3, 1, 2))

    def backward(self, gy):
        if self._ctx is None:
            raise UsageError(f"backward before training-mode forward in layer {self.name!r}")
        ctx, (b, h, w) = self._ctx
        self._ctx = None
        flat = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(b * h * w, self.fan_out)
        gx = K.dense_backward(flat, ctx)
        return np.ascontiguousarray(gx.reshape(b, h, w, self.fan_in).transpose(0, 3, 1, 2))

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        if c != self.fan_in:
            raise DimensionError(f"{self.name}: expected {self.fan_in} channels, got {c}")
        return (b, self.fan_out, h, w)

    def topology(self):
        return {"kind": "posdense", "name": self.name, "group": self.group,
                "fan_in": self.fan_in, "fan_out": self.fan_out,
                "bias": self.bias is not None}


class PositionwiseSoftmax(Layer):
    """Softmax over channels at every position: logits map -> probability map."""

    def __init__(self, *, name: str, group: str):
        self.name, self.group = name, group
        self._ctx = None

    def forward(self, x, training=False):
        p = K.softmax(x, axis=1)
        self._ctx = {"p": p} if training else None
        return p

    def backward(self, gy):
        ctx = self._take_ctx()
        p = ctx["p"]
        dot = (gy * p).sum(axis=1, keepdims=True)
        return p * (gy - dot)

    def out_shape(self, in_shape):
        return in_shape

    def topology(self):
        return {"kind": "possoftmax", "name": self.name, "group": self.group}


class CenterCrop(Layer):
    """Trim a fixed margin from every spatial edge; backward zero-pads it back."""

    def __init__(self, margins, *, name: str, group: str):
        # margins = ((top, bottom), (left, right))
        self.name, self.group = name, group
        self.margins = tuple((int(a), int(b)) for a, b in margins)
        self._shape = None

    def forward(self, x, training=False):
        (mt, mb), (ml, mr) = self.margins
        if x.shape[2] <= mt + mb or x.shape[3] <= ml + mr:
            raise DimensionError(f"{self.name}: input {x.shape[2:]} smaller than margins {self.margins}")
        self._shape = x.shape if training else None
        return np.ascontiguousarray(x[:, :, mt:x.shape[2] - mb, ml:x.shape[3] - mr])

    def backward(self, gy):
        if self._shape is None:
            raise UsageError(f"backward before training-mode forward in layer {self.name!r}")
        (mt, mb), (ml, mr) = self.margins
        gx = np.zeros(self._shape, dtype=gy.dtype)
        gx[:, :, mt:self._shape[2] - mb, ml:self._shape[3] - mr] = gy
        self._shape = None
        return gx

    def out_shape(self, in_shape):
        b, c, h, w = in_shape
        (mt, mb), (ml, mr) = self.margins
        return (b, c, h - mt - mb, w - ml - mr)

    def topology(self):
        return {"kind": "crop", "name": self.name, "group": self.group,
                "margins": [list(m) for m in self.margins]}


class ResidualUnit(Layer):
    """Bottleneck residual unit (1x1 -> 3x3 -> 1x1, each with batch norm).

    padding='same' keeps the spatial size (classic layout); padding='valid'
    lets the 3x3 shrink the map by one per edge and the shortcut crops to
    match, so a stack of these stays a pure sliding-window machine.

    The identity path taps the unit input before the leading ReLU. With all
    conv weights zero and fresh normalization stats, an identity-shortcut
    unit therefore returns shortcut(x) + beta of the last norm layer; that
    property is load-bearing for tests and for sane fine-tuning starts.
    """

    def __init__(self, in_ch: int, widths, stride: int = 1, padding: str = "valid",
                 *, name: str, group: str, rng: np.random.Generator | None = None,
                 dtype=np.float64):
        if len(widths) != 3:
            raise UsageError(f"{name}: bottleneck widths must be three integers, got {widths}")
        self.name, self.group = name, group
        self.in_ch = in_ch
        self.widths = tuple(int(w) for w in widths)
        self.stride = int(stride)
        self.padding = padding
        m1, m2, out_ch = self.widths
        self.out_ch = out_ch
        n = name
        self.pre_relu = ReLU(name=f"{n}.relu0", group=group)
        self.conv1 = Conv(in_ch, m1, 1, stride, "valid", bias=False,
                          name=f"{n}.conv1", group=group, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(m1, name=f"{n}.bn1", group=group, dtype=dtype)
        self.relu1 = ReLU(name=f"{n}.relu1", group=group)
        self.conv2 = Conv(m1, m2, 3, 1, padding, bias=False,
                          name=f"{n}.conv2", group=group, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(m2, name=f"{n}.bn2", group=group, dtype=dtype)
        self.relu2 = ReLU(name=f"{n}.relu2", group=group)
        self.conv3 = Conv(m2, out_ch, 1, 1, "valid", bias=False,
                          name=f"{n}.conv3", group=group, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm(out_ch, name=f"{n}.bn3", group=group, dtype=dtype)

        self.identity = (stride == 1 and in_ch == out_ch)
        # Margin the main path loses relative to the shortcut tap point.
        if padding == "valid":
            off = self.stride  # centre of the 3x3 sits this far into the input lattice
            self.shortcut_crop = CenterCrop(((off, off), (off, off)),
                                            name=f"{n}.crop", group=group)
        else:
            self.shortcut_crop = None
        if not self.identity:
            self.proj = Conv(in_ch, out_ch, 1, stride, "valid", bias=False,
                             name=f"{n}.proj", group=group, rng=rng, dtype=dtype)
            self.bnp = BatchNorm(out_ch, name=f"{n}.bnp", group=group, dtype=dtype)
        else:
            self.proj = None
            self.bnp = None
        self.trainable = True

    # trainable flag must reach the sublayers (batch-norm mode switching)
    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag: bool):
        self._trainable = flag
        for sub in self._sublayers():
            sub.trainable = flag

    def _sublayers(self):
        subs = [self.pre_relu, self.conv1, self.bn1, self.relu1, self.conv2,
                self.bn2, self.relu2, self.conv3, self.bn3]
        if self.shortcut_crop is not None:
            subs.append(self.shortcut_crop)
        if self.proj is not None:
            subs.extend([self.proj, self.bnp])
        return subs

    def params(self):
        out = []
        for sub in self._sublayers():
            out.extend(sub.params())
        return out

    def _main(self, x, training):
        h = self.pre_relu.forward(x, training)
        h = self.conv1.forward(h, training)
        h = self.bn1.forward(h, training)
        h = self.relu1.forward(h, training)
        h = self.conv2.forward(h, training)
        h = self.bn2.forward(h, training)
        h = self.relu2.forward(h, training)
        h = self.conv3.forward(h, training)
        return self.bn3.forward(h, training)

    def _shortcut(self, x, training):
        s = x
        if self.shortcut_crop is not None:
            # Valid mode: align the identity tap with the surviving centre
            # cells. With stride 2 the centre sits 2 cells in; the crop span
            # is trimmed again after projection to the main-path extent.
            s = self.shortcut_crop.forward(s, training)
        if self.proj is not None:
            s = self.proj.forward(s, training)
            s = self.bnp.forward(s, training)
        return s

    def forward(self, x, training=False):
        main = self._main(x, training)
        short = self._shortcut(x, training)
        if short.shape[2:] != main.shape[2:]:
            raise DimensionError(
                f"{self.name}: main path {main.shape[2:]} vs shortcut {short.shape[2:]}; "
                f"input too small for a stride-{self.stride} unit"
            )
        return main + short

    def backward(self, gy):
        gx_short = gy
        if self.proj is not None:
            gx_short = self.bnp.backward(gx_short)
            gx_short = self.proj.backward(gx_short)
        if self.shortcut_crop is not None:
            gx_short = self.shortcut_crop.backward(gx_short)

        g = self.bn3.backward(gy)
        g = self.conv3.backward(g)
        g = self.relu2.backward(g)
        g = self.bn2.backward(g)
        g = self.conv2.backward(g)
        g = self.relu1.backward(g)
        g = self.bn1.backward(g)
        g = self.conv1.backward(g)
        g = self.pre_relu.backward(g)
        return g + gx_short

    def out_shape(self, in_shape):
        s = self.conv1.out_shape(in_shape)
        s = self.conv2.out_shape(s)
        s = self.conv3.out_shape(s)
        if self.padding == "valid":
            want = self.shortcut_crop.out_shape(in_shape)
            if self.proj is not None:
                want = self.proj.out_shape(want)
            if want[2:] != s[2:]:
                raise DimensionError(f"{self.name}: shortcut {want[2:]} vs main {s[2:]}")
        return s

    def topology(self):
        return {"kind": "residual", "name": self.name, "group": self.group,
                "in_ch": self.in_ch, "widths": list(self.widths),
                "stride": self.stride, "padding": self.padding}


# ---------------------------------------------------------------------------

_REBUILDERS = {}


def _register(kind):
    def deco(fn):
        _REBUILDERS[kind] = fn
        return fn
    return deco


@_register("conv")
def _rb_conv(t, dtype):
    pad = t["padding"]
    if isinstance(pad, list):
        pad = tuple(tuple(p) for p in pad)
    return Conv(t["in_ch"], t["out_ch"], tuple(t["kernel"]), tuple(t["stride"]), pad,
                bias=t["bias"], name=t["name"], group=t["group"], dtype=dtype)


@_register("batchnorm")
def _rb_bn(t, dtype):
    return BatchNorm(t["channels"], name=t["name"], group=t["group"],
                     momentum=t["momentum"], eps=t["eps"], dtype=dtype)


@_register("relu")
def _rb_relu(t, dtype):
    return ReLU(name=t["name"], group=t["group"])


@_register("pool")
def _rb_pool(t, dtype):
    return Pool(t["pool"], tuple(t["window"]), tuple(t["stride"]),
                name=t["name"], group=t["group"])


@_register("gap")
def _rb_gap(t, dtype):
    return GlobalAvgPool(name=t["name"], group=t["group"])


@_register("lsepool")
def _rb_lsepool(t, dtype):
    return GlobalLSEPool(name=t["name"], group=t["group"])


@_register("flatten")
def _rb_flatten(t, dtype):
    return Flatten(name=t["name"], group=t["group"], expect_hw=t.get("expect_hw"))


@_register("dense")
def _rb_dense(t, dtype):
    d = Dense(t["fan_in"], t["fan_out"], name=t["name"], group=t["group"], dtype=dtype)
    if not t["bias"]:
        d.bias = None
    return d


@_register("posdense")
def _rb_posdense(t, dtype):
    d = PositionwiseDense(t["fan_in"], t["fan_out"], name=t["name"], group=t["group"], dtype=dtype)
    if not t["bias"]:
        d.bias = None
    return d


@_register("possoftmax")
def _rb_possoftmax(t, dtype):
    return PositionwiseSoftmax(name=t["name"], group=t["group"])


@_register("crop")
def _rb_crop(t, dtype):
    return CenterCrop(tuple(tuple(m) for m in t["margins"]), name=t["name"], group=t["group"])


@_register("residual")
def _rb_residual(t, dtype):
    return ResidualUnit(t["in_ch"], t["widths"], t["stride"], t["padding"],
                        name=t["name"], group=t["group"], dtype=dtype)


def layer_from_topology(t: dict, dtype=np.float64) -> Layer:
    """Rebuild a layer (zero-valued parameters) from its topology record."""
    kind = t.get("kind")
    if kind not in _REBUILDERS:
        raise UsageError(f"unknown layer kind {kind!r} in topology")
    return _REBUILDERS[kind](t, dtype)
