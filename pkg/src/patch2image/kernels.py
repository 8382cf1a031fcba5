"""Array kernels: convolution, batch norm, pooling, dense, softmax, flips.

Every forward returns ``(output, ctx)`` where ``ctx`` is an opaque dict the
matching backward consumes. Layout is NCHW throughout: ``(batch, channels,
height, width)``. Dense inputs are ``(batch, features)`` and dense weights
``(fan_in, fan_out)``.

Two hard rules apply to every kernel here:

* outputs are checked for NaN/Inf and a non-finite value raises NumericError;
* no kernel mutates its input arrays.

Convolution is im2col + one BLAS matmul; its backward recomputes the column
matrix from the cached padded input instead of caching columns (columns are
k*k times larger than the input).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, DimensionError, NumericError, UsageError

__all__ = [
    "Parameter",
    "BatchNormState",
    "conv2d_forward",
    "conv2d_backward",
    "batchnorm_apply",
    "batchnorm_backward",
    "pool2d_forward",
    "pool2d_backward",
    "dense_forward",
    "dense_backward",
    "relu_forward",
    "relu_backward",
    "softmax",
    "softmax_cross_entropy",
    "flip",
    "pad_input",
    "resolve_padding",
    "ensure_finite",
]

_FLOATS = (np.float32, np.float64)


class Parameter:
    """A learnable array plus its accumulated gradient.

    Identity matters: sharing one Parameter between two layers (the
    convolutionalized head shares weights with the dense head it replaced)
    makes both layers train in lockstep, because grads accumulate here.
    """

    __slots__ = ("value", "grad", "name")

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.asarray(value)
        if self.value.dtype.type not in _FLOATS:
            raise UsageError(f"parameter {name!r} must be float32/float64, got {self.value.dtype}")
        self.grad = None
        self.name = name

    def add_grad(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {g.shape} != parameter shape {self.value.shape} for {self.name!r}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def ensure_finite(a: np.ndarray, what: str) -> None:
    """Raise NumericError unless every element of ``a`` is finite."""
    if not np.isfinite(a).all():
        bad = int(a.size - np.isfinite(a).sum())
        raise NumericError(f"{what} produced {bad} non-finite value(s)")


def _check_nchw(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{what} expects a (B,C,H,W) array, got shape {x.shape}")
    if x.dtype.type not in _FLOATS:
        raise UsageError(f"{what} expects float32/float64, got {x.dtype}")


def resolve_padding(padding, in_hw, k_hw, s_hw):
    """Turn a padding mode into explicit per-side amounts.

    'valid'  -> no padding.
    'same'   -> output size ceil(in/stride); total pad max((out-1)*s + k - in, 0),
                split before = total//2, after = total - before.
    explicit -> ((top, bottom), (left, right)) used as given.
    """
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        out = []
        for n, k, s in zip(in_hw, k_hw, s_hw):
            o = -(-n // s)
            total = max((o - 1) * s + k - n, 0)
            out.append((total // 2, total - total // 2))
        return tuple(out)
    try:
        (pt, pb), (pl, pr) = padding
        pads = (int(pt), int(pb)), (int(pl), int(pr))
    except (TypeError, ValueError):
        raise UsageError(f"padding must be 'valid', 'same' or ((t,b),(l,r)); got {padding!r}")
    if min(pads[0] + pads[1]) < 0:
        raise UsageError(f"negative padding {padding!r}")
    return pads


def pad_input(x: np.ndarray, pads) -> np.ndarray:
    """Zero-pad the two spatial axes of an NCHW array; no-op returns x itself."""
    (pt, pb), (pl, pr) = pads
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))


def _window_view(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int):
    """Read-only sliding-window view (B, C, oh, ow, kh, kw) onto xp."""
    b, c, h, w = xp.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    # (B, oh, ow, C*kh*kw); the transpose forces one contiguous copy, which is
    # exactly the matmul operand we want.
    view = _window_view(xp, kh, kw, sh, sw)
    b, c, oh, ow = view.shape[:4]
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh, ow, c * kh * kw)


def conv2d_forward(x, weight: Parameter, bias, stride=1, padding="valid"):
    """Cross-correlation of x (B,C,H,W) with weight (O,C,kh,kw).

    bias is a Parameter of shape (O,) or None. Returns (y, ctx) with y of
    shape (B,O,oh,ow).
    """
    _check_nchw(x, "conv2d")
    w = weight.value
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be (O,C,kh,kw), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input C={x.shape[1]}, weight C={w.shape[1]}")
    if w.dtype != x.dtype:
        raise UsageError(f"dtype mismatch: input {x.dtype}, weight {w.dtype}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if sh < 1 or sw < 1:
        raise UsageError(f"stride must be >= 1, got {(sh, sw)}")
    o, c, kh, kw = w.shape
    pads = resolve_padding(padding, x.shape[2:], (kh, kw), (sh, sw))
    xp = pad_input(x, pads)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {xp.shape[2]}x{xp.shape[3]}"
        )
    cols = _im2col(xp, kh, kw, sh, sw)
    b, oh, ow = cols.shape[:3]
    y = cols.reshape(b * oh * ow, c * kh * kw) @ w.reshape(o, -1).T
    y = y.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.value[:, None, None]
    y = np.ascontiguousarray(y)
    ensure_finite(y, "conv2d")
    ctx = {"xp": xp, "x_shape": x.shape, "weight": weight, "bias": bias,
           "stride": (sh, sw), "pads": pads}
    return y, ctx


def conv2d_backward(gy: np.ndarray, ctx: dict) -> np.ndarray:
    """Accumulate weight/bias grads into the Parameters, return grad wrt x."""
    weight, bias = ctx["weight"], ctx["bias"]
    xp = ctx["xp"]
    sh, sw = ctx["stride"]
    (pt, pb), (pl, pr) = ctx["pads"]
    o, c, kh, kw = weight.value.shape
    b, _, oh, ow = gy.shape
    if gy.shape[1] != o:
        raise DimensionError(f"conv2d backward: grad has {gy.shape[1]} channels, expected {o}")

    gy2 = gy.transpose(0, 2, 3, 1).reshape(b * oh * ow, o)
    cols = _im2col(xp, kh, kw, sh, sw).reshape(b * oh * ow, c * kh * kw)
    weight.add_grad((gy2.T @ cols).reshape(o, c, kh, kw))
    if bias is not None:
        bias.add_grad(gy.sum(axis=(0, 2, 3)))

    gcols = (gy2 @ weight.value.reshape(o, -1)).reshape(b, oh, ow, c, kh, kw)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (B, C, kh, kw, oh, ow)
    gxp = np.zeros_like(xp)
    hspan = sh * (oh - 1) + 1
    wspan = sw * (ow - 1) + 1
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + hspan:sh, j:j + wspan:sw] += gcols[:, :, i, j]
    h, w_ = ctx["x_shape"][2:]
    gx = gxp[:, :, pt:pt + h, pl:pl + w_]
    ensure_finite(gx, "conv2d backward")
    return np.ascontiguousarray(gx)


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics.

    The running buffers are updated only by training-mode forward passes:
    running <- (1 - momentum)*running + momentum*batch_stat, with the same
    biased batch variance that normalizes the activations.
    """

    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    updates: int = field(default=0)

    @classmethod
    def create(cls, channels: int, dtype=np.float64, momentum: float = 0.1,
               eps: float = 1e-5, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma"),
            beta=Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm_apply(x: np.ndarray, state: BatchNormState, training: bool):
    """Normalize per channel over (B,H,W); affine-transform with gamma/beta.

    training=True uses batch statistics and blends them into the running
    buffers; training=False uses the running buffers and leaves them alone.
    """
    _check_nchw(x, "batchnorm")
    ch = x.shape[1]
    if state.gamma.value.shape != (ch,):
        raise DimensionError(f"batchnorm has {state.gamma.value.shape[0]} channels, input has {ch}")
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise DegenerateBatchError(
                f"batch norm needs >= 2 values per channel to estimate variance, got {n}"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean *= 1.0 - m
        state.running_mean += m * mean
        state.running_var *= 1.0 - m
        state.running_var += m * var
        state.updates += 1
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    y = state.gamma.value[:, None, None] * xhat + state.beta.value[:, None, None]
    ensure_finite(y, "batchnorm")
    ctx = {"xhat": xhat, "inv_std": inv_std, "state": state, "training": training}
    return y.astype(x.dtype, copy=False), ctx


def batchnorm_backward(gy: np.ndarray, ctx: dict) -> np.ndarray:
    """Grad wrt x; accumulates gamma/beta grads.

    Training mode differentiates through the batch statistics; inference
    mode treats mean/var as constants (that is what makes frozen layers
    cheap and batch-independent).
    """
    state: BatchNormState = ctx["state"]
    xhat, inv_std = ctx["xhat"], ctx["inv_std"]
    g = state.gamma.value
    state.gamma.add_grad((gy * xhat).sum(axis=(0, 2, 3)))
    state.beta.add_grad(gy.sum(axis=(0, 2, 3)))
    if not ctx["training"]:
        gx = gy * (g * inv_std)[:, None, None]
        ensure_finite(gx, "batchnorm backward")
        return gx
    n = gy.shape[0] * gy.shape[2] * gy.shape[3]
    gxhat = gy * g[:, None, None]
    # Reduce to per-channel row vectors once; broadcasting does the rest.
    s1 = gxhat.sum(axis=(0, 2, 3))
    s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
    gx = (inv_std[:, None, None] / n) * (
        n * gxhat - s1[:, None, None] - xhat * s2[:, None, None]
    )
    ensure_finite(gx, "batchnorm backward")
    return gx.astype(gy.dtype, copy=False)


def pool2d_forward(x: np.ndarray, kind: str, window, stride=None):
    """Max or average pooling with fully-contained windows only.

    window=(H,W) of the input gives global pooling -> (B,C,1,1). stride
    defaults to the window (non-overlapping tiling).
    """
    _check_nchw(x, "pool2d")
    if kind not in ("max", "avg"):
        raise UsageError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    kh, kw = (window, window) if isinstance(window, int) else window
    if stride is None:
        sh, sw = kh, kw
    else:
        sh, sw = (stride, stride) if isinstance(stride, int) else stride
    if kh > x.shape[2] or kw > x.shape[3]:
        raise DimensionError(
            f"pool window {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}"
        )
    view = _window_view(x, kh, kw, sh, sw)
    if kind == "max":
        b, c, oh, ow = view.shape[:4]
        flat = view.reshape(b, c, oh, ow, kh * kw)
        idx = flat.argmax(axis=-1)  # first max wins on ties: deterministic
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        ctx = {"kind": kind, "idx": idx, "x_shape": x.shape,
               "window": (kh, kw), "stride": (sh, sw)}
    else:
        y = view.mean(axis=(4, 5))
        ctx = {"kind": kind, "x_shape": x.shape, "window": (kh, kw), "stride": (sh, sw)}
    y = np.ascontiguousarray(y)
    ensure_finite(y, f"{kind} pool")
    return y, ctx


def lse_pool_forward(x: np.ndarray):
    """Global log-sum-exp pooling: log(mean(exp(x))) over (H,W) -> (B,C,1,1).

    A smooth maximum. One strongly responding cell dominates the result
    instead of being averaged away, yet every cell keeps a nonzero
    gradient. The mean inside the log makes a constant map come out
    unchanged, so the output scale does not depend on the grid size.
    """
    _check_nchw(x, "lse pool")
    m = x.max(axis=(2, 3), keepdims=True)
    e = np.exp(x - m)
    s = e.mean(axis=(2, 3), keepdims=True)
    y = m + np.log(s)
    ensure_finite(y, "lse pool")
    return y, {"e": e, "s": s}


def lse_pool_backward(gy: np.ndarray, ctx: dict) -> np.ndarray:
    # d/dx log-mean-exp = softmax over the spatial cells
    e, s = ctx["e"], ctx["s"]
    hw = e.shape[2] * e.shape[3]
    gx = gy * e / (s * hw)
    ensure_finite(gx, "lse pool backward")
    return gx.astype(gy.dtype, copy=False)


def pool2d_backward(gy: np.ndarray, ctx: dict) -> np.ndarray:
    kh, kw = ctx["window"]
    sh, sw = ctx["stride"]
    gx = np.zeros(ctx["x_shape"], dtype=gy.dtype)
    oh, ow = gy.shape[2:]
    hspan = sh * (oh - 1) + 1
    wspan = sw * (ow - 1) + 1
    if ctx["kind"] == "avg":
        g = gy / (kh * kw)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + hspan:sh, j:j + wspan:sw] += g
    else:
        idx = ctx["idx"]
        for i in range(kh):
            for j in range(kw):
                mask = idx == (i * kw + j)
                gx[:, :, i:i + hspan:sh, j:j + wspan:sw] += gy * mask
    ensure_finite(gx, "pool backward")
    return gx


def dense_forward(x: np.ndarray, weight: Parameter, bias):
    """y = x @ W + b with x (B, fan_in), W (fan_in, fan_out), b (fan_out,)."""
    if x.ndim != 2:
        raise DimensionError(f"dense expects (B, features), got shape {x.shape}")
    w = weight.value
    if w.ndim != 2 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"dense weight {w.shape} incompatible with input {x.shape}")
    if w.dtype != x.dtype:
        raise UsageError(f"dtype mismatch: input {x.dtype}, weight {w.dtype}")
    y = x @ w
    if bias is not None:
        y = y + bias.value
    ensure_finite(y, "dense")
    return y, {"x": x, "weight": weight, "bias": bias}


def dense_backward(gy: np.ndarray, ctx: dict) -> np.ndarray:
    weight, bias = ctx["weight"], ctx["bias"]
    x = ctx["x"]
    weight.add_grad(x.T @ gy)
    if bias is not None:
        bias.add_grad(gy.sum(axis=0))
    gx = gy @ weight.value.T
    ensure_finite(gx, "dense backward")
    return gx


def relu_forward(x: np.ndarray):
    y = np.maximum(x, 0)
    return y, {"mask": x > 0}


def relu_backward(gy: np.ndarray, ctx: dict) -> np.ndarray:
    return gy * ctx["mask"]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically-shifted softmax; rows sum to 1 to within rounding."""
    if x.dtype.type not in _FLOATS:
        raise UsageError(f"softmax expects float input, got {x.dtype}")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    ensure_finite(p, "softmax")
    return p


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights=None):
    """Weighted-mean cross entropy over a batch of logits (B,K), labels (B,).

    Returns (loss, grad_logits). Weights default to ones; they must be
    nonnegative with a positive sum, and the loss/grad are normalized by
    that sum so the magnitude is batch-size independent.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross entropy expects (B,K) logits, got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} != ({b},)")
    if labels.min() < 0 or labels.max() >= k:
        raise UsageError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    if weights is None:
        w = np.ones(b, dtype=logits.dtype)
    else:
        w = np.asarray(weights, dtype=logits.dtype)
        if w.shape != (b,):
            raise DimensionError(f"weights shape {w.shape} != ({b},)")
        if (w < 0).any():
            raise UsageError("sample weights must be nonnegative")
    wsum = w.sum()
    if not wsum > 0:
        raise DegenerateBatchError("sample weights sum to zero")

    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = float(-(w * logp[np.arange(b), labels]).sum() / wsum)

    p = np.exp(logp)
    grad = p
    grad[np.arange(b), labels] -= 1.0
    grad *= (w / wsum)[:, None]
    if not np.isfinite(loss):
        raise NumericError("cross entropy produced a non-finite loss")
    ensure_finite(grad, "cross entropy backward")
    return loss, grad.astype(logits.dtype, copy=False)


_FLIP_AXES = {"horizontal": 3, "vertical": 2}


def flip(x: np.ndarray, axes) -> np.ndarray:
    """Mirror an NCHW batch. axes is an iterable drawn from
    {'horizontal', 'vertical'}; horizontal mirrors width, vertical height.
    Always returns a fresh contiguous array, even for no axes."""
    _check_nchw(x, "flip")
    ax = []
    for a in axes:
        if a not in _FLIP_AXES:
            raise UsageError(f"unknown flip axis {a!r}")
        ax.append(_FLIP_AXES[a])
    if len(set(ax)) != len(ax):
        raise UsageError(f"duplicate flip axis in {tuple(axes)!r}")
    if not ax:
        return x.copy()
    return np.ascontiguousarray(np.flip(x, axis=tuple(ax)))
