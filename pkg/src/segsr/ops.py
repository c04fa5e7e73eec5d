"""Layer kernels with hand-written backward passes.

Every forward function is a pure function of its inputs except
:func:`batchnorm_fwd` in train mode, which also updates the running
statistics held by the ``LayerState`` it is given. Backward functions
accumulate parameter gradients into the state (``+=``) and return the
gradient with respect to the layer input.

Convolutions use the cross-correlation convention and "same" zero padding:
output size is ``ceil(in / stride)`` and any odd leftover pad goes after.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, check_finite

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
IGNORE_INDEX = 255


class SpecError(ValueError):
    """Invalid convolution parameters."""


class DataError(ValueError):
    """Invalid label data."""


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple = (3, 3)
    rate: int = 1
    in_channels: int = 1
    out_channels: int = 1
    depthwise: bool = False
    stride: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or self.rate < 1 or self.stride < 1:
            raise SpecError(f"invalid conv spec {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise SpecError(f"invalid channel counts in {self}")
        if self.depthwise and self.in_channels != self.out_channels:
            raise SpecError("depthwise conv needs in_channels == out_channels")

    @property
    def field_of_view(self) -> tuple:
        kh, kw = self.kernel
        return (kh + (kh - 1) * (self.rate - 1), kw + (kw - 1) * (self.rate - 1))

    def weight_shape(self) -> tuple:
        kh, kw = self.kernel
        if self.depthwise:
            return (self.out_channels, 1, kh, kw)
        return (self.out_channels, self.in_channels, kh, kw)

    def fan_in(self) -> int:
        kh, kw = self.kernel
        return kh * kw * (1 if self.depthwise else self.in_channels)


@dataclass
class Param:
    data: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        if self.velocity is None:
            self.velocity = np.zeros_like(self.data)


@dataclass
class LayerState:
    """Parameters and buffers of one layer.

    Conv layers use ``weight`` (and optionally ``bias``); batch-norm layers use
    ``gamma``/``beta`` plus the running statistics.
    """

    weight: Param | None = None
    bias: Param | None = None
    gamma: Param | None = None
    beta: Param | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @classmethod
    def conv(cls, weight, bias=None):
        return cls(weight=Param(weight), bias=None if bias is None else Param(bias))

    @classmethod
    def batchnorm(cls, channels, dtype=np.float32):
        return cls(
            gamma=Param(np.ones(channels, dtype)),
            beta=Param(np.zeros(channels, dtype)),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    def params(self):
        for name in ("weight", "bias", "gamma", "beta"):
            p = getattr(self, name)
            if p is not None:
                yield name, p

    def buffers(self):
        for name in ("running_mean", "running_var"):
            b = getattr(self, name)
            if b is not None:
                yield name, b

    def zero_grad(self):
        for _, p in self.params():
            p.grad[...] = 0


def same_padding(size: int, k: int, rate: int, stride: int) -> tuple:
    """(out_size, pad_before, pad_after) for "same" zero padding."""
    out = -(-size // stride)
    eff = k + (k - 1) * (rate - 1)
    total = max((out - 1) * stride + eff - size, 0)
    return out, total // 2, total - total // 2


def _check_weight(x, w, spec):
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"input {x.shape} does not match in_channels={spec.in_channels}")
    if w.shape != spec.weight_shape():
        raise ShapeError(f"weight {w.shape} does not match spec {spec.weight_shape()}")


def dilate_kernel(w: np.ndarray, rate: int) -> np.ndarray:
    """Insert ``rate - 1`` zeros between neighbouring taps along both axes."""
    o, i, kh, kw = w.shape
    out = np.zeros((o, i, (kh - 1) * rate + 1, (kw - 1) * rate + 1), dtype=w.dtype)
    out[:, :, ::rate, ::rate] = w
    return out


def conv2d_naive(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Sliding-window correlation with an explicitly dilated kernel.

    Every position of the zero-inserted kernel is visited, row-major, and
    its product added to a running sum in the input dtype. Deliberately
    slow; only used as a test oracle.
    """
    _check_weight(x, w, spec)
    n, c, h, wd = x.shape
    kd = dilate_kernel(w, spec.rate)
    ekh, ekw = kd.shape[2:]
    oh, pt, pb = same_padding(h, ekh, 1, spec.stride)
    ow, pl, pr = same_padding(wd, ekw, 1, spec.stride)
    xp = np.zeros((n, c, h + pt + pb, wd + pl + pr), dtype=x.dtype)
    xp[:, :, pt:pt + h, pl:pl + wd] = x
    out = np.zeros((n, spec.out_channels, oh, ow), dtype=x.dtype)
    s = spec.stride
    for b in range(n):
        for o in range(spec.out_channels):
            acc = np.zeros((oh, ow), dtype=x.dtype)
            chans = [o] if spec.depthwise else range(c)
            for j, ch in enumerate(chans):
                kernel = kd[o, 0 if spec.depthwise else j]
                for dy in range(ekh):
                    for dx in range(ekw):
                        win = xp[b, ch, dy:dy + s * (oh - 1) + 1:s, dx:dx + s * (ow - 1) + 1:s]
                        acc = acc + win * kernel[dy, dx]
            out[b, o] = acc
    return out


# ---------------------------------------------------------------- full conv

def _im2col(x, kh, kw, rate, stride):
    n, c, h, wd = x.shape
    oh, pt, pb = same_padding(h, kh, rate, stride)
    ow, pl, pr = same_padding(wd, kw, rate, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        y0 = ky * rate
        for kx in range(kw):
            x0 = kx * rate
            cols[:, :, ky, kx] = xp[:, :, y0:y0 + stride * (oh - 1) + 1:stride,
                                    x0:x0 + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), (oh, ow, pt, pl, xp.shape)


def conv2d_fwd(x, state: LayerState, spec: ConvSpec) -> np.ndarray:
    """Dense (non-depthwise) convolution via im2col + matmul."""
    w = state.weight.data
    _check_weight(x, w, spec)
    if spec.depthwise:
        raise SpecError("use depthwise_atrous_conv_fwd for depthwise convs")
    kh, kw = spec.kernel
    cols, (oh, ow, _, _, _) = _im2col(x, kh, kw, spec.rate, spec.stride)
    out = np.matmul(w.reshape(spec.out_channels, -1), cols)
    if state.bias is not None:
        out += state.bias.data[None, :, None]
    return check_finite(out.reshape(x.shape[0], spec.out_channels, oh, ow), "conv2d")


def conv2d_bwd(x, grad_out, state: LayerState, spec: ConvSpec) -> np.ndarray:
    n, c, h, wd = x.shape
    kh, kw = spec.kernel
    r, s = spec.rate, spec.stride
    cols, (oh, ow, pt, pl, pshape) = _im2col(x, kh, kw, r, s)
    g = grad_out.reshape(n, spec.out_channels, oh * ow)
    w2 = state.weight.data.reshape(spec.out_channels, -1)
    state.weight.grad += np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(state.weight.data.shape)
    if state.bias is not None:
        state.bias.grad += g.sum(axis=(0, 2))
    dcols = np.matmul(w2.T, g).reshape(n, c, kh, kw, oh, ow)
    dxp = np.zeros(pshape, dtype=x.dtype)
    for ky in range(kh):
        y0 = ky * r
        for kx in range(kw):
            x0 = kx * r
            dxp[:, :, y0:y0 + s * (oh - 1) + 1:s, x0:x0 + s * (ow - 1) + 1:s] += dcols[:, :, ky, kx]
    return check_finite(dxp[:, :, pt:pt + h, pl:pl + wd].copy(), "conv2d backward")


# ----------------------------------------------------------- pointwise conv

def pointwise_conv_fwd(x, state: LayerState) -> np.ndarray:
    w = state.weight.data
    fo, fi = w.shape[:2]
    if x.ndim != 4 or x.shape[1] != fi or w.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise weight {w.shape} incompatible with input {x.shape}")
    n, _, h, wd = x.shape
    out = np.matmul(w.reshape(fo, fi), x.reshape(n, fi, h * wd))
    if state.bias is not None:
        out += state.bias.data[None, :, None]
    return check_finite(out.reshape(n, fo, h, wd), "pointwise conv")


def pointwise_conv_bwd(x, grad_out, state: LayerState) -> np.ndarray:
    w = state.weight.data
    fo, fi = w.shape[:2]
    n, _, h, wd = x.shape
    g = grad_out.reshape(n, fo, h * wd)
    state.weight.grad += np.tensordot(g, x.reshape(n, fi, h * wd), axes=([0, 2], [0, 2])).reshape(w.shape)
    if state.bias is not None:
        state.bias.grad += g.sum(axis=(0, 2))
    dx = np.matmul(w.reshape(fo, fi).T, g)
    return check_finite(dx.reshape(x.shape), "pointwise conv backward")


# -------------------------------------------------- depthwise atrous conv

def _depthwise_taps(h, wd, spec):
    """Yield (ky, kx, out-window, in-window) for taps that touch real pixels.

    Taps falling entirely into the zero padding contribute nothing and are
    skipped, which matters for large rates on small maps.
    """
    kh, kw = spec.kernel
    r = spec.rate
    cy, cx = (kh - 1) // 2, (kw - 1) // 2
    for ky in range(kh):
        dy = (ky - cy) * r
        y0, y1 = max(0, -dy), min(h, h - dy)
        if y0 >= y1:
            continue
        for kx in range(kw):
            dx = (kx - cx) * r
            x0, x1 = max(0, -dx), min(wd, wd - dx)
            if x0 >= x1:
                continue
            yield ky, kx, (slice(y0, y1), slice(x0, x1)), (slice(y0 + dy, y1 + dy), slice(x0 + dx, x1 + dx))


def _check_depthwise(x, w, spec):
    kh, kw = spec.kernel
    if not spec.depthwise:
        raise SpecError("spec is not depthwise")
    if kh % 2 == 0 or kw % 2 == 0:
        raise SpecError("depthwise atrous conv needs an odd kernel")
    if spec.stride != 1:
        raise SpecError("strided atrous convolution is not supported")
    _check_weight(x, w, spec)


def depthwise_atrous_conv_fwd(x, state: LayerState, spec: ConvSpec) -> np.ndarray:
    w = state.weight.data
    _check_depthwise(x, w, spec)
    n, c, h, wd = x.shape
    out = np.zeros_like(x)
    for ky, kx, (oy, ox), (iy, ix) in _depthwise_taps(h, wd, spec):
        out[:, :, oy, ox] += w[None, :, 0, ky, kx, None, None] * x[:, :, iy, ix]
    if state.bias is not None:
        out += state.bias.data[None, :, None, None]
    return check_finite(out, "depthwise atrous conv")


def depthwise_atrous_conv_bwd(x, grad_out, state: LayerState, spec: ConvSpec) -> np.ndarray:
    w = state.weight.data
    n, c, h, wd = x.shape
    dx = np.zeros_like(x)
    gw = state.weight.grad
    for ky, kx, (oy, ox), (iy, ix) in _depthwise_taps(h, wd, spec):
        g = grad_out[:, :, oy, ox]
        gw[:, 0, ky, kx] += np.einsum("nchw,nchw->c", g, x[:, :, iy, ix])
        dx[:, :, iy, ix] += w[None, :, 0, ky, kx, None, None] * g
    if state.bias is not None:
        state.bias.grad += grad_out.sum(axis=(0, 2, 3))
    return check_finite(dx, "depthwise atrous conv backward")


# --------------------------------------------------------------- batch norm

def _bn_stats(x):
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ShapeError("batch norm in train mode needs more than one value per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var, m


def batchnorm_fwd(x, state: LayerState, mode: str = "train") -> np.ndarray:
    g, b = state.gamma.data, state.beta.data
    if x.ndim != 4 or x.shape[1] != g.shape[0]:
        raise ShapeError(f"batch norm over {g.shape[0]} channels got input {x.shape}")
    if mode == "train":
        mean, var, m = _bn_stats(x)
        state.running_mean *= 1 - BN_MOMENTUM
        state.running_mean += BN_MOMENTUM * mean
        state.running_var *= 1 - BN_MOMENTUM
        state.running_var += BN_MOMENTUM * var * (m / (m - 1))
    elif mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    scale = (g / np.sqrt(var + BN_EPS)).astype(x.dtype)
    shift = (b - mean * scale).astype(x.dtype)
    return check_finite(x * scale[None, :, None, None] + shift[None, :, None, None], "batch norm")


def batchnorm_bwd(x, grad_out, state: LayerState, mode: str = "train") -> np.ndarray:
    g = state.gamma.data
    if mode == "train":
        mean, var, m = _bn_stats(x)
    else:
        mean, var, m = state.running_mean, state.running_var, None
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    dbeta = grad_out.sum(axis=(0, 2, 3))
    dgamma = np.einsum("nchw,nchw->c", grad_out, xhat)
    state.beta.grad += dbeta
    state.gamma.grad += dgamma
    if mode == "train":
        k = (g * inv / m)[None, :, None, None]
        dx = k * (m * grad_out - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    else:
        dx = grad_out * (g * inv)[None, :, None, None]
    return check_finite(dx.astype(x.dtype, copy=False), "batch norm backward")


# --------------------------------------------------------------------- relu

def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(x, grad_out):
    return grad_out * (x > 0)


# ------------------------------------------------------------ pixel shuffle

# Debug hook for mutation testing of the self-test: when True the sub-pixel
# row/column offsets are swapped, which is still a bijection but the wrong one.
PERTURB_SHUFFLE = False


def _shuffle_axes():
    return (0, 1, 4, 3, 5, 2) if PERTURB_SHUFFLE else (0, 1, 4, 2, 5, 3)


def pixel_shuffle_fwd(x, t: int):
    """out[n, c, y, x] = in[n, c*t*t + t*(y % t) + (x % t), y // t, x // t]."""
    if t < 1:
        raise ShapeError("upsample factor must be >= 1")
    n, ct, h, w = x.shape
    if ct % (t * t):
        raise ShapeError(f"{ct} channels not divisible by t^2={t * t}")
    c = ct // (t * t)
    return x.reshape(n, c, t, t, h, w).transpose(_shuffle_axes()).reshape(n, c, h * t, w * t)


def pixel_shuffle_bwd(grad_out, t: int):
    """Inverse permutation of :func:`pixel_shuffle_fwd`."""
    n, c, ht, wt = grad_out.shape
    if ht % t or wt % t:
        raise ShapeError(f"spatial dims {ht}x{wt} not divisible by {t}")
    h, w = ht // t, wt // t
    axes = _shuffle_axes()
    split = (n, c, t, t, h, w)
    staged = grad_out.reshape(tuple(split[a] for a in axes))
    return staged.transpose(tuple(int(i) for i in np.argsort(axes))).reshape(n, c * t * t, h, w)


def subpixel_conv(x, state: LayerState, t: int):
    """Pointwise conv to ``F_out * t^2`` channels followed by pixel shuffle."""
    return pixel_shuffle_fwd(pointwise_conv_fwd(x, state), t)


def subpixel_conv_bwd(x, grad_out, state: LayerState, t: int):
    return pointwise_conv_bwd(x, pixel_shuffle_bwd(grad_out, t), state)


# ------------------------------------------------------------------ bilinear

def interp_matrix(size_in: int, size_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (size_out, size_in)."""
    a = np.zeros((size_out, size_in), dtype=np.float64)
    if size_out == 1 or size_in == 1:
        a[:, 0] = 1.0
        return a.astype(dtype)
    src = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    lo = np.minimum(np.floor(src).astype(int), size_in - 2)
    frac = src - lo
    a[np.arange(size_out), lo] = 1.0 - frac
    a[np.arange(size_out), lo + 1] += frac
    return a.astype(dtype)


def _interp_taps(size_in: int, size_out: int):
    """(lo, hi, frac) so that out[i] = in[lo]*(1-frac) + in[hi]*frac."""
    if size_out == 1 or size_in == 1:
        z = np.zeros(size_out, int)
        return z, z, np.zeros(size_out)
    src = np.arange(size_out) * (size_in - 1) / (size_out - 1)
    lo = np.minimum(np.floor(src).astype(int), size_in - 2)
    return lo, lo + 1, src - lo


def upsample_factors(t):
    """(th, tw) from an int or a per-axis pair."""
    th, tw = (t, t) if np.isscalar(t) else t
    if th < 1 or tw < 1:
        raise ShapeError("upsample factor must be >= 1")
    return int(th), int(tw)


def bilinear_upsample(x, t):
    """Separable two-tap interpolation; same weights as :func:`interp_matrix`.

    ``t`` is one factor for both axes or a (height, width) pair.
    """
    th, tw = upsample_factors(t)
    n, c, h, w = x.shape
    rows = x
    if th > 1:
        lo, hi, f = _interp_taps(h, h * th)
        f = f.astype(x.dtype)[:, None]
        rows = x[:, :, lo, :] * (1 - f) + x[:, :, hi, :] * f
    if tw > 1:
        lo, hi, f = _interp_taps(w, w * tw)
        f = f.astype(x.dtype)
        return rows[..., lo] * (1 - f) + rows[..., hi] * f
    return rows.copy() if rows is x else rows


def bilinear_upsample_bwd(grad_out, t):
    th, tw = upsample_factors(t)
    n, c, ht, wt = grad_out.shape
    g = grad_out
    if tw > 1:
        g = np.matmul(g, interp_matrix(wt // tw, wt, grad_out.dtype))
    if th > 1:
        g = np.matmul(interp_matrix(ht // th, ht, grad_out.dtype).T, g)
    return g.copy() if g is grad_out else g


# --------------------------------------------------------------------- loss

def cross_entropy_loss(logits, labels, ignore_index: int = IGNORE_INDEX):
    """Mean softmax cross-entropy over non-ignored pixels and its gradient."""
    n, k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_index
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise DataError(f"label values must lie in [0, {k}) or equal {ignore_index}")
    count = int(valid.sum())
    grad = np.zeros_like(logits)
    if count == 0:
        return 0.0, grad
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1)
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    loss = float(np.sum((np.log(denom) - picked)[valid]) / count)
    prob = ez / denom[:, None]
    onehot = np.zeros_like(prob)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    grad = (prob - onehot) * (valid[:, None] / count)
    return loss, check_finite(grad.astype(logits.dtype, copy=False), "cross entropy")


# ---------------------------------------------------------------- optimizer

def sgd_momentum_step(params, lr: float, momentum: float = 0.9):
    """Heavy-ball SGD: v <- mu*v + g; w <- w - lr*v."""
    for p in params:
        p.velocity *= momentum
        p.velocity += p.grad
        p.data -= lr * p.velocity
