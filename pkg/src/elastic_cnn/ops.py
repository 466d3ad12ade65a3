"""Differentiable operators over NCHW tensors.

Resampling convention
---------------------
``bilinear_resize`` maps output index ``d`` to the source coordinate

    src = (d + 0.5) * (in_size / out_size) - 0.5,   clamped to [0, in_size - 1]

and interpolates between ``floor(src)`` and ``floor(src) + 1`` (half-pixel
centres).  The rows are interpolated first, then the columns.  Under this
convention a 2x downsample weights each 2x2 window by 1/2 along each axis, so
``avg_pool2`` (which sums row pairs, then column pairs, then scales by 1/4)
produces the same floating-point result bit for bit.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, InputError
from .tensor import DTYPE, Tensor

# -- cost instrumentation -------------------------------------------------------

_mac_counters: list[list] = []


@contextlib.contextmanager
def count_macs() -> Iterator[list]:
    """Record ``(op, macs_per_sample)`` for every conv/linear executed in the block."""
    records: list = []
    _mac_counters.append(records)
    try:
        yield records
    finally:
        _mac_counters.remove(records)


def _record(op: str, macs_per_sample: int) -> None:
    for records in _mac_counters:
        records.append((op, macs_per_sample))


_pattern_recorders: list[list] = []


@contextlib.contextmanager
def record_patterns() -> Iterator[list]:
    """Collect the branch each piecewise op took (ReLU masks, max-pool argmaxes).

    Two evaluations with equal pattern lists ran on the same linear piece;
    finite differences across differing patterns straddle a kink.
    """
    patterns: list = []
    _pattern_recorders.append(patterns)
    try:
        yield patterns
    finally:
        _pattern_recorders.remove(patterns)


def _pattern(arr: np.ndarray) -> None:
    for patterns in _pattern_recorders:
        patterns.append(np.packbits(arr) if arr.dtype == bool else arr.copy())


# -- parameter containers -------------------------------------------------------


@dataclass
class ConvParams:
    weight: Tensor  # (C_out, C_in / groups, k, k)
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        c_out, _, kh, kw = self.weight.shape
        if kh != kw:
            raise ConfigError(f"only square kernels are supported, got {kh}x{kw}")
        if self.groups < 1 or c_out % self.groups:
            raise ConfigError(f"groups={self.groups} does not divide C_out={c_out}")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid stride={self.stride} / padding={self.padding}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ConfigError(f"bias shape {self.bias.shape} does not match C_out={c_out}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.1) -> "NormParams":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# -- convolution ------------------------------------------------------------------


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Grouped 2-D cross-correlation lowered to batched matrix products (im2col)."""
    if x.ndim != 4:
        raise ConfigError(f"conv2d expects NCHW input, got rank {x.ndim}")
    n, c, h, w = x.shape
    c_out, cg, k, _ = p.weight.shape
    g, s, pad = p.groups, p.stride, p.padding
    if c != cg * g:
        raise ConfigError(f"conv2d input channels: got C={c}, weight expects C_in={cg * g}")
    ho, wo = conv_output_size(h, k, s, pad), conv_output_size(w, k, s, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output spatial size {ho}x{wo} from input {h}x{w} with k={k}")
    og = c_out // g
    wmat = p.weight.data.reshape(g, og, cg * k * k)
    _record("conv2d", c_out * cg * k * k * ho * wo)

    if k == 1 and pad == 0:
        xs = x.data if s == 1 else x.data[:, :, ::s, ::s]
        cols = np.ascontiguousarray(xs).reshape(n, g, cg, ho * wo)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        cols = np.empty((n, c, k, k, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
        cols = cols.reshape(n, g, cg * k * k, ho * wo)

    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)
    parents: tuple[Tensor, ...] = (x, p.weight)
    if p.bias is not None:
        out += p.bias.data.reshape(1, c_out, 1, 1)
        parents = parents + (p.bias,)

    def backward(gout: np.ndarray):
        gmat = gout.reshape(n, g, og, ho * wo)
        gw = None
        if p.weight.requires_grad:
            # per-sample products summed over the batch beat one big transposed GEMM here
            gw = np.matmul(gmat, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(p.weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.transpose(0, 2, 1), gmat)
            if k == 1 and pad == 0:
                gcols = gcols.reshape(n, c, ho, wo)
                if s == 1:
                    gx = gcols
                else:
                    gx = np.zeros((n, c, h, w), dtype=DTYPE)
                    gx[:, :, ::s, ::s] = gcols
            else:
                gcols = gcols.reshape(n, c, k, k, ho, wo)
                gxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, i, j]
                gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(gout.sum(axis=(0, 2, 3)))
        return grads

    return Tensor.from_op(out, parents, backward)


# -- normalisation / activation -----------------------------------------------------


def _channel_sum(a: np.ndarray) -> np.ndarray:
    """Per-channel sum of an NCHW array (contiguous inner reduction first)."""
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def batch_norm(x: Tensor, p: NormParams) -> Tensor:
    n, c, h, w = x.shape
    if c != p.channels:
        raise ConfigError(f"batch_norm channels: got C={c}, parameters hold {p.channels}")
    count = n * h * w
    if count == 0:
        raise DegenerateInputError("batch_norm over zero batch*spatial elements")
    gamma = p.gamma.data.reshape(1, c, 1, 1)
    beta = p.beta.data.reshape(1, c, 1, 1)

    if p.mode == "train":
        mean = _channel_sum(x.data) / DTYPE(count)
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = _channel_sum(centered * centered) / DTYPE(count)
        inv_std = (1.0 / np.sqrt(var + DTYPE(p.epsilon))).astype(DTYPE)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        m = DTYPE(p.momentum)
        unbiased = var * DTYPE(count / max(count - 1, 1))
        p.running_mean[:] = (1 - m) * p.running_mean + m * mean
        p.running_var[:] = (1 - m) * p.running_var + m * unbiased

        def backward(g: np.ndarray):
            gsum = _channel_sum(g)
            gxsum = _channel_sum(g * xhat)
            gx = None
            if x.requires_grad:
                # gamma/std * (g - mean(g) - xhat * mean(g * xhat)), per channel
                a = p.gamma.data * inv_std
                gx = g * a.reshape(1, c, 1, 1)
                gx -= xhat * (a * gxsum / DTYPE(count)).reshape(1, c, 1, 1)
                gx -= (a * gsum / DTYPE(count)).reshape(1, c, 1, 1)
            return gx, gxsum, gsum

    else:
        inv_std = (1.0 / np.sqrt(p.running_var + DTYPE(p.epsilon))).astype(DTYPE).reshape(1, c, 1, 1)
        xhat = (x.data - p.running_mean.reshape(1, c, 1, 1)) * inv_std

        def backward(g: np.ndarray):
            return g * (gamma * inv_std), _channel_sum(g * xhat), _channel_sum(g)

    out = xhat * gamma + beta
    return Tensor.from_op(out, (x, p.gamma, p.beta), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, DTYPE(0))
    if _pattern_recorders:
        _pattern(out > 0)
    # out > 0 exactly where x > 0, so the subgradient at 0 is 0
    return Tensor.from_op(out, (x,), lambda g: (g * (out > 0),))


# -- pooling and resampling ---------------------------------------------------------


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 stride-2 average pooling.

    Odd dimensions produce ``ceil(size / 2)`` outputs; the final window then
    covers a single row/column and is averaged over the elements it holds.
    """
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DegenerateInputError(f"avg_pool2 needs H, W >= 2, got {h}x{w}")
    if h % 2 == 0 and w % 2 == 0:
        rows = x.data[:, :, 0::2, :] + x.data[:, :, 1::2, :]
        out = (rows[:, :, :, 0::2] + rows[:, :, :, 1::2]) * DTYPE(0.25)

        def backward(g: np.ndarray):
            q = g * DTYPE(0.25)
            return (np.repeat(np.repeat(q, 2, axis=2), 2, axis=3),)

        return Tensor.from_op(out, (x,), backward)

    ho, wo = -(-h // 2), -(-w // 2)
    padded = np.zeros((n, c, 2 * ho, 2 * wo), dtype=DTYPE)
    padded[:, :, :h, :w] = x.data
    ones = np.zeros((2 * ho, 2 * wo), dtype=DTYPE)
    ones[:h, :w] = 1
    counts = ones.reshape(ho, 2, wo, 2).sum(axis=(1, 3))
    rows = padded[:, :, 0::2, :] + padded[:, :, 1::2, :]
    out = (rows[:, :, :, 0::2] + rows[:, :, :, 1::2]) / counts

    def backward_odd(g: np.ndarray):
        q = g / counts
        full = np.repeat(np.repeat(q, 2, axis=2), 2, axis=3)
        return (full[:, :, :h, :w],)

    return Tensor.from_op(out, (x,), backward_odd)


def _bilinear_axis(in_size: int, out_size: int):
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_size - 1)
    frac = src - i0
    w1 = frac.astype(DTYPE)
    w0 = (1.0 - frac).astype(DTYPE)
    matrix = np.zeros((out_size, in_size), dtype=DTYPE)
    np.add.at(matrix, (np.arange(out_size), i0), w0)
    np.add.at(matrix, (np.arange(out_size), i1), w1)
    return i0, i1, w0, w1, matrix


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise InputError(f"bilinear_resize target must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return Tensor.from_op(x.data.copy(), (x,), lambda g: (g,))
    hmat = _bilinear_axis(h, out_h)[-1]
    wmat = _bilinear_axis(w, out_w)[-1]
    # rows first, then columns; each output sums at most two non-zero products
    rows = np.matmul(hmat, x.data)
    out = np.matmul(rows.reshape(-1, w), wmat.T).reshape(n, c, out_h, out_w)

    def backward(g: np.ndarray):
        return (np.matmul(hmat.T, np.matmul(g, wmat)),)

    return Tensor.from_op(out, (x,), backward)


def nearest_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise InputError(f"nearest_resize target must be >= 1, got {out_h}x{out_w}")
    hi = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    wi = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    out = x.data[:, :, hi][:, :, :, wi]

    def backward(g: np.ndarray):
        rows = np.zeros((n, c, out_h, w), dtype=DTYPE)
        np.add.at(rows, (slice(None), slice(None), slice(None), wi), g)
        gx = np.zeros((n, c, h, w), dtype=DTYPE)
        np.add.at(gx, (slice(None), slice(None), hi), rows)
        return (gx,)

    return Tensor.from_op(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    scale = DTYPE(1.0 / (h * w))
    return Tensor.from_op(
        out, (x,), lambda g: (np.broadcast_to(g * scale, (n, c, h, w)),)
    )


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, padding), conv_output_size(w, kernel, stride, padding)
    if ho < 1 or wo < 1:
        raise DegenerateInputError(f"max_pool2d output would be {ho}x{wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    windows = np.stack(
        [
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            for i in range(kernel)
            for j in range(kernel)
        ]
    )
    arg = windows.argmax(axis=0)
    if _pattern_recorders:
        _pattern(arg)
    out = np.take_along_axis(windows, arg[None], axis=0)[0]

    def backward(g: np.ndarray):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == idx)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return Tensor.from_op(out, (x,), backward)


# -- classifier head ------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of flattened features: ``(N, F) @ weight.T + bias`` with weight ``(K, F)``."""
    n = x.shape[0]
    feats = x.data.reshape(n, -1)
    if feats.shape[1] != weight.shape[1]:
        raise ConfigError(f"linear expects {weight.shape[1]} features, got {feats.shape[1]}")
    _record("linear", weight.shape[0] * weight.shape[1])
    out = feats @ weight.data.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = parents + (bias,)
    xshape = x.shape

    def backward(g: np.ndarray):
        grads = [(g @ weight.data).reshape(xshape), g.T @ feats]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return Tensor.from_op(out, parents, backward)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch, stabilised by max subtraction."""
    z = logits.data.reshape(logits.shape[0], -1)
    n, k = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise InputError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    shifted = z.astype(np.float64) - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = (lse - shifted[np.arange(n), labels]).mean()
    probs = np.exp(shifted - lse[:, None])
    lshape = logits.shape

    def backward(g: np.ndarray):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return ((d * (float(g) / n)).astype(DTYPE).reshape(lshape),)

    return Tensor.from_op(np.asarray(loss, dtype=DTYPE), (logits,), backward)
