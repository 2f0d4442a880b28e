"""Forward and backward kernels for every layer the counting network uses.

All operators are pure functions over tensors: standard/dilated convolution,
2x2 max pooling, bilinear sampling, deformable convolution, channel and
spatial attention gates, and channel concatenation. Each records a single
tape entry whose backward closure scatters gradients to every differentiable
argument.

Convolution here means cross-correlation (the usual deep-learning
convention). Spatial layout is batch x channels x height x width; kernels
are out_channels x in_channels x k x k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, record
from . import tensor as T


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer.

    Output extent per spatial side is
    ``floor((n + 2*padding - dilation*(kernel_size-1) - 1) / stride) + 1``.
    """

    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        for field in ("in_channels", "out_channels", "stride", "dilation"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be >= 1")
        if self.padding < 0:
            raise ConfigError("padding must be >= 0")

    @property
    def effective_kernel_extent(self) -> int:
        return self.dilation * (self.kernel_size - 1) + 1

    def out_extent(self, n: int) -> int:
        return (n + 2 * self.padding - self.effective_kernel_extent) // self.stride + 1


@dataclass(frozen=True)
class AttentionSpec:
    """Channel-MLP bottleneck ratio and spatial-attention kernel size."""

    reduction_ratio: int = 16
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.reduction_ratio < 1:
            raise ConfigError("reduction_ratio must be >= 1")
        if self.spatial_kernel < 1 or self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd, got {self.spatial_kernel}")


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap_slice(xp: np.ndarray, i: int, j: int, d: int, s: int, Ho: int, Wo: int) -> np.ndarray:
    return xp[:, :, i * d:i * d + (Ho - 1) * s + 1:s, j * d:j * d + (Wo - 1) * s + 1:s]


def _im2col(xp: np.ndarray, k: int, s: int, d: int, Ho: int, Wo: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B*Ho*Wo, C*k*k) patch matrix."""
    B, C = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Ho, Wo, C, k, k),
        strides=(sb, sh * s, sw * s, sc, sh * d, sw * d), writeable=False)
    return windows.reshape(B * Ho * Wo, C * k * k)


# above this many column-matrix bytes conv2d switches to a slower
# tap-by-tap path that never materialises the patches
_IM2COL_BYTE_LIMIT = 256 * 2 ** 20


def conv2d(x: Tensor, weights: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation with zero padding, stride and dilation.

    x: (B, C, H, W); weights: (O, C, k, k); bias: (O,) or None.
    Differentiable w.r.t. x, weights and bias. The usual case runs as a
    single im2col GEMM whose patch matrix is kept for the backward pass;
    very large inputs fall back to one GEMM per kernel tap.
    """
    k, s, d, p = spec.kernel_size, spec.stride, spec.dilation, spec.padding
    if x.values.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got shape {x.shape}")
    B, C, H, W = x.shape
    if weights.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ShapeError(f"weights shape {weights.shape} does not match spec {spec}")
    if C != spec.in_channels:
        raise ShapeError(f"input has {C} channels, spec expects {spec.in_channels}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    Ho, Wo = spec.out_extent(H), spec.out_extent(W)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output extent {Ho}x{Wo} < 1 for input {H}x{W}")

    O = spec.out_channels
    xp = _pad_hw(x.values, p)
    w = weights.values
    w_mat = w.reshape(O, C * k * k)
    small = B * Ho * Wo * C * k * k * 8 <= _IM2COL_BYTE_LIMIT
    if small:
        cols = _im2col(xp, k, s, d, Ho, Wo)
        out_mat = cols @ w_mat.T
    else:
        cols = None
        out_mat = np.zeros((B * Ho * Wo, O))
        for i in range(k):
            for j in range(k):
                sl = _tap_slice(xp, i, j, d, s, Ho, Wo)
                out_mat += sl.transpose(0, 2, 3, 1).reshape(-1, C) @ w[:, :, i, j].T
    if bias is not None:
        out_mat += bias.values
    out = Tensor(out_mat.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g: np.ndarray) -> None:
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, O)
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        dxp = np.zeros_like(xp)
        if cols is not None:
            weights.accumulate_grad((g_mat.T @ cols).reshape(w.shape))
            # (B, Ho, Wo, C, k, k) -> accumulate each tap's plane into dxp
            dcols = (g_mat @ w_mat).reshape(B, Ho, Wo, C, k, k)
            dtaps = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
            for i in range(k):
                for j in range(k):
                    _tap_slice(dxp, i, j, d, s, Ho, Wo)[...] += dtaps[i, j]
        else:
            dw = np.zeros_like(w)
            for i in range(k):
                for j in range(k):
                    sl = _tap_slice(xp, i, j, d, s, Ho, Wo)
                    dw[:, :, i, j] = g_mat.T @ sl.transpose(0, 2, 3, 1).reshape(-1, C)
                    contrib = (g_mat @ w[:, :, i, j]).reshape(B, Ho, Wo, C).transpose(0, 3, 1, 2)
                    _tap_slice(dxp, i, j, d, s, Ho, Wo)[...] += contrib
            weights.accumulate_grad(dw)
        x.accumulate_grad(dxp[:, :, p:p + H, p:p + W] if p else dxp)

    record(out, bw)
    return out


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; extents must be even.

    Backward routes each window's gradient to its first maximal element in
    row-major order, so tie-breaking is deterministic.
    """
    if x.values.ndim != 4:
        raise ShapeError(f"max_pool2x2 input must be 4-D, got shape {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2x2 needs even extents, got {H}x{W}")
    windows = (x.values.reshape(B, C, H // 2, 2, W // 2, 2)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(B, C, H // 2, W // 2, 4))
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    def bw(g: np.ndarray) -> None:
        dwin = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = (dwin.reshape(B, C, H // 2, W // 2, 2, 2)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(B, C, H, W))
        x.accumulate_grad(dx)

    record(out, bw)
    return out


def bilinear_sample(feature: Tensor, x, y) -> Tensor:
    """Sample a (C, H, W) feature map at fractional position (x, y).

    Bilinear interpolation of the four integer-lattice neighbours; neighbours
    outside [0, H-1] x [0, W-1] contribute zero. ``x``/``y`` may be floats or
    scalar tensors; gradients flow into the feature map and, when tensors are
    given, into the coordinates (piecewise linear, kinked at lattice points).
    """
    if feature.values.ndim != 3:
        raise ShapeError(f"bilinear_sample expects (C, H, W), got {feature.shape}")
    C, H, W = feature.shape
    x_t = x if isinstance(x, Tensor) else None
    y_t = y if isinstance(y, Tensor) else None
    xf = x.item() if isinstance(x, Tensor) else float(x)
    yf = y.item() if isinstance(y, Tensor) else float(y)

    x0, y0 = int(np.floor(xf)), int(np.floor(yf))
    fx, fy = xf - x0, yf - y0
    fv = feature.values

    def corner(cy: int, cx: int) -> np.ndarray:
        if 0 <= cy < H and 0 <= cx < W:
            return fv[:, cy, cx]
        return np.zeros(C)

    v00, v01 = corner(y0, x0), corner(y0, x0 + 1)
    v10, v11 = corner(y0 + 1, x0), corner(y0 + 1, x0 + 1)
    out = Tensor((1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11))

    def bw(g: np.ndarray) -> None:
        df = np.zeros_like(fv)
        for cy, cx, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                            (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
            if 0 <= cy < H and 0 <= cx < W:
                df[:, cy, cx] += wgt * g
        feature.accumulate_grad(df)
        if x_t is not None:
            dx = float(g @ ((1 - fy) * (v01 - v00) + fy * (v11 - v10)))
            x_t.accumulate_grad(np.full(x_t.shape, dx))
        if y_t is not None:
            dy = float(g @ ((1 - fx) * (v10 - v00) + fx * (v11 - v01)))
            y_t.accumulate_grad(np.full(y_t.shape, dy))

    record(out, bw)
    return out


def deformable_conv2d(x: Tensor, weights: Tensor, bias: Tensor | None,
                      offsets: Tensor, spec: ConvSpec) -> Tensor:
    """Convolution whose taps sample at learned fractional displacements.

    Resolution preserving: requires stride 1 and padding (k-1)/2. Offsets
    carry 2*k*k channels; for tap t = i*k + j (row-major over the kernel),
    channel 2t is the vertical displacement and channel 2t+1 the horizontal
    one. Displaced taps are read with zero-exterior bilinear interpolation,
    so the output is differentiable w.r.t. input, weights, bias AND offsets.
    With all-zero offsets this reduces exactly to conv2d.
    """
    k = spec.kernel_size
    if spec.stride != 1 or spec.padding != (k - 1) // 2:
        raise ConfigError("deformable_conv2d requires stride 1 and padding (k-1)/2")
    if x.values.ndim != 4:
        raise ShapeError(f"deformable_conv2d input must be 4-D, got {x.shape}")
    B, C, H, W = x.shape
    if weights.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ShapeError(f"weights shape {weights.shape} does not match spec {spec}")
    if C != spec.in_channels:
        raise ShapeError(f"input has {C} channels, spec expects {spec.in_channels}")
    if offsets.shape != (B, 2 * k * k, H, W):
        raise ShapeError(f"offsets shape {offsets.shape} != {(B, 2 * k * k, H, W)}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({spec.out_channels},)")

    O, pad = spec.out_channels, (k - 1) // 2
    xv = x.values.transpose(0, 2, 3, 1)  # (B, H, W, C) gather layout
    w = weights.values
    off = offsets.values
    b_idx = np.arange(B)[:, None, None]
    grid_y = np.arange(H)[None, :, None]
    grid_x = np.arange(W)[None, None, :]

    def tap_corners(t: int):
        """Per-corner (row, col, validity, wy, wx) for one kernel tap.

        wy/wx are the 1-D interpolation factors; the bilinear weight of a
        corner is wy*wx*valid, and d/d(position) only touches wy or wx.
        """
        i, j = divmod(t, k)
        py = grid_y + (i - pad) + off[:, 2 * t]
        px = grid_x + (j - pad) + off[:, 2 * t + 1]
        y0 = np.floor(py).astype(np.int64)
        x0 = np.floor(px).astype(np.int64)
        fy, fx = py - y0, px - x0
        corners = []
        for cy, cx, wy, wx in ((y0, x0, 1 - fy, 1 - fx), (y0, x0 + 1, 1 - fy, fx),
                               (y0 + 1, x0, fy, 1 - fx), (y0 + 1, x0 + 1, fy, fx)):
            valid = ((cy >= 0) & (cy < H) & (cx >= 0) & (cx < W)).astype(np.float64)
            corners.append((np.clip(cy, 0, H - 1), np.clip(cx, 0, W - 1), valid, wy, wx))
        return corners

    def tap_samples(corners) -> np.ndarray:
        sampled = np.zeros((B, H, W, C))
        for cyc, cxc, valid, wy, wx in corners:
            sampled += (wy * wx * valid)[..., None] * xv[b_idx, cyc, cxc]
        return sampled

    acc = np.zeros((B * H * W, O))
    if bias is not None:
        acc += bias.values
    for t in range(k * k):
        acc += tap_samples(tap_corners(t)).reshape(-1, C) @ w[:, :, t // k, t % k].T
    out = Tensor(acc.reshape(B, H, W, O).transpose(0, 3, 1, 2))

    def bw(g: np.ndarray) -> None:
        g_mat = g.transpose(0, 2, 3, 1).reshape(-1, O)
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        dw = np.zeros_like(w)
        dx_flat = np.zeros((B * H * W, C))
        doff = np.zeros_like(off)
        # dwy/dpy is -1 for the two y0 corners and +1 for the y1 corners;
        # same pattern for dwx/dpx over x0/x1.
        corner_signs = ((-1, -1), (-1, 1), (1, -1), (1, 1))
        for t in range(k * k):
            corners = tap_corners(t)
            sampled = tap_samples(corners)
            w_tap = w[:, :, t // k, t % k]
            dw[:, :, t // k, t % k] = g_mat.T @ sampled.reshape(-1, C)
            dval = (g_mat @ w_tap).reshape(B, H, W, C)
            dpy = np.zeros((B, H, W))
            dpx = np.zeros((B, H, W))
            for (sy, sx), (cyc, cxc, valid, wy, wx) in zip(corner_signs, corners):
                vals = xv[b_idx, cyc, cxc]  # clipped gather; masked by valid below
                dot = np.einsum("bhwc,bhwc->bhw", dval, vals) * valid
                dpy += sy * wx * dot
                dpx += sx * wy * dot
                contrib = dval * (wy * wx * valid)[..., None]
                flat_idx = ((b_idx * H + cyc) * W + cxc).reshape(-1)
                np.add.at(dx_flat, flat_idx, contrib.reshape(-1, C))
            doff[:, 2 * t] += dpy
            doff[:, 2 * t + 1] += dpx
        weights.accumulate_grad(dw)
        x.accumulate_grad(dx_flat.reshape(B, H, W, C).transpose(0, 3, 1, 2))
        offsets.accumulate_grad(doff)

    record(out, bw)
    return out


# ---------------------------------------------------------------------------
# reductions used by the attention gates


def mean_over_hw(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial average."""
    B, C, H, W = x.shape
    out = Tensor(x.values.mean(axis=(2, 3)))

    def bw(g: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy())

    record(out, bw)
    return out


def max_over_hw(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, C) spatial maximum; gradient to the first argmax."""
    B, C, H, W = x.shape
    flat = x.values.reshape(B, C, H * W)
    idx = flat.argmax(axis=2)
    out = Tensor(np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0])

    def bw(g: np.ndarray) -> None:
        dflat = np.zeros((B, C, H * W))
        np.put_along_axis(dflat, idx[:, :, None], g[:, :, None], axis=2)
        x.accumulate_grad(dflat.reshape(B, C, H, W))

    record(out, bw)
    return out


def mean_over_channels(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, 1, H, W) channel average."""
    C = x.shape[1]
    out = Tensor(x.values.mean(axis=1, keepdims=True))

    def bw(g: np.ndarray) -> None:
        x.accumulate_grad(np.broadcast_to(g / C, x.shape).copy())

    record(out, bw)
    return out


def max_over_channels(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, 1, H, W) channel maximum; gradient to first argmax."""
    idx = x.values.argmax(axis=1)[:, None]
    out = Tensor(np.take_along_axis(x.values, idx, axis=1))

    def bw(g: np.ndarray) -> None:
        dx = np.zeros(x.shape)
        np.put_along_axis(dx, idx, g, axis=1)
        x.accumulate_grad(dx)

    record(out, bw)
    return out


def concat_channels(inputs: list[Tensor]) -> Tensor:
    """Stack (B, C_i, H, W) tensors along the channel axis, in argument order."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    first = inputs[0].shape
    for t in inputs[1:]:
        if t.values.ndim != 4 or t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise ShapeError(f"concat_channels extent mismatch: {t.shape} vs {first}")
    widths = [t.shape[1] for t in inputs]
    out = Tensor(np.concatenate([t.values for t in inputs], axis=1))

    def bw(g: np.ndarray) -> None:
        start = 0
        for t, c in zip(inputs, widths):
            t.accumulate_grad(g[:, start:start + c])
            start += c

    record(out, bw)
    return out


# ---------------------------------------------------------------------------
# attention gates (sequential channel gate, then spatial gate)


def channel_attention(x: Tensor, w1: Tensor, w2: Tensor, spec: AttentionSpec) -> Tensor:
    """Channel gate in (0, 1): sigmoid(MLP(avgpool) + MLP(maxpool)).

    The two pooled descriptors share one two-layer MLP, C -> C/r -> C with a
    ReLU between; w1 is (C, C/r) and w2 is (C/r, C). Returns (B, C, 1, 1);
    the caller multiplies the input by it.
    """
    B, C = x.shape[0], x.shape[1]
    if C % spec.reduction_ratio:
        raise ConfigError(f"{C} channels not divisible by reduction ratio {spec.reduction_ratio}")
    hidden = C // spec.reduction_ratio
    if w1.shape != (C, hidden) or w2.shape != (hidden, C):
        raise ShapeError(f"attention MLP shapes {w1.shape}/{w2.shape} do not match C={C}, r={spec.reduction_ratio}")

    def mlp(v: Tensor) -> Tensor:
        return T.matmul(T.relu(T.matmul(v, w1)), w2)

    gate = T.sigmoid(T.add(mlp(mean_over_hw(x)), mlp(max_over_hw(x))))
    return T.reshape(gate, (B, C, 1, 1))


def spatial_attention(x: Tensor, weight: Tensor, spec: AttentionSpec) -> Tensor:
    """Spatial gate in (0, 1): sigmoid(conv_kxk([channel mean, channel max])).

    weight is (1, 2, k, k) with k = spec.spatial_kernel; same-padding keeps
    the output at (B, 1, H, W). Applied after the channel gate.
    """
    k = spec.spatial_kernel
    if weight.shape != (1, 2, k, k):
        raise ShapeError(f"spatial attention weight shape {weight.shape} != (1, 2, {k}, {k})")
    stats = concat_channels([mean_over_channels(x), max_over_channels(x)])
    conv_spec = ConvSpec(kernel_size=k, in_channels=2, out_channels=1, padding=(k - 1) // 2)
    return T.sigmoid(conv2d(stats, weight, None, conv_spec))
