"""Spatial primitives on (batch, channel, height, width) arrays.

All operations treat inputs as immutable and preserve the floating dtype
of their arguments.  Convolution and transposed convolution have two
execution paths:

* the default im2col/GEMM path, used everywhere speed matters;
* a fixed-order tap-accumulation path (``exact=True``) whose per-element
  summation order is (channel, row, col) of the kernel and does not
  depend on the array shapes involved.  Runs over different croppings of
  the same data therefore produce bit-identical values, which is what
  the interleaving- and tiling-equality checks rely on.

Operations never parallelize internally while ``DETERMINISTIC`` is True
(the default); evaluation is single threaded and reproducible bit for
bit across repeated runs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

DETERMINISTIC = True


def conv_out_size(size, kernel, stride=1, pad=0, dilation=1):
    """Output length of a strided, dilated, zero-padded correlation."""
    span = dilation * (kernel - 1) + 1
    out = (size + 2 * pad - span) // stride + 1
    if out < 1:
        raise ShapeError(
            f"non-positive output size: input {size}, kernel {kernel}, "
            f"stride {stride}, pad {pad}, dilation {dilation}"
        )
    return out


@dataclass(frozen=True)
class ConvSpec:
    """Hyperparameters of one convolution: square kernel, stride, symmetric
    zero padding, dilation and output channel count."""

    kernel: int
    out_channels: int
    stride: int = 1
    pad: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.pad < 0 or self.dilation < 1:
            raise ShapeError(f"invalid convolution spec: {self}")

    def out_hw(self, h, w):
        return (
            conv_out_size(h, self.kernel, self.stride, self.pad, self.dilation),
            conv_out_size(w, self.kernel, self.stride, self.pad, self.dilation),
        )


# ---------------------------------------------------------------------------
# im2col machinery
# ---------------------------------------------------------------------------

def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def im2col(x, kh, kw, stride=1, pad=0, dilation=1):
    """Unfold sliding windows into rows.

    Returns ``(cols, oh, ow)`` where ``cols`` has shape
    (n*oh*ow, c*kh*kw); column order is (channel, kernel row, kernel col).
    """
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad, dilation)
    ow = conv_out_size(w, kw, stride, pad, dilation)
    xp = _pad_hw(x, pad)
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        y1 = y0 + stride * oh
        for kx in range(kw):
            x0 = kx * dilation
            x1 = x0 + stride * ow
            cols[:, :, ky, kx] = xp[:, :, y0:y1:stride, x0:x1:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw), oh, ow


def col2im(cols, x_shape, kh, kw, stride=1, pad=0, dilation=1):
    """Adjoint of :func:`im2col`: scatter-add rows back onto an array of
    shape ``x_shape``."""
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad, dilation)
    ow = conv_out_size(w, kw, stride, pad, dilation)
    blocks = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        y1 = y0 + stride * oh
        for kx in range(kw):
            x0 = kx * dilation
            x1 = x0 + stride * ow
            buf[:, :, y0:y1:stride, x0:x1:stride] += blocks[:, :, ky, kx]
    if pad == 0:
        return buf
    return buf[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv_args(x, weight):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d: need 4-D input and kernel, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but kernel expects "
            f"{weight.shape[1]} (input {x.shape}, kernel {weight.shape})"
        )


def conv_forward_cols(x, weight, bias=None, stride=1, pad=0, dilation=1):
    """Forward correlation returning ``(y, cols)`` so callers can reuse the
    unfolded input for the backward pass."""
    _check_conv_args(x, weight)
    n = x.shape[0]
    o, i, kh, kw = weight.shape
    cols, oh, ow = im2col(x, kh, kw, stride, pad, dilation)
    y = cols @ weight.reshape(o, i * kh * kw).T
    if bias is not None:
        y += bias
    return y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2), cols


def _conv2d_exact(x, weight, bias, stride, pad, dilation):
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh = conv_out_size(h, kh, stride, pad, dilation)
    ow = conv_out_size(w, kw, stride, pad, dilation)
    xp = _pad_hw(x, pad)
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    # Accumulation order (ci, ky, kx) is fixed and shape independent.
    for ci in range(c):
        plane = xp[:, ci]
        for ky in range(kh):
            y0 = ky * dilation
            y1 = y0 + stride * oh
            for kx in range(kw):
                x0 = kx * dilation
                x1 = x0 + stride * ow
                tap = plane[:, y0:y1:stride, x0:x1:stride]
                out += weight[None, :, ci, ky, kx, None, None] * tap[:, None]
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d(x, weight, bias=None, stride=1, pad=0, dilation=1, exact=False):
    """Strided, dilated cross-correlation over a zero-padded input.

    ``weight`` is (out_channels, in_channels, kh, kw); ``bias`` is one
    value per output channel or None.
    """
    if exact:
        _check_conv_args(x, weight)
        return _conv2d_exact(x, weight, bias, stride, pad, dilation)
    y, _ = conv_forward_cols(x, weight, bias, stride, pad, dilation)
    return y


def conv_backward_from_cols(cols, x_shape, weight, dy, stride=1, pad=0, dilation=1,
                            with_bias=True):
    """Gradients of conv2d given the cached ``cols`` from the forward pass.

    Returns ``(dx, dweight, dbias)``; ``dbias`` is None when ``with_bias``
    is False.
    """
    o, i, kh, kw = weight.shape
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dweight = (dy_flat.T @ cols).reshape(o, i, kh, kw)
    dbias = dy_flat.sum(axis=0) if with_bias else None
    dcols = dy_flat @ weight.reshape(o, i * kh * kw)
    dx = col2im(dcols, x_shape, kh, kw, stride, pad, dilation)
    return dx, dweight, dbias


def conv2d_backward(x, weight, dy, stride=1, pad=0, dilation=1, with_bias=True):
    cols, _, _ = im2col(x, weight.shape[2], weight.shape[3], stride, pad, dilation)
    return conv_backward_from_cols(cols, x.shape, weight, dy, stride, pad, dilation,
                                   with_bias)


def conv_backward_input(dy, weight, x_shape, stride=1, pad=0, dilation=1):
    """Input gradient alone (also the forward pass of transposed conv)."""
    o, i, kh, kw = weight.shape
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, o)
    dcols = dy_flat @ weight.reshape(o, i * kh * kw)
    return col2im(dcols, x_shape, kh, kw, stride, pad, dilation)


# ---------------------------------------------------------------------------
# pooling and unpooling
# ---------------------------------------------------------------------------

def _pool_view(x, k):
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(
            f"pooling window {k} does not tile input of shape {x.shape}"
        )
    oh, ow = h // k, w // k
    v = x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    # Window cells flattened row major, matching the tie-break convention.
    return v.reshape(n, c, oh, ow, k * k)


def maxpool2d(x, window):
    """Non-overlapping max pooling (stride equals window).

    Returns ``(pooled, indices)`` where each index is the flat row-major
    offset of the selected maximum within its window; ties resolve to the
    first maximum in scan order.
    """
    v = _pool_view(x, window)
    idx = v.argmax(axis=-1)
    pooled = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return pooled, idx.astype(np.int64)


def maxpool2d_backward(dy, indices, window, x_shape):
    return _scatter_windows(dy, indices, window, x_shape)


def _scatter_windows(values, indices, k, out_shape):
    n, c, h, w = out_shape
    oh, ow = h // k, w // k
    buf = np.zeros((n, c, oh, ow, k * k), dtype=values.dtype)
    np.put_along_axis(buf, indices[..., None], values[..., None], axis=-1)
    return (
        buf.reshape(n, c, oh, ow, k, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )


def max_unpool2d(pooled, indices, window):
    """Place each pooled value at its recorded offset; all other cells of
    the window are exactly zero."""
    if pooled.shape != indices.shape:
        raise ShapeError(
            f"max_unpool2d: pooled {pooled.shape} vs indices {indices.shape}"
        )
    n, c, oh, ow = pooled.shape
    return _scatter_windows(pooled, indices, window,
                            (n, c, oh * window, ow * window))


def max_unpool2d_backward(dy, indices, window):
    v = _pool_view(dy, window)
    return np.take_along_axis(v, indices[..., None], axis=-1)[..., 0]


def avgpool2d(x, window):
    """Non-overlapping average pooling."""
    return _pool_view(x, window).mean(axis=-1)


def avgpool2d_backward(dy, window):
    return avg_unpool2d(dy, window)


def avg_unpool2d(pooled, window):
    """Spread each value uniformly: every cell of the k-by-k output window
    holds value / k**2."""
    k2 = np.asarray(window * window, dtype=pooled.dtype)
    return (pooled / k2).repeat(window, axis=2).repeat(window, axis=3)


def avg_unpool2d_backward(dy, window):
    return avgpool2d(dy, window)


def dilated_maxpool2d(x, window=2, dilation=1):
    """Stride-1 max over ``window`` taps spaced ``dilation`` apart.

    The input is zero padded on the bottom/right so the output keeps the
    input's spatial size (callers apply it to non-negative maps, where a
    zero pad equals the value beyond the border).  Returns ``(y, idx)``
    with idx in [0, window**2) in row-major tap order.
    """
    n, c, h, w = x.shape
    m = dilation * (window - 1)
    xp = np.pad(x, ((0, 0), (0, 0), (0, m), (0, m)))
    taps = np.stack(
        [
            xp[:, :, ty * dilation: ty * dilation + h,
               tx * dilation: tx * dilation + w]
            for ty in range(window)
            for tx in range(window)
        ],
        axis=-1,
    )
    idx = taps.argmax(axis=-1)
    y = np.take_along_axis(taps, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.int64)


def dilated_maxpool2d_backward(dy, indices, window, dilation, x_shape):
    n, c, h, w = x_shape
    m = dilation * (window - 1)
    buf = np.zeros((n, c, h + m, w + m), dtype=dy.dtype)
    for t in range(window * window):
        ty, tx = divmod(t, window)
        sel = indices == t
        np.add.at(
            buf[:, :, ty * dilation: ty * dilation + h,
                tx * dilation: tx * dilation + w],
            np.nonzero(sel),
            dy[sel],
        )
    return buf[:, :, :h, :w]


# ---------------------------------------------------------------------------
# transposed convolution
# ---------------------------------------------------------------------------

def _check_tconv_args(x, weight):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"transposed_conv2d: need 4-D input and kernel, got {x.shape} "
            f"and {weight.shape}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"transposed_conv2d: input has {x.shape[1]} channels but kernel "
            f"expects {weight.shape[0]} (input {x.shape}, kernel {weight.shape})"
        )


def tconv_out_hw(in_hw, kernel, stride=1, crop=0):
    h = stride * (in_hw[0] - 1) + kernel - 2 * crop
    w = stride * (in_hw[1] - 1) + kernel - 2 * crop
    if h < 1 or w < 1:
        raise ShapeError(
            f"transposed_conv2d: crop {crop} exceeds border for input {in_hw}, "
            f"kernel {kernel}, stride {stride}"
        )
    return h, w


def transposed_conv2d(x, weight, stride=1, crop=0, out_hw=None, exact=False):
    """Linear adjoint of :func:`conv2d` with the same kernel and stride.

    ``weight`` is (in_channels, out_channels, kh, kw).  The default output
    size is stride*(H-1) + kh - 2*crop; ``out_hw`` may pin any size that a
    forward conv2d(kernel, stride, pad=crop) would map back onto the input
    size, which resolves the rounding ambiguity of strided convolutions.
    """
    _check_tconv_args(x, weight)
    i, o, kh, kw = weight.shape
    n, _, h, w = x.shape
    if kh != kw:
        raise ShapeError(f"transposed_conv2d: kernel must be square, got {weight.shape}")
    if out_hw is None:
        out_hw = tconv_out_hw((h, w), kh, stride, crop)
    expect = (
        conv_out_size(out_hw[0], kh, stride, crop),
        conv_out_size(out_hw[1], kw, stride, crop),
    )
    if expect != (h, w):
        raise ShapeError(
            f"transposed_conv2d: output size {out_hw} is inconsistent with "
            f"input {x.shape} under kernel {kh}, stride {stride}, crop {crop}"
        )
    if exact:
        return _tconv_exact(x, weight, stride, crop, out_hw)
    # View the kernel as a conv weight (o=i, i=o) and scatter through col2im.
    wc = weight.reshape(i, o * kh * kw)
    dcols = x.transpose(0, 2, 3, 1).reshape(-1, i) @ wc
    return col2im(dcols, (n, o, out_hw[0], out_hw[1]), kh, kw, stride, crop)


def _tconv_exact(x, weight, stride, crop, out_hw):
    i, o, kh, kw = weight.shape
    n, _, h, w = x.shape
    oh, ow = out_hw
    out = np.zeros((n, o, oh + 2 * crop, ow + 2 * crop), dtype=x.dtype)
    for ci in range(i):
        plane = x[:, ci]
        for ky in range(kh):
            y1 = ky + stride * h
            for kx in range(kw):
                x1 = kx + stride * w
                out[:, :, ky:y1:stride, kx:x1:stride] += (
                    weight[None, ci, :, ky, kx, None, None] * plane[:, None]
                )
    if crop == 0:
        return out
    return out[:, :, crop:crop + oh, crop:crop + ow]


def transposed_conv2d_backward(x, weight, dy, stride=1, crop=0):
    """Gradients of transposed_conv2d.  Returns ``(dx, dweight)``."""
    i, o, kh, kw = weight.shape
    # The kernel read as a conv weight (out=i, in=o) turns the output
    # gradient back into an input gradient with one forward correlation.
    dx = conv2d(dy, weight, None, stride=stride, pad=crop)
    cols, _, _ = im2col(dy, kh, kw, stride, crop)
    x_flat = x.transpose(0, 2, 3, 1).reshape(-1, i)
    dweight = (x_flat.T @ cols).reshape(i, o, kh, kw)
    return dx, dweight


def make_bilinear_kernel(channels, factor, dtype=np.float32):
    """Channel-diagonal kernel that performs bilinear upsampling by
    ``factor`` when used with transposed_conv2d at stride ``factor`` and
    crop ``factor // 2``.

    factor 1 yields the 1x1 identity kernel; factor f yields a 2f-by-2f
    separable triangle filter per channel.
    """
    if factor < 1:
        raise ShapeError(f"make_bilinear_kernel: factor must be >= 1, got {factor}")
    if factor == 1:
        profile = np.ones(1, dtype=np.float64)
    else:
        i = np.arange(2 * factor, dtype=np.float64)
        profile = 1.0 - np.abs(i + 0.5 - factor) / factor
    k2d = np.outer(profile, profile)
    size = k2d.shape[0]
    w = np.zeros((channels, channels, size, size), dtype=dtype)
    for c in range(channels):
        w[c, c] = k2d
    return w


def concat_channels(parts):
    """Stack feature maps along the channel axis in argument order."""
    if not parts:
        raise ShapeError("concat_channels: need at least one tensor")
    first = parts[0]
    for p in parts[1:]:
        if p.shape[0] != first.shape[0] or p.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: batch/spatial mismatch, {first.shape} vs {p.shape}"
            )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=1)


def split_channels(dy, sizes):
    """Inverse of :func:`concat_channels` for gradients."""
    if sum(sizes) != dy.shape[1]:
        raise ShapeError(
            f"split_channels: sizes {sizes} do not sum to {dy.shape[1]} channels"
        )
    out = []
    start = 0
    for s in sizes:
        out.append(dy[:, start:start + s])
        start += s
    return out
