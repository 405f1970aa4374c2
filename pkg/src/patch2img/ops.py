"""Forward and backward kernels for the layer set used by the reference networks.

Tensors are plain ``numpy`` arrays laid out as ``[batch, channels, height, width]``.
Every op is a pure function; backward functions return gradients instead of
mutating buffers in place.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMOID_CLAMP = 40.0


class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an op.

    Attributes
    ----------
    dim : str
        Name of the offending dimension (``"N"``, ``"C"``, ``"H"``, ``"W"`` or
        ``"rank"``).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


@dataclass
class LayerParams:
    """Weights of one convolution layer.

    ``kernels`` has shape ``(C_out, C_in, k_h, k_w)``, ``biases`` shape ``(C_out,)``.
    """

    kernels: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ShapeError(f"kernels must be rank 4, got {self.kernels.ndim}", dim="rank")
        if self.biases.shape != (self.kernels.shape[0],):
            raise ShapeError(
                f"expected {self.kernels.shape[0]} biases, got {self.biases.shape}", dim="C"
            )

    @property
    def out_channels(self):
        return self.kernels.shape[0]

    @property
    def in_channels(self):
        return self.kernels.shape[1]

    def astype(self, dtype):
        return LayerParams(self.kernels.astype(dtype), self.biases.astype(dtype))

    def copy(self):
        return LayerParams(self.kernels.copy(), self.biases.copy())


def check_tensor(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 [N,C,H,W], got shape {x.shape}", dim="rank")
    return x


# im2col buffers are built in row bands of about this many bytes so the
# working set stays cache-resident on large images
_BAND_BYTES = 1 << 20


def _band_rows(n, c, kh, kw, h, w, itemsize):
    per_row = max(n * c * kh * kw * w * itemsize, 1)
    return int(min(h, max(1, _BAND_BYTES // per_row)))


def _im2col(xp, kh, kw, r0, r1, w):
    # (N, C*kh*kw, rows*W) for output rows r0:r1 of the padded input xp;
    # window offsets are row-major inside each channel
    n, c = xp.shape[:2]
    rows = r1 - r0
    cols = np.empty((n, c, kh, kw, rows, w), dtype=xp.dtype)
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di, dj] = xp[:, :, r0 + di : r1 + di, dj : dj + w]
    return cols.reshape(n, c * kh * kw, rows * w)


def _im2col_unpadded(x, kh, kw, r0, r1):
    # same as _im2col on the zero-padded input, without materializing the pad
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    rows = r1 - r0
    cols = np.empty((n, c, kh, kw, rows, w), dtype=x.dtype)
    for di in range(kh):
        # output row r reads input row r + di - ph
        lo = min(r1, max(r0, ph - di))
        hi = max(lo, min(r1, h + ph - di))
        for dj in range(kw):
            dst = cols[:, :, di, dj]
            c_lo = min(w, max(0, pw - dj))
            c_hi = max(c_lo, min(w, w + pw - dj))
            dst[:, :, : lo - r0] = 0
            dst[:, :, hi - r0 :] = 0
            dst[:, :, lo - r0 : hi - r0, :c_lo] = 0
            dst[:, :, lo - r0 : hi - r0, c_hi:] = 0
            dst[:, :, lo - r0 : hi - r0, c_lo:c_hi] = x[
                :, :, lo + di - ph : hi + di - ph, c_lo + dj - pw : c_hi + dj - pw
            ]
    return cols.reshape(n, c * kh * kw, rows * w)


def _col2im_add(gp, cols, kh, kw, r0, r1, w):
    n, c = gp.shape[:2]
    cols = cols.reshape(n, c, kh, kw, r1 - r0, w)
    for di in range(kh):
        for dj in range(kw):
            gp[:, :, r0 + di : r1 + di, dj : dj + w] += cols[:, :, di, dj]


def _check_conv(x, params):
    x = check_tensor(x)
    cout, cin, kh, kw = params.kernels.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}", dim="H" if kh % 2 == 0 else "W")
    if x.shape[1] != cin:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernels expect {cin}", dim="C"
        )
    return x


def conv2d_forward(x, params, relu=False):
    """Stride-1 convolution with "same" zero padding.

    ``out[n, k] = b[k] + sum over the window of W[k] * padded input``.
    With ``relu`` the rectifier is applied band by band while the output is
    still in cache.
    """
    x = _check_conv(x, params)
    n, cin, h, w = x.shape
    cout, _, kh, kw = params.kernels.shape
    dtype = np.result_type(x.dtype, params.kernels.dtype)
    x = x.astype(dtype, copy=False)
    wm = params.kernels.reshape(cout, -1).astype(dtype, copy=False)
    bias = params.biases.astype(dtype, copy=False)[None, :, None]
    out = np.empty((n, cout, h, w), dtype=dtype)
    flat = out.reshape(n, cout, h * w)
    if kh == 1 and kw == 1:
        src = x.reshape(n, cin, h * w)
        step = max(1, _BAND_BYTES // max(n * cin * x.itemsize, 1))
        for c0 in range(0, h * w, step):
            band = flat[:, :, c0 : c0 + step]
            np.matmul(wm, src[:, :, c0 : c0 + step], out=band)
            band += bias
            if relu:
                np.maximum(band, 0, out=band)
        return out
    step = _band_rows(n, cin, kh, kw, h, w, x.itemsize)
    for r0 in range(0, h, step):
        r1 = min(h, r0 + step)
        band = flat[:, :, r0 * w : r1 * w]
        np.matmul(wm, _im2col_unpadded(x, kh, kw, r0, r1), out=band)
        band += bias
        if relu:
            np.maximum(band, 0, out=band)
    return out


def conv2d_backward(x, params, grad_out):
    """Adjoints of :func:`conv2d_forward`.

    Returns ``(grad_input, LayerParams(grad_kernels, grad_biases))``.
    """
    x = _check_conv(x, params)
    n, cin, h, w = x.shape
    cout, _, kh, kw = params.kernels.shape
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (n, cout, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != forward output shape {(n, cout, h, w)}",
            dim="C" if grad_out.ndim == 4 and grad_out.shape[1] != cout else "H",
        )
    dtype = np.result_type(x.dtype, params.kernels.dtype, grad_out.dtype)
    x = x.astype(dtype, copy=False)
    grad_out = grad_out.astype(dtype, copy=False)
    wm = params.kernels.reshape(cout, -1).astype(dtype, copy=False)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if kh == 1 and kw == 1:
        g = grad_out.reshape(n, cout, h * w)
        xs = x.reshape(n, cin, h * w)
        grad_w = np.zeros_like(wm)
        for i in range(n):
            grad_w += g[i] @ xs[i].T
        grad_x = np.matmul(wm.T, g).reshape(n, cin, h, w)
        return grad_x, LayerParams(grad_w.reshape(params.kernels.shape), grad_b)
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gp = np.zeros_like(xp)
    grad_w = np.zeros_like(wm)
    step = _band_rows(n, cin, kh, kw, h, w, x.itemsize)
    for r0 in range(0, h, step):
        r1 = min(h, r0 + step)
        cols = _im2col(xp, kh, kw, r0, r1, w)
        g = np.ascontiguousarray(grad_out[:, :, r0:r1]).reshape(n, cout, -1)
        for i in range(n):
            grad_w += g[i] @ cols[i].T
        _col2im_add(gp, np.matmul(wm.T, g), kh, kw, r0, r1, w)
    grad_x = gp[:, :, ph : ph + h, pw : pw + w]
    return grad_x, LayerParams(grad_w.reshape(params.kernels.shape), grad_b)


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient at 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def sigmoid(x):
    z = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def sigmoid_backward(y, grad_out):
    """Gradient through the sigmoid given its *output* ``y``."""
    return grad_out * y * (1 - y)


def maxpool2(x):
    """2x2 max-pooling with stride 2.

    Returns the pooled tensor and the within-window argmax (0..3, row-major),
    which :func:`maxpool2_backward` needs. Ties resolve to the first element
    scanned.
    """
    x = check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"maxpool2 needs even spatial extents, got {h}x{w}; resize the input "
            "to a multiple of 4",
            dim="H" if h % 2 else "W",
        )
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward(idx, grad_out):
    n, c, h2, w2 = grad_out.shape
    win = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, idx[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    win = win.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, 2 * h2, 2 * w2)


def upsample2(x):
    """Copy every value into a 2x2 block."""
    x = check_tensor(x)
    n, c, h, w = x.shape
    out = np.empty((n, c, h, 2, w, 2), dtype=x.dtype)
    out[...] = x[:, :, :, None, :, None]
    return out.reshape(n, c, 2 * h, 2 * w)


def upsample2_backward(grad_out):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a, b):
    a = check_tensor(a, "a")
    b = check_tensor(b, "b")
    for axis, dim in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(
                f"concat operands differ in {dim}: {a.shape[axis]} vs {b.shape[axis]}", dim=dim
            )
    return np.concatenate([a, b], axis=1)


def concat_backward(channels_a, grad_out):
    """Split ``grad_out`` back into the (a, b) channel ranges."""
    return grad_out[:, :channels_a], grad_out[:, channels_a:]
