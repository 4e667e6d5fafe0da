"""Dense tensor ops for small CNNs: forward and backward passes.

Activations and weights are rank-4 float arrays in (samples, channels,
rows, cols) layout. Convolutions gather input patches into a matrix
product (one chunk of samples at a time) and accumulate in float64 before
casting back to the working dtype; a naive nested-loop convolution lives
in the test suite as the permanent oracle for this path.

All functions are pure: they never modify their inputs, and identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

# Cap on float64 patch-buffer elements per im2col chunk.
_CHUNK_ELEMS = 1 << 24


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Validate and return a rank-4 activation tensor (N, C, H, W)."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all tensor extents must be >= 1, got {arr.shape}")
    return arr


def _check_rank4(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"expected rank-4 tensor with positive extents, got {x.shape}")
    return x


@dataclass
class ConvKernel:
    """Filter bank of a convolution layer.

    weights: (out_filters, in_channels, K, K), square spatial kernel
    bias:    (out_filters,)
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be rank-4, got {self.weights.shape}")
        if self.weights.shape[2] != self.weights.shape[3]:
            raise ShapeError(
                f"kernel must be spatially square, got {self.weights.shape[2]}x{self.weights.shape[3]}"
            )
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match {self.weights.shape[0]} filters"
            )
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.pad < 0:
            raise ShapeError(f"pad must be >= 0, got {self.pad}")

    @property
    def out_filters(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def ksize(self) -> int:
        return self.weights.shape[2]


def conv_output_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    """Output extents of an exact-fit convolution; errors if not integral."""
    span_h = h + 2 * pad - k
    span_w = w + 2 * pad - k
    if span_h < 0 or span_w < 0:
        raise ShapeError(f"kernel {k} too large for padded input {h + 2 * pad}x{w + 2 * pad}")
    if span_h % stride or span_w % stride:
        raise ShapeError(
            f"non-integral conv output: input {h}x{w}, k={k}, stride={stride}, pad={pad}"
        )
    return span_h // stride + 1, span_w // stride + 1


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Gather all K x K patches into rows: (N*H_out*W_out, C*K*K)."""
    n, c, h, w = x.shape
    h_out, w_out = conv_output_hw(h, w, k, stride, pad)
    xp = _pad_hw(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, c * k * k)
    return cols, h_out, w_out


def _sample_chunks(n: int, per_sample: int):
    step = max(1, _CHUNK_ELEMS // max(1, per_sample))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def conv2d_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Cross-correlate x (N, C, H, W) with the filter bank, adding bias."""
    x = _check_rank4(x)
    n, c, h, w = x.shape
    if c != kernel.in_channels:
        raise ShapeError(
            f"input has {c} channels but kernel expects {kernel.in_channels} "
            f"(input {x.shape}, weights {kernel.weights.shape})"
        )
    k = kernel.ksize
    h_out, w_out = conv_output_hw(h, w, k, kernel.stride, kernel.pad)
    d = kernel.out_filters
    out_dtype = np.result_type(x.dtype, kernel.weights.dtype)

    wmat = kernel.weights.reshape(d, c * k * k).astype(np.float64)
    bias = kernel.bias.astype(np.float64)
    out = np.empty((n, d, h_out, w_out), dtype=out_dtype)
    per_sample = h_out * w_out * c * k * k
    for lo, hi in _sample_chunks(n, per_sample):
        cols, _, _ = _im2col(x[lo:hi], k, kernel.stride, kernel.pad)
        prod = cols.astype(np.float64) @ wmat.T + bias
        out[lo:hi] = prod.reshape(hi - lo, h_out, w_out, d).transpose(0, 3, 1, 2)
    return out


def conv2d_backward(
    x: np.ndarray, kernel: ConvKernel, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweights, dbias) of a scalar loss through conv2d."""
    x = _check_rank4(x)
    n, c, h, w = x.shape
    k = kernel.ksize
    stride, pad = kernel.stride, kernel.pad
    h_out, w_out = conv_output_hw(h, w, k, stride, pad)
    d = kernel.out_filters
    if dout.shape != (n, d, h_out, w_out):
        raise ShapeError(
            f"upstream gradient {dout.shape} does not match conv output {(n, d, h_out, w_out)}"
        )
    wmat = kernel.weights.reshape(d, c * k * k).astype(np.float64)
    dw = np.zeros((d, c * k * k), dtype=np.float64)
    db = np.zeros(d, dtype=np.float64)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)

    per_sample = h_out * w_out * c * k * k
    for lo, hi in _sample_chunks(n, per_sample):
        cols, _, _ = _im2col(x[lo:hi], k, stride, pad)
        dm = dout[lo:hi].transpose(0, 2, 3, 1).reshape(-1, d).astype(np.float64)
        dw += dm.T @ cols.astype(np.float64)
        db += dm.sum(axis=0)
        dcols = dm @ wmat
        dcols = dcols.reshape(hi - lo, h_out, w_out, c, k, k).transpose(0, 3, 4, 5, 1, 2)
        for i in range(k):
            for j in range(k):
                dxp[lo:hi, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += dcols[
                    :, :, i, j
                ]
    if pad:
        dxp = dxp[:, :, pad : pad + h, pad : pad + w]
    out_dtype = np.result_type(x.dtype, kernel.weights.dtype)
    return (
        dxp.astype(out_dtype),
        dw.reshape(kernel.weights.shape).astype(out_dtype),
        db.astype(out_dtype),
    )


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    if np.shape(x) != np.shape(dout):
        raise ShapeError(f"upstream gradient {np.shape(dout)} does not match input {np.shape(x)}")
    return np.where(np.asarray(x) > 0, dout, 0).astype(dout.dtype)


def maxpool_forward(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Per-window maximum; output extents floor((H - window)/stride) + 1."""
    x = _check_rank4(x)
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be >= 1, got {window}, {stride}")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} larger than spatial extent {h}x{w}")
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return win.max(axis=(4, 5))


def maxpool_backward(x: np.ndarray, window: int, stride: int, dout: np.ndarray) -> np.ndarray:
    """Route gradients to the first maximum of each window."""
    x = _check_rank4(x)
    n, c, h, w = x.shape
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    h_out, w_out = win.shape[2], win.shape[3]
    if dout.shape != (n, c, h_out, w_out):
        raise ShapeError(
            f"upstream gradient {dout.shape} does not match pool output {(n, c, h_out, w_out)}"
        )
    flat = win.reshape(n, c, h_out, w_out, window * window)
    amax = flat.argmax(axis=4)
    rows = (np.arange(h_out) * stride)[None, None, :, None] + amax // window
    cols = (np.arange(w_out) * stride)[None, None, None, :] + amax % window
    dx = np.zeros_like(x, dtype=np.float64)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, rows, cols), dout)
    return dx.astype(dout.dtype)


def gap_forward(x: np.ndarray) -> np.ndarray:
    """Global average pooling: spatial mean per channel, shape (N, C, 1, 1)."""
    x = _check_rank4(x)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.dtype)


def gap_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    if dout.shape != (n, c, 1, 1):
        raise ShapeError(f"upstream gradient {dout.shape} does not match gap output {(n, c, 1, 1)}")
    return np.broadcast_to(dout / (h * w), x.shape).astype(dout.dtype)


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map per sample; weights (in_features, out_features)."""
    x = _check_rank4(x)
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"flattened input length {flat.shape[1]} does not match weight rows {weights.shape[0]}"
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[1]} outputs")
    out = flat.astype(np.float64) @ weights.astype(np.float64) + bias.astype(np.float64)
    out_dtype = np.result_type(x.dtype, weights.dtype)
    return out.astype(out_dtype).reshape(n, weights.shape[1], 1, 1)


def fc_backward(
    x: np.ndarray, weights: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = x.shape[0]
    flat = x.reshape(n, -1).astype(np.float64)
    dm = dout.reshape(n, -1).astype(np.float64)
    if dm.shape[1] != weights.shape[1]:
        raise ShapeError(f"upstream gradient {dout.shape} does not match {weights.shape[1]} outputs")
    dw = flat.T @ dm
    db = dm.sum(axis=0)
    dx = (dm @ weights.astype(np.float64).T).reshape(x.shape)
    out_dtype = np.result_type(x.dtype, weights.dtype)
    return dx.astype(out_dtype), dw.astype(out_dtype), db.astype(out_dtype)


def bn_affine_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Per-channel affine (inference-time batch norm): x * scale + shift."""
    x = _check_rank4(x)
    if scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(
            f"scale/shift of shapes {scale.shape}/{shift.shape} do not match {x.shape[1]} channels"
        )
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def bn_affine_backward(
    x: np.ndarray, scale: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if dout.shape != x.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match input {x.shape}")
    dx = dout * scale[None, :, None, None]
    dscale = np.einsum("nchw,nchw->c", dout.astype(np.float64), x.astype(np.float64))
    dshift = dout.sum(axis=(0, 2, 3), dtype=np.float64)
    return dx, dscale.astype(dout.dtype), dshift.astype(dout.dtype)


def softmax_forward(x: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis, numerically stabilized."""
    x = _check_rank4(x)
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(y: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Backward through softmax given its output y."""
    if dout.shape != y.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match output {y.shape}")
    inner = (dout * y).sum(axis=1, keepdims=True)
    return y * (dout - inner)


def add_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two equal-shape tensors (residual junction)."""
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"add junction inputs differ: {np.shape(a)} vs {np.shape(b)}")
    return np.asarray(a) + np.asarray(b)
