"""Differentiable operations on :class:`~cfil.tensor.Tensor`.

Layout is row-major with N x C x H x W ordering for image batches. No
general broadcasting: each op documents exactly which shapes it accepts.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import DimensionError, Function, NumericError, Tensor


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


class _Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class _Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class _Scale(Function):
    factor: float

    def forward(self, a):
        return a * a.dtype.type(self.factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class _Affine(Function):
    factor: float
    shift: float

    def forward(self, a):
        return a * a.dtype.type(self.factor) + a.dtype.type(self.shift)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class _Relu(Function):
    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, a.dtype.type(0))

    def backward(self, grad):
        return (np.where(self.mask, grad, grad.dtype.type(0)),)


class _Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class _ClampMin(Function):
    floor: float

    def forward(self, a):
        self.mask = a >= self.floor
        return np.where(self.mask, a, a.dtype.type(self.floor))

    def backward(self, grad):
        return (np.where(self.mask, grad, grad.dtype.type(0)),)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _Add.apply(a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _Sub.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return _Scale.apply(a, factor=float(factor))


def affine(a: Tensor, factor: float, shift: float) -> Tensor:
    """a * factor + shift elementwise."""
    return _Affine.apply(a, factor=float(factor), shift=float(shift))


def relu(a: Tensor) -> Tensor:
    return _Relu.apply(a)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _Log.apply(a)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient passes where a >= floor."""
    return _ClampMin.apply(a, floor=float(floor))


# ---------------------------------------------------------------------------
# shape


class _Reshape(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.new_shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class _Concat(Function):
    def forward(self, *arrays):
        self.sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, cuts, axis=self.axis))


class _Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, grad):
        return (np.ascontiguousarray(grad.T),)


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(d) for d in new_shape)
    if any(d < 1 for d in new_shape):
        raise DimensionError(f"reshape: extents must be >= 1, got {new_shape}")
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise DimensionError(f"reshape: cannot view {t.shape} ({t.size} elements) as {new_shape}")
    return _Reshape.apply(t, new_shape=new_shape)


def flatten(t: Tensor) -> Tensor:
    """Collapse every axis after the first: (N, ...) -> (N, prod(...))."""
    return reshape(t, (t.shape[0], t.size // t.shape[0]))


def concat(ts: Sequence[Tensor], axis: int) -> Tensor:
    if not ts:
        raise DimensionError("concat: empty tensor list")
    ref = ts[0].shape
    axis = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise DimensionError(f"concat along axis {axis}: shapes {[t.shape for t in ts]} disagree")
    return _Concat.apply(*ts, axis=axis)


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {t.shape}")
    return _Transpose.apply(t)


# ---------------------------------------------------------------------------
# linear algebra and reductions


class _MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ self.b.T if self.needs[0] else None
        gb = self.a.T @ grad if self.needs[1] else None
        return ga, gb


class _AddRow(Function):
    def forward(self, x, b):
        return x + b

    def backward(self, grad):
        return grad, grad.sum(axis=0)


class _Sum(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.full(self.in_shape, grad, dtype=grad.dtype),)


class _Mean(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        count = int(np.prod(self.in_shape))
        return (np.full(self.in_shape, grad / grad.dtype.type(count), dtype=grad.dtype),)


class _SelectCols(Function):
    def forward(self, a):
        self.in_shape = a.shape
        return a[np.arange(a.shape[0]), self.index]

    def backward(self, grad):
        out = np.zeros(self.in_shape, dtype=grad.dtype)
        out[np.arange(self.in_shape[0]), self.index] = grad
        return (out,)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _MatMul.apply(a, b)


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-D vector to every row of an N x D matrix."""
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_row: cannot add {b.shape} to rows of {x.shape}")
    return _AddRow.apply(x, b)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias, with weight stored in_features x out_features."""
    return add_row(matmul(x, weight), bias)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _Sum.apply(a)


def mean(a: Tensor) -> Tensor:
    return _Mean.apply(a)


def select_cols(a: Tensor, index) -> Tensor:
    """Pick ``a[i, index[i]]`` for every row i."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"select_cols: index of shape {index.shape} for matrix {a.shape}")
    if np.any(index < 0) or np.any(index >= a.shape[1]):
        raise DimensionError(f"select_cols: index out of range for {a.shape[1]} columns")
    return _SelectCols.apply(a, index=index)


# ---------------------------------------------------------------------------
# softmax


def softmax_rows_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class _SoftmaxRows(Function):
    def forward(self, a):
        self.out = softmax_rows_array(a)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


def softmax_rows(logits: Tensor) -> Tensor:
    """Row-wise softmax of a matrix, stabilised by per-row max subtraction."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("softmax_rows: non-finite logits")
    return _SoftmaxRows.apply(logits)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(x: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = x.shape[:2]
    cols = np.empty((n, c, k, k, out_h, out_w), dtype=x.dtype)
    for dy in range(k):
        y_end = dy + stride * out_h
        for dx in range(k):
            x_end = dx + stride * out_w
            cols[:, :, dy, dx] = x[:, :, dy:y_end:stride, dx:x_end:stride]
    # rows: (n, oh, ow); columns: (c, dy, dx)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, c * k * k)


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = padded_shape[:2]
    cols = cols.reshape(n, out_h, out_w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros(padded_shape, dtype=cols.dtype)
    for dy in range(k):
        y_end = dy + stride * out_h
        for dx in range(k):
            x_end = dx + stride * out_w
            img[:, :, dy:y_end:stride, dx:x_end:stride] += cols[:, :, dy, dx]
    return img


class _Conv2d(Function):
    stride: int
    padding: int

    def forward(self, x, w, b):
        n, c, h, wd = x.shape
        kout, _, k, _ = w.shape
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self.padded_shape = x.shape
        self.k = k
        self.out_h = (h + 2 * p - k) // s + 1
        self.out_w = (wd + 2 * p - k) // s + 1
        self.cols = _im2col(x, k, s, self.out_h, self.out_w)
        self.w2 = w.reshape(kout, -1)
        out = self.cols @ self.w2.T + b
        return out.reshape(n, self.out_h, self.out_w, kout).transpose(0, 3, 1, 2)

    def backward(self, grad):
        n, kout = grad.shape[:2]
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, kout)
        gx = gw = gb = None
        if self.needs[0]:
            gcols = g2 @ self.w2
            padded = _col2im(gcols, self.padded_shape, self.k, self.stride, self.out_h, self.out_w)
            p = self.padding
            gx = padded[:, :, p : padded.shape[2] - p, p : padded.shape[3] - p] if p else padded
            gx = np.ascontiguousarray(gx)
        if self.needs[1]:
            gw = (g2.T @ self.cols).reshape(self.inputs[1].shape)
        if self.needs[2]:
            gb = g2.sum(axis=0)
        return gx, gw, gb


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Shapes: x (N, C, H, W), kernel (K, C, k, k), bias (K,) -> (N, K, H', W')
    with H' = (H + 2*padding - k) // stride + 1.
    """
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} / kernel {kernel.shape} are not N-C-H-W / K-C-k-k")
    if kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} expects {kernel.shape[1]} channels, input {x.shape} has {x.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride {stride} / padding {padding} invalid")
    k = kernel.shape[2]
    if k > x.shape[2] + 2 * padding or k > x.shape[3] + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k}x{k} larger than padded input {x.shape[2:]} (padding {padding})")
    return _Conv2d.apply(x, kernel, bias, stride=int(stride), padding=int(padding))


class _MaxPool2d(Function):
    window: int
    stride: int

    def forward(self, x):
        n, c, h, w = x.shape
        k, s = self.window, self.stride
        oh, ow = (h - k) // s + 1, (w - k) // s + 1
        self.in_shape = x.shape
        self.oh, self.ow = oh, ow
        cols = np.empty((n, c, oh, ow, k * k), dtype=x.dtype)
        for dy in range(k):
            for dx in range(k):
                cols[..., dy * k + dx] = x[:, :, dy : dy + s * oh : s, dx : dx + s * ow : s]
        # argmax returns the first maximal element in scan order
        self.arg = cols.argmax(axis=-1)
        return np.take_along_axis(cols, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        k, s = self.window, self.stride
        gx = np.zeros(self.in_shape, dtype=grad.dtype)
        oh, ow = self.oh, self.ow
        for dy in range(k):
            for dx in range(k):
                routed = np.where(self.arg == dy * k + dx, grad, 0)
                gx[:, :, dy : dy + s * oh : s, dx : dx + s * ow : s] += routed
        return (gx,)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects N-C-H-W input, got {x.shape}")
    if window < 1 or stride < 1:
        raise DimensionError(f"maxpool2d: window {window} / stride {stride} must be >= 1")
    if window > x.shape[2] or window > x.shape[3]:
        raise DimensionError(f"maxpool2d: window {window} exceeds spatial extent {x.shape[2:]}")
    return _MaxPool2d.apply(x, window=int(window), stride=int(stride))


class _GlobalAvgPool(Function):
    def forward(self, x):
        self.in_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        n, c, h, w = self.in_shape
        g = np.broadcast_to((grad / (h * w))[:, :, None, None], self.in_shape)
        return (np.ascontiguousarray(g),)


class _GlobalMaxPool(Function):
    def forward(self, x):
        n, c, h, w = x.shape
        self.in_shape = x.shape
        flat = x.reshape(n, c, h * w)
        self.arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        n, c, h, w = self.in_shape
        g = np.zeros((n, c, h * w), dtype=grad.dtype)
        np.put_along_axis(g, self.arg[..., None], grad[..., None], axis=-1)
        return (g.reshape(self.in_shape),)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N-C-H-W input, got {x.shape}")
    return _GlobalAvgPool.apply(x)


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_max_pool expects N-C-H-W input, got {x.shape}")
    return _GlobalMaxPool.apply(x)
