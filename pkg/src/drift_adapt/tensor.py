"""Dense NCHW tensor kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and rank 4
(batch, channel, height, width), row-major.  Reductions and convolution
sums accumulate in float64 and are cast back to float32 on return.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DTYPE = np.float32

TENSOR_MAGIC = b"DTNS"
TENSOR_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sB4I")


class ShapeError(ValueError):
    pass


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a contiguous float32 rank-4 array, validating shape."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (n, c, h, w), got shape {arr.shape}")
    return arr


def zeros(shape) -> np.ndarray:
    return np.zeros(tuple(shape), dtype=DTYPE)


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int, dilation: int = 1) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """Unfold a padded input into ``(n, c*kh*kw, oh*ow)`` patch columns."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            cols[:, :, i, j] = xp[:, :, hi:hi + stride * (oh - 1) + 1:stride,
                                  wj:wj + stride * (ow - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def col2im(cols: np.ndarray, padded_shape, kh: int, kw: int, stride: int, dilation: int,
           oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the padded grid."""
    n, c = padded_shape[:2]
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        hi = i * dilation
        for j in range(kw):
            wj = j * dilation
            xp[:, :, hi:hi + stride * (oh - 1) + 1:stride,
               wj:wj + stride * (ow - 1) + 1:stride] += cols[:, :, i, j]
    return xp


def conv2d_f64(x: np.ndarray, weight: np.ndarray, bias, stride: int = 1, pad: int = 0,
               dilation: int = 1, return_cols: bool = False):
    """Cross-correlation computed entirely in float64.

    Each image runs its own GEMM, so results do not depend on batch size.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ShapeError(f"conv2d channel mismatch: input shape {x.shape} vs weight shape {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel must be odd-sized, got weight shape {weight.shape}")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride}, pad={pad}, dilation={dilation}")
    oh = conv_output_size(h, kh, stride, pad, dilation)
    ow = conv_output_size(w, kw, stride, pad, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and weight {weight.shape}")
    x64 = np.asarray(x, dtype=np.float64)
    if pad:
        x64 = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = im2col(x64, kh, kw, stride, dilation, oh, ow)
    w2 = np.asarray(weight, dtype=np.float64).reshape(out_c, -1)
    out = np.matmul(w2, cols).reshape(n, out_c, oh, ow)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        if b.shape != (out_c,):
            raise ShapeError(f"conv2d bias shape {b.shape} does not match out channels {out_c}")
        out += b[None, :, None, None]
    if return_cols:
        return out, cols
    return out


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0, dilation: int = 1) -> np.ndarray:
    """2-D cross-correlation, NCHW input and OIHW weight."""
    x = as_tensor(x, "input")
    return conv2d_f64(x, np.asarray(weight), bias, stride, pad, dilation).astype(DTYPE)


# ---------------------------------------------------------------------------
# statistics


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over (n, h, w), in float64."""
    if x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ShapeError(f"cannot compute statistics of empty channels, shape {x.shape}")
    x64 = np.asarray(x, dtype=np.float64)
    mean = x64.mean(axis=(0, 2, 3))
    var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batch_stats(x, channel: int) -> tuple[float, float]:
    """Mean and population variance of one channel over all n*h*w elements."""
    x = as_tensor(x)
    if not 0 <= channel < x.shape[1]:
        raise IndexError(f"channel {channel} out of range for shape {x.shape}")
    mean, var = channel_stats(x[:, channel:channel + 1])
    return float(mean[0]), float(var[0])


# ---------------------------------------------------------------------------
# resampling and activations


def bilinear_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Interpolation matrix of shape (out_size, in_size), align_corners=False."""
    if in_size < 1 or out_size < 1:
        raise ValueError(f"bilinear sizes must be positive, got {in_size} -> {out_size}")
    scale = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    m = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_upsample_f64(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ah = bilinear_matrix(x.shape[2], out_h)
    aw = bilinear_matrix(x.shape[3], out_w)
    return np.einsum("oh,nchw,pw->ncop", ah, np.asarray(x, dtype=np.float64), aw, optimize=True)


def bilinear_upsample(x, out_h: int, out_w: int) -> np.ndarray:
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"cannot resample empty spatial dims {x.shape}")
    if (out_h, out_w) == x.shape[2:]:
        return x.copy()
    return bilinear_upsample_f64(x, out_h, out_w).astype(DTYPE)


def softmax_f64(x: np.ndarray, axis: int = 1) -> np.ndarray:
    x64 = np.asarray(x, dtype=np.float64)
    z = np.exp(x64 - x64.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax_channels(x) -> np.ndarray:
    """Softmax across the channel axis with max-subtraction."""
    x = as_tensor(x)
    if x.shape[1] < 1:
        raise ShapeError("softmax needs at least one channel")
    return softmax_f64(x, axis=1).astype(DTYPE)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0).astype(DTYPE, copy=False)


# ---------------------------------------------------------------------------
# raw tensor files


def write_tensor(x, path) -> None:
    x = as_tensor(x)
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, *x.shape)
    Path(path).write_bytes(header + x.astype("<f4").tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _TENSOR_HEADER.size:
        raise ValueError(f"{path}: truncated header, expected {_TENSOR_HEADER.size} bytes, got {len(raw)}")
    magic, version, *dims = _TENSOR_HEADER.unpack_from(raw)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r} at offset 0")
    if version != TENSOR_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at offset 4")
    count = int(np.prod(dims))
    expected = _TENSOR_HEADER.size + 4 * count
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for shape {tuple(dims)}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_TENSOR_HEADER.size, count=count)
    return data.astype(DTYPE).reshape(dims)
