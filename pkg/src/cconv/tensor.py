"""Dense numeric kernels.

Tensors are plain ``numpy.ndarray`` values tagged float32 (default) or
float64 (verification mode). Every kernel here validates shapes, keeps the
input dtype, and refuses to hand back non-finite values.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

MAGIC = b"CCT1"
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def tensor(data, dtype=np.float32) -> np.ndarray:
    """Build a contiguous tensor of rank 1-4 with a supported dtype."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.dtype not in _DTYPE_TAGS:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1-4, got shape {arr.shape}")
    return arr


def check_finite(out: np.ndarray, kernel: str) -> np.ndarray:
    if not np.isfinite(out).all():
        bad = int(np.size(out) - np.count_nonzero(np.isfinite(out)))
        raise NonFiniteError(f"{kernel}: {bad} non-finite value(s) in output of shape {out.shape}")
    return out


@dataclass(frozen=True)
class ConvWeights:
    """Filter bank of shape [C_out, C_in, k, k] plus stride/zero-padding."""

    weight: np.ndarray
    stride: int = 1
    padding: int = 0
    _shape: tuple = field(init=False, repr=False)

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] < 1:
            raise ShapeError(f"conv weights must be [C_out, C_in, k, k], got {w.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")
        view = w.view()
        view.flags.writeable = False
        object.__setattr__(self, "weight", view)
        object.__setattr__(self, "_shape", tuple(w.shape))

    @property
    def shape(self):
        return self._shape

    @property
    def k(self) -> int:
        return self._shape[2]


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    """Columns laid out [C*k*k, N*H'*W'] (channel-major) so the copy is k*k slab moves."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo), ho, wo


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = x_shape
    d = dcols.reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j]
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3))


def _check_conv(x: np.ndarray, w: ConvWeights):
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [N, C, H, W], got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weights {w.shape}")
    if min(x.shape[2], x.shape[3]) + 2 * w.padding < w.k:
        raise ShapeError(f"conv2d kernel larger than padded input: input {x.shape} vs weights {w.shape}")


def conv2d(x: np.ndarray, w: ConvWeights, bias: np.ndarray | None = None, return_cols: bool = False):
    """Cross-correlation of ``x`` [N,C_in,H,W] with ``w`` (no kernel flip).

    With ``return_cols`` also returns the im2col matrix for reuse in the backward pass.
    """
    _check_conv(x, w)
    c_out = w.shape[0]
    cols, ho, wo = _im2col(x, w.k, w.stride, w.padding)
    out = _acc_matmul(w.weight.reshape(c_out, -1), cols)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d bias shape {bias.shape} vs weights {w.shape}")
        out += bias[:, None]
    out = out.reshape(c_out, x.shape[0], ho, wo).transpose(1, 0, 2, 3)
    out = check_finite(np.ascontiguousarray(out), "conv2d")
    return (out, cols) if return_cols else out


def conv2d_backward(grad: np.ndarray, x, w: ConvWeights, cols: np.ndarray | None = None,
                    need_dx: bool = True, need_dw: bool = True):
    """Return (dx, dweight, dbias) for ``conv2d`` given upstream ``grad``.

    ``x`` may be the input array or just its shape when ``cols`` is supplied;
    skipped gradients come back as None.
    """
    x_shape = x if isinstance(x, tuple) else x.shape
    c_out = w.shape[0]
    n, ho, wo = grad.shape[0], grad.shape[2], grad.shape[3]
    g = grad.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dw = dx = None
    if need_dw:
        if cols is None:
            cols, _, _ = _im2col(x, w.k, w.stride, w.padding)
        dw = _acc_matmul(g, cols.T).reshape(w.shape)
    if need_dx and w.stride == 1 and w.padding < w.k:
        # stride 1: input gradient is a full convolution with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(w.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = conv2d(np.ascontiguousarray(grad), ConvWeights(flipped, 1, w.k - 1 - w.padding))
    elif need_dx:
        dcols = _acc_matmul(w.weight.reshape(c_out, -1).T, g)
        dx = _col2im(dcols, x_shape, w.k, w.stride, w.padding, ho, wo)
    db = g.sum(axis=1, dtype=np.float64).astype(grad.dtype)
    return dx, dw, db


def _acc_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # single precision goes straight to sgemm; see README note on accumulation
    return a @ b


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(_acc_matmul(a, b), "matmul")


def avg_pool2(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2 needs [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    out = (x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2]) + (x[:, :, 0::2, 1::2] + x[:, :, 1::2, 1::2])
    out *= x.dtype.type(0.25)
    return check_finite(out, "avg_pool2")


def avg_pool2_backward(grad: np.ndarray) -> np.ndarray:
    return upsample_nearest2(grad * grad.dtype.type(0.25))


def upsample_nearest2(x: np.ndarray) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest2 needs [N, C, H, W], got {x.shape}")
    return np.ascontiguousarray(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def upsample_nearest2_backward(grad: np.ndarray) -> np.ndarray:
    return (grad[:, :, 0::2, 0::2] + grad[:, :, 1::2, 0::2]) + (grad[:, :, 0::2, 1::2] + grad[:, :, 1::2, 1::2])


def batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population std over the N, H, W axes."""
    if x.ndim != 4:
        raise ShapeError(f"batch_moments needs [N, C, H, W], got {x.shape}")
    n, _, h, w = x.shape
    if n * h * w < 2:
        raise ShapeError(f"batch_moments needs >= 2 elements per channel, got {x.shape}")
    mu, var = batch_mean_var(x)
    return mu.astype(x.dtype), np.sqrt(var).astype(x.dtype)


def batch_mean_var(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance as float64 (two-pass)."""
    mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
    xc = x - mu.astype(x.dtype)[None, :, None, None]
    var = np.einsum("nchw,nchw->c", xc, xc, dtype=np.float64) / (x.shape[0] * x.shape[2] * x.shape[3])
    return mu, var


# -- serialization -----------------------------------------------------------

def write_tensor(fh: BinaryIO, t: np.ndarray) -> None:
    t = np.asarray(t)
    if t.dtype not in _DTYPE_TAGS:
        raise TypeError(f"cannot serialize dtype {t.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<B", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fh.write(struct.pack("<B", _DTYPE_TAGS[t.dtype]))
    fh.write(np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    if fh.read(4) != MAGIC:
        raise ValueError("bad tensor magic")
    (rank,) = struct.unpack("<B", fh.read(1))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    (tag,) = struct.unpack("<B", fh.read(1))
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(dims)) if dims else 1
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(raw, dtype=dt).astype(_TAG_DTYPES[tag]).reshape(dims)


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
