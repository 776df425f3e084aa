"""Dense NCHW tensor kernels.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channel, height, width), C-contiguous.  ``float32`` is the default
compute precision; ``float64`` is accepted everywhere so gradients can be
verified with tight tolerances.

Every function here is pure: it never mutates its inputs and identical
inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple

import numpy as np

from .errors import ArgumentError, ShapeError

DEFAULT_DTYPE = np.float32


def as_tensor(data, dtype=None) -> np.ndarray:
    """Convert ``data`` to a contiguous rank-4 float array."""
    arr = np.ascontiguousarray(data, dtype=dtype or DEFAULT_DTYPE)
    check_tensor(arr)
    return arr


def check_tensor(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} extents must all be >= 1, got {x.shape}")


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass
class ConvParams:
    """Weights and geometry of a 2-D convolution.

    ``weight`` is ordered (out_channels, in_channels, kernel_h, kernel_w).
    Padding is always zero-fill.
    """

    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.stride = _pair(self.stride)
        self.padding = _pair(self.padding)
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be rank 4, got shape {self.weight.shape}")
        if min(self.stride) < 1:
            raise ArgumentError(f"stride must be >= 1, got {self.stride}")
        if min(self.padding) < 0:
            raise ArgumentError(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match {self.weight.shape[0]} out-channels"
            )


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d_output_shape(input_shape, weight_shape, stride=(1, 1), padding=(0, 0)):
    """Output shape of :func:`conv2d`, raising ShapeError when undefined."""
    n, c, h, w = input_shape
    co, ci, kh, kw = weight_shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if c != ci:
        raise ShapeError(f"conv expects {ci} input channels, got {c}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    return (n, co, ho, wo)


def im2col(x: np.ndarray, kh: int, kw: int, stride, padding) -> np.ndarray:
    """Lower ``x`` to patch columns of shape (n, c*kh*kw, ho*wo)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0:
        return x.reshape(n, c, h * w)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    xp = np.ascontiguousarray(xp)
    s = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * sh, s[3] * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def col2im(cols: np.ndarray, input_shape, kh: int, kw: int, stride, padding) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, w = input_shape
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    if kh == 1 and kw == 1 and sh == 1 and sw == 1 and ph == 0 and pw == 0:
        return cols.reshape(n, c, h, w)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols6[:, :, i, j]
    if ph or pw:
        dxp = dxp[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(dxp)


def conv2d(x: np.ndarray, p: ConvParams, cols: Optional[np.ndarray] = None) -> np.ndarray:
    """2-D cross-correlation with zero padding, via im2col + one batched matmul.

    ``cols`` may carry a precomputed :func:`im2col` lowering of ``x``.
    """
    check_tensor(x)
    n, co, ho, wo = conv2d_output_shape(x.shape, p.weight.shape, p.stride, p.padding)
    kh, kw = p.weight.shape[2:]
    if cols is None:
        cols = im2col(x, kh, kw, p.stride, p.padding)
    out = np.matmul(p.weight.reshape(co, -1), cols).reshape(n, co, ho, wo)
    if p.bias is not None:
        out += p.bias.reshape(1, co, 1, 1)
    return out


def batch_norm(x, gamma, beta, mean, var, eps: float = 1e-5) -> np.ndarray:
    """Per-channel affine normalization with fixed statistics."""
    check_tensor(x)
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if np.shape(v) != (c,):
            raise ShapeError(f"batch_norm {name} must have length {c}, got shape {np.shape(v)}")
    if eps < 0:
        raise ArgumentError(f"eps must be non-negative, got {eps}")
    if np.any(np.asarray(var) < 0):
        raise ArgumentError("batch_norm variance must be non-negative")
    scale = np.asarray(gamma, dtype=x.dtype) / np.sqrt(np.asarray(var, dtype=x.dtype) + x.dtype.type(eps))
    shift = np.asarray(beta, dtype=x.dtype) - np.asarray(mean, dtype=x.dtype) * scale
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


@lru_cache(maxsize=256)
def _interp_matrix(src: int, dst: int, dtype_str: str) -> np.ndarray:
    # Half-pixel centers, coordinates clamped to the valid range.
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * (src / dst) - 0.5
    pos = np.clip(pos, 0.0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    m = np.zeros((dst, src), dtype=np.float64)
    rows = np.arange(dst)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    m = m.astype(dtype_str)
    m.setflags(write=False)
    return m


def interp_matrices(in_hw, out_hw, dtype):
    """Row/column interpolation matrices (out_h, in_h) and (out_w, in_w)."""
    dt = np.dtype(dtype).str
    return _interp_matrix(in_hw[0], out_hw[0], dt), _interp_matrix(in_hw[1], out_hw[1], dt)


def resize_bilinear(x: np.ndarray, out_hw) -> np.ndarray:
    """Separable half-pixel bilinear resampling of the two spatial axes."""
    check_tensor(x)
    mh, mw = interp_matrices(x.shape[2:], tuple(out_hw), x.dtype)
    return np.matmul(mh, np.matmul(x, mw.T))


def bilinear_upsample(x: np.ndarray, scale: int) -> np.ndarray:
    """Integer-factor bilinear upsampling with half-pixel centers."""
    if int(scale) != scale or scale < 2:
        raise ArgumentError(f"upsample scale must be an integer >= 2, got {scale}")
    scale = int(scale)
    return resize_bilinear(x, (x.shape[2] * scale, x.shape[3] * scale))


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"cannot add tensors of shapes {a.shape} and {b.shape}")
    return a + b


def argmax_channel(logits: np.ndarray) -> np.ndarray:
    """Per-pixel class index of shape (n, h, w); ties go to the lower index."""
    check_tensor(logits, "logits")
    return np.argmax(logits, axis=1).astype(np.int64)
