"""Dense numerical kernels on plain numpy arrays.

Arrays are the tensor carrier throughout the package: row-major (C order),
float64 by default, float32 available as an opt-in for training speed.
Everything here is a pure function; the autodiff layer in
:mod:`trajattn.tensor.autodiff` wraps these same kernels with recorded
gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "as_tensor",
    "softmax_rows",
    "matmul",
    "layer_norm",
    "gelu",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float array (float64 unless given)."""
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in (np.float64, np.float32):
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


def softmax_rows(x, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``x * scale`` along the last axis.

    The row maximum is subtracted before exponentiation, so each output row
    sums to 1 and entries lie in [0, 1] for any finite input. Rows containing
    non-finite values (including -inf "masks") are rejected: no kernel in
    this package needs masking.
    """
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("empty softmax axis")
    if scale <= 0:
        raise ValueError(f"softmax scale must be positive, got {scale}")
    if not np.isfinite(x).all():
        raise ValueError("softmax input must be finite (masking unsupported)")
    z = x * scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def matmul(a, b) -> np.ndarray:
    """Matrix product with broadcasting over leading batch dimensions."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return np.matmul(a, b)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Normalize each row of ``x`` (last axis) to zero mean / unit variance.

    ``gain`` and ``bias`` have the width of the last axis. A constant row has
    zero variance and maps to ``bias`` (the eps keeps it finite).
    """
    x = np.asarray(x)
    gain = np.asarray(gain)
    bias = np.asarray(bias)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ValueError(
            f"layer_norm width mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


def gelu(x) -> np.ndarray:
    """Exact (erf-based) GELU."""
    x = np.asarray(x)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_derivative(x) -> np.ndarray:
    x = np.asarray(x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)
