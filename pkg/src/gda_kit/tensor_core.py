"""
Dense numeric kernels shared by every other module.

Tensors are plain C-contiguous numpy arrays of float32 or float64. Every
kernel returns a fresh array and never mutates its inputs. Kernels accept
leading batch axes; the rank-2 case is the single-sequence form.
"""
import math
import os
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .exceptions import ConfigurationError, DimensionError, NonFiniteError, TensorError

Tensor = npt.NDArray[np.floating]

DEFAULT_EPS = 1e-6

DEBUG = os.getenv("GDA_DEBUG", "0") == "1"


class Precision(str, Enum):
    """Floating point width, uniform per tensor."""
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.F32 else np.float64)

    @property
    def tag(self) -> int:
        """Byte width, used as the on-disk precision tag."""
        return self.dtype.itemsize

    @classmethod
    def of(cls, array: np.ndarray) -> "Precision":
        if array.dtype == np.float32:
            return cls.F32
        if array.dtype == np.float64:
            return cls.F64
        raise TensorError(f"Unsupported dtype {array.dtype}; expected float32 or float64")


def as_tensor(data: Union[Sequence, np.ndarray], precision: Union[Precision, str, None] = None) -> Tensor:
    """
    Build a tensor, enforcing rank >= 1 and extents >= 1.

    Args:
        data: Nested sequence or array
        precision: Target precision; defaults to the input's float width (f64 otherwise)

    Returns:
        Contiguous float array
    """
    if precision is None:
        arr = np.asarray(data)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    else:
        dtype = Precision(precision).dtype
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.ndim < 1:
        raise TensorError("Tensors must have rank >= 1")
    if any(extent < 1 for extent in arr.shape):
        raise DimensionError("All extents must be >= 1", [arr.shape])
    return arr


def check_finite(x: np.ndarray, stage: str) -> None:
    """Raise NonFiniteError naming the stage if x holds NaN or Inf."""
    bad = ~np.isfinite(x)
    if bad.any():
        raise NonFiniteError(stage, int(bad.sum()))


def debug_check(x: np.ndarray, stage: str) -> None:
    if DEBUG:
        check_finite(x, stage)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes, with leading axes broadcast.

    Raises:
        DimensionError: inner extents differ or an operand has rank < 2
        TensorError: operands differ in precision
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs rank >= 2 operands", [a.shape, b.shape])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul inner dimensions differ", [a.shape, b.shape])
    if a.dtype != b.dtype:
        raise TensorError(f"matmul precision mismatch: {a.dtype} vs {b.dtype}")
    return np.matmul(a, b)


def causal_mask(n: int) -> npt.NDArray[np.bool_]:
    """True where key position j is visible from query position i (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


def softmax_rows(scores: Tensor, causal: bool = False) -> Tensor:
    """
    Row-wise softmax over the last axis with per-row max subtraction.

    Masked positions (j > i) are set to -inf before exponentiation, so they
    come out as exact zeros.
    """
    if causal:
        m, n = scores.shape[-2], scores.shape[-1]
        if m != n:
            raise DimensionError("causal softmax needs square score maps", [scores.shape])
        scores = np.where(causal_mask(n), scores, -np.inf)
    row_max = scores.max(axis=-1, keepdims=True)
    if not np.isfinite(row_max).all():
        raise NonFiniteError("softmax_rows: fully masked or non-finite row")
    e = np.exp(scores - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(grad_probs: Tensor, probs: Tensor) -> Tensor:
    """Vector-Jacobian product of softmax_rows; masked entries stay zero."""
    inner = (grad_probs * probs).sum(axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def _rms_inverse(x: Tensor, eps: float) -> Tensor:
    return 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)


def rms_norm(x: Tensor, gain: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gain over the last axis; no centering."""
    if eps < 0:
        raise TensorError(f"rms_norm eps must be non-negative, got {eps}")
    if gain.shape[-1] != x.shape[-1]:
        raise DimensionError("rms_norm gain width differs from input", [x.shape, gain.shape])
    return x * _rms_inverse(x, eps) * gain


def rms_norm_backward(
    grad_out: Tensor, x: Tensor, gain: Tensor, eps: float = DEFAULT_EPS
) -> Tuple[Tensor, Tensor]:
    """
    Gradients of rms_norm w.r.t. x and gain.

    The gain gradient keeps the broadcast shape of gain; callers reduce over
    the axes that gain was broadcast along.
    """
    r = _rms_inverse(x, eps)
    normed = x * r
    grad_gain = grad_out * normed
    gz = grad_out * gain
    grad_x = r * gz - x * (r ** 3) * np.mean(gz * x, axis=-1, keepdims=True)
    return grad_x, grad_gain


def _rope_angles(positions: np.ndarray, d_head: int, theta: float) -> np.ndarray:
    k = np.arange(d_head // 2, dtype=np.float64)
    inv_freq = theta ** (-2.0 * k / d_head)
    return np.outer(np.asarray(positions, dtype=np.float64), inv_freq)


def apply_rope(
    x: Tensor,
    positions: Optional[Sequence[int]] = None,
    theta: float = 10000.0,
    inverse: bool = False,
) -> Tensor:
    """
    Rotate interleaved pairs (x[2k], x[2k+1]) at position p by p * theta^(-2k/d).

    Args:
        x: Tensor of shape (..., N, d_head)
        positions: One position per row; defaults to 0..N-1
        theta: RoPE base
        inverse: Rotate by the negative angle (the transpose, used in backward)
    """
    n, d_head = x.shape[-2], x.shape[-1]
    if d_head % 2:
        raise ConfigurationError(f"RoPE needs an even head width, got {d_head}", key="d_head")
    if positions is None:
        positions = np.arange(n)
    if len(positions) != n:
        raise DimensionError("one position per row is required", [x.shape, (len(positions),)])
    angles = _rope_angles(np.asarray(positions), d_head, theta)
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    if inverse:
        sin = -sin
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def silu(x: Tensor) -> Tensor:
    return x / (1.0 + np.exp(-x))


def silu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x))
    return grad_out * sig * (1.0 + x * (1.0 - sig))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def truncated_normal(
    rng: np.random.Generator, shape: Tuple[int, ...], std: float, dtype: np.dtype, bound: float = 3.0
) -> Tensor:
    """Normal(0, std^2) samples redrawn until every entry lies within +-bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out.astype(dtype)


def rope_pair_norms(x: Tensor) -> Tensor:
    """Euclidean norm of every (2k, 2k+1) pair."""
    return np.hypot(x[..., 0::2], x[..., 1::2])


def global_norm(arrays) -> float:
    """sqrt of the summed squares of every array, accumulated in float64."""
    return math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays))
