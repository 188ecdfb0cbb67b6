"""Dense numeric kernels: matrix multiply, row softmax, RMS norm, rotary embedding.

Everything here operates on float32 numpy arrays. A "matrix" is a 2-D,
row-major (C-contiguous) float32 ndarray; vectors are 1-D float32 ndarrays.
All kernels are pure functions and safe to call concurrently.

Row softmax and the score paths are deliberately row-independent so that
computing a subset of rows yields bit-identical values to computing the
full set; the attention module relies on this for its exact-equivalence
guarantees between the pruned and unpruned paths.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DTYPE = np.float32
ROPE_BASE = 10000.0

# A Matrix is a 2-D float32 ndarray; the alias exists for signature clarity.
Matrix = np.ndarray


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Multiply an (m, k) matrix by a (k, n) matrix.

    Raises ShapeError naming both shapes when the inner dimensions differ.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m: Matrix, causal_from: int | None = None) -> Matrix:
    """Row-wise softmax with optional causal masking.

    Rows are normalized independently after subtracting the row max, so each
    unmasked row sums to 1 and every entry lies in [0, 1].

    When `causal_from` is given, row i is treated as the score row of the
    query at absolute position `causal_from + i`, and any column j (a key
    position) with j > causal_from + i is masked to exactly 0.
    """
    scores = np.asarray(m, dtype=DTYPE)
    if scores.ndim != 2:
        raise ShapeError(f"softmax_rows expects a 2-D matrix, got shape {scores.shape}")
    if scores.shape[1] == 0:
        raise ContractError("softmax over an empty row")
    if causal_from is None:
        return _plain_softmax(scores)

    n_rows, n_cols = scores.shape
    if causal_from < 0:
        raise ContractError(
            f"causal softmax row 0 at position {causal_from} has no unmasked entries"
        )
    query_pos = causal_from + np.arange(n_rows)
    # Nothing to mask when every key position is visible to every row.
    if n_cols - 1 <= causal_from:
        return _plain_softmax(scores)

    masked = np.arange(n_cols)[None, :] > query_pos[:, None]
    shifted = np.where(masked, -np.inf, scores)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    probs[masked] = 0.0
    return probs.astype(DTYPE, copy=False)


def _plain_softmax(scores: Matrix) -> Matrix:
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return (exp / exp.sum(axis=1, keepdims=True)).astype(DTYPE, copy=False)


def rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """RMS-normalize over the last axis: x * gain / sqrt(mean(x^2) + eps).

    Accepts a single vector or a (rows, dim) matrix normalized row-wise.
    """
    x = np.asarray(x, dtype=DTYPE)
    gain = np.asarray(gain, dtype=DTYPE)
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"rms_norm input {x.shape} does not match gain {gain.shape}")
    mean_sq = np.mean(np.square(x), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(mean_sq + DTYPE(eps))
    return (x * inv).astype(DTYPE) * gain


def apply_rope(x: Matrix, start_position: int) -> Matrix:
    """Rotate consecutive dimension pairs of each row by position-dependent angles.

    Row i is taken to sit at absolute position start_position + i; pair p of
    the last axis rotates by angle position * ROPE_BASE**(-2p / d). Applied to
    queries and keys before caching, so cached keys never need re-rotation.
    """
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise ShapeError(f"apply_rope expects a (T, d) matrix, got shape {x.shape}")
    return apply_rope_heads(x[:, None, :], start_position)[:, 0, :]


def apply_rope_heads(x: np.ndarray, start_position: int) -> np.ndarray:
    """apply_rope over a (T, heads, head_dim) block; the per-element arithmetic
    is identical for every head, so results match the single-head kernel."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 3:
        raise ShapeError(f"expected a (T, heads, head_dim) block, got shape {x.shape}")
    dim = x.shape[2]
    if dim % 2 != 0:
        raise ConfigError(f"rotary embedding needs an even head dimension, got {dim}")
    half = dim // 2
    inv_freq = ROPE_BASE ** (-np.arange(half, dtype=np.float64) * 2.0 / dim)
    positions = start_position + np.arange(x.shape[0], dtype=np.float64)
    angles = positions[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(DTYPE)[:, None, :]
    sin = np.sin(angles).astype(DTYPE)[:, None, :]
    even = x[:, :, 0::2]
    odd = x[:, :, 1::2]
    out = np.empty_like(x)
    out[:, :, 0::2] = even * cos - odd * sin
    out[:, :, 1::2] = even * sin + odd * cos
    return out
