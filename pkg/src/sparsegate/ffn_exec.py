"""Reference dense and mask-driven sparse executors for one gated FFN block.

All executors share one reduction for the down projection: neuron
contributions are grouped into fixed 64-neuron blocks by absolute index,
each block is summed by a pairwise tree over its 64 slots, and block
partials are accumulated in ascending block order. Skipped neurons occupy
empty slots, so a sparse call whose skipped neurons contribute exactly zero
reproduces the dense result bit for bit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .containers import Activation, DataError, FfnWeights, Predictor

BLOCK = 64


class Pipeline(str, enum.Enum):
    DENSE = "dense"
    PARALLEL = "parallel"
    SEQUENTIAL = "sequential"


@dataclass(frozen=True)
class Mask:
    active: np.ndarray
    predicted_active_count: int

    @property
    def predicted_sparsity(self) -> float:
        return 1.0 - self.predicted_active_count / self.active.size


@dataclass(frozen=True)
class ExecStats:
    predicted_sparsity: float
    realized_sparsity: float
    multiplies: int
    pipeline: Pipeline
    predicted_active: int
    realized_active: int


@dataclass(frozen=True)
class OpCount:
    dense: int
    sparse: float
    ratio: float


@dataclass(frozen=True)
class GatingError:
    error_norm: float
    relative: float
    direct_norm: float


def blocked_down_projection(down: np.ndarray, idx: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``sum_j down[:, idx[j]] * z[j]`` in the fixed block/pairwise-tree order.

    ``idx`` must be strictly ascending.
    """
    d = down.shape[0]
    dtype = np.result_type(down.dtype, z.dtype)
    y = np.zeros(d, dtype=dtype)
    if idx.size == 0:
        return y
    blocks = idx // BLOCK
    bounds = np.flatnonzero(np.diff(blocks)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [idx.size]))
    for lo, hi in zip(starts, ends):
        slots = np.zeros((BLOCK, d), dtype=dtype)
        cols = idx[lo:hi]
        slots[cols % BLOCK] = (down[:, cols] * z[lo:hi]).T
        width = BLOCK
        while width > 1:
            width //= 2
            slots = slots[:width] + slots[width:2 * width]
        y = y + slots[0]
    return y


def _check_x(w: FfnWeights, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != (w.d,):
        raise DataError(f"input has shape {x.shape}, expected ({w.d},)")
    if not np.all(np.isfinite(x)):
        raise DataError("input vector has non-finite entries")
    return x


def _check_pred(w: FfnWeights, pred: Predictor) -> None:
    if pred.D != w.D or pred.d != w.d:
        raise DataError(f"predictor maps {pred.d} -> {pred.D}, weights are d={w.d}, D={w.D}")


def _rows_dot(M: np.ndarray, idx: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Per-row pairwise sums; unlike a BLAS matvec the rounding of row i does
    # not depend on which other rows are in the call.
    return (M[idx] * x).sum(axis=1)


def _up_act(w: FfnWeights, u: np.ndarray) -> np.ndarray:
    return np.maximum(u, 0) if w.activation is Activation.DRELU else u


def dense_ffn(w: FfnWeights, x) -> tuple[np.ndarray, ExecStats]:
    x = _check_x(w, x)
    idx = np.arange(w.D)
    g = _rows_dot(w.gate, idx, x)
    u = _rows_dot(w.up, idx, x)
    z = np.maximum(g, 0) * _up_act(w, u)
    y = blocked_down_projection(w.down, idx, z)
    return y, ExecStats(0.0, 0.0, 3 * w.d * w.D, Pipeline.DENSE, w.D, w.D)


def predict_mask(pred: Predictor, x) -> Mask:
    """Heaviside of ``A @ (B @ x) + bias``; exactly zero counts as inactive."""
    logits = pred.A @ (pred.B @ np.asarray(x)) + pred.bias
    active = logits > 0
    return Mask(active, int(active.sum()))


def _predictor_cost(pred: Predictor) -> int:
    return pred.rank * (pred.d + pred.D)


def sparse_ffn_parallel(w: FfnWeights, pred: Predictor, x, mask: Mask | None = None):
    """Gate, up and down restricted to the predicted-active set."""
    x = _check_x(w, x)
    _check_pred(w, pred)
    mask = predict_mask(pred, x) if mask is None else mask
    idx = np.flatnonzero(mask.active)
    g = _rows_dot(w.gate, idx, x)
    u = _rows_dot(w.up, idx, x)
    z = np.maximum(g, 0) * _up_act(w, u)
    y = blocked_down_projection(w.down, idx, z)
    n = idx.size
    sp = 1.0 - n / w.D
    mults = _predictor_cost(pred) + 3 * w.d * n
    return y, ExecStats(sp, sp, mults, Pipeline.PARALLEL, n, n)


def sparse_ffn_sequential(w: FfnWeights, pred: Predictor, x, mask: Mask | None = None):
    """Gate on the predicted set, then up/down only for neurons with gate > 0."""
    x = _check_x(w, x)
    _check_pred(w, pred)
    mask = predict_mask(pred, x) if mask is None else mask
    idx = np.flatnonzero(mask.active)
    g = _rows_dot(w.gate, idx, x)
    keep = g > 0
    idx2 = idx[keep]
    g2 = g[keep]
    u = _rows_dot(w.up, idx2, x)
    z = g2 * _up_act(w, u)
    y = blocked_down_projection(w.down, idx2, z)
    n_pred, n_real = idx.size, idx2.size
    mults = _predictor_cost(pred) + w.d * n_pred + 2 * w.d * n_real
    return y, ExecStats(1.0 - n_pred / w.D, 1.0 - n_real / w.D, mults,
                        Pipeline.SEQUENTIAL, n_pred, n_real)


def run_pipeline(mode, w: FfnWeights, pred: Predictor | None, x):
    mode = Pipeline(mode)
    if mode is Pipeline.DENSE:
        return dense_ffn(w, x)
    if pred is None:
        raise DataError(f"{mode.value} pipeline needs a predictor")
    if mode is Pipeline.PARALLEL:
        return sparse_ffn_parallel(w, pred, x)
    return sparse_ffn_sequential(w, pred, x)


def op_count_model(d: int, D: int, r: int, s: float, s_realized: float) -> OpCount:
    """Analytic multiply counts: predictor + gate on ``1-s`` + up/down on ``1-s'``."""
    if d < 1 or D < 1 or r < 0:
        raise DataError(f"dimensions must be positive (d={d}, D={D}, r={r})")
    if not 0.0 <= s <= s_realized <= 1.0:
        raise DataError(f"need 0 <= s <= s' <= 1, got s={s}, s'={s_realized}")
    dense = 3 * d * D
    sparse = r * (d + D) + d * (1.0 - s) * D + 2.0 * d * (1.0 - s_realized) * D
    return OpCount(dense, sparse, dense / sparse if sparse > 0 else float("inf"))


def gating_error(w: FfnWeights, pred: Predictor, x) -> GatingError:
    """Gate-activation mass lost to false negatives, absolute and relative to ``||x||``.

    The closed form sums ``ReLU(Wx)_i^2`` over neurons the predictor gates
    off; it is cross-checked against the norm of the direct difference.
    """
    x = _check_x(w, x)
    _check_pred(w, pred)
    xn = float(np.linalg.norm(x))
    if xn == 0.0:
        raise DataError("relative gating error is undefined for a zero input")
    true_act = np.maximum(w.gate @ x, 0)
    off = (pred.A @ (pred.B @ x) + pred.bias) <= 0
    closed = float(np.sqrt(np.sum(true_act ** 2 * off)))
    direct = float(np.linalg.norm(true_act - true_act * (~off)))
    if abs(closed - direct) > 1e-12 * max(closed, direct, np.finfo(float).tiny):
        raise ArithmeticError(f"gating error mismatch: closed form {closed!r} vs direct {direct!r}")
    return GatingError(closed, closed / xn, direct)
