"""Data-whitened truncated SVD predictors for the gate projection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .containers import ActivationBatch, DataError, Predictor, SparseGateError

DAMPING_EPS = 1e-10
DAMPING_FACTORS = (0.0, 1.0, 10.0, 100.0)


class WhiteningError(SparseGateError):
    """Cholesky factorization failed on every rung of the damping ladder."""


@dataclass(frozen=True)
class WhiteningResult:
    S: np.ndarray
    S_inv: np.ndarray
    damping: float


@dataclass(frozen=True)
class SpectralInfo:
    """Spectra recorded while building a predictor.

    ``singular_values`` are those of the matrix actually truncated
    (``W @ S`` when whitened, ``W`` when naive). ``gate_singular_values``
    always belong to the raw gate matrix, and ``sigma_r_plus_1`` is the
    first discarded one of those (0 at full rank).
    """

    singular_values: np.ndarray
    gate_singular_values: np.ndarray
    sigma_r_plus_1: float
    rank: int
    damping: float
    whitening: str


def _as_cols(X) -> np.ndarray:
    if isinstance(X, ActivationBatch):
        return X.x_cols
    X = np.asarray(X)
    ActivationBatch(X)  # validates shape and finiteness
    return X


def _numerically_spd(L: np.ndarray, gram_diag_max: float) -> bool:
    # Cholesky can "succeed" on a singular Gram matrix with roundoff-sized pivots.
    piv = np.diag(L) ** 2
    floor = L.shape[0] * np.finfo(np.float64).eps * gram_diag_max
    return bool(np.all(np.isfinite(L)) and np.min(piv) > floor)


def damping_ladder(gram: np.ndarray, eps: float = DAMPING_EPS) -> list[float]:
    mu = float(np.trace(gram)) / gram.shape[0]
    return [f * eps * mu for f in DAMPING_FACTORS]


def cholesky_whitening(X, eps: float = DAMPING_EPS) -> WhiteningResult:
    """Lower Cholesky factor ``S`` of ``X @ X.T + lam * I`` and its inverse.

    ``lam`` is the first rung of ``{0, eps*mu, 10*eps*mu, 100*eps*mu}``
    (``mu = trace(X X^T) / d``) that yields a numerically SPD factor.
    """
    X = _as_cols(X).astype(np.float64, copy=False)
    gram = X @ X.T
    gram = 0.5 * (gram + gram.T)
    d = gram.shape[0]
    ladder = damping_ladder(gram, eps)
    scale = float(np.max(np.diag(gram))) if d else 0.0
    for step, lam in enumerate(ladder):
        if step > 0 and lam == 0.0:
            break
        try:
            S = np.linalg.cholesky(gram + lam * np.eye(d))
        except np.linalg.LinAlgError:
            continue
        if not _numerically_spd(S, scale + lam):
            continue
        S_inv = solve_triangular(S, np.eye(d), lower=True)
        return WhiteningResult(S, S_inv, float(lam))
    raise WhiteningError(f"Cholesky of X X^T failed for every damping value in {ladder}")


def _truncate(M: np.ndarray, r: int):
    try:
        U, sig, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SparseGateError(f"SVD did not converge: {exc}") from None
    return U[:, :r], sig, Vt[:r, :]


def build_predictor(W_gate, X=None, r: int = 1, whitening: str = "whitened",
                    eps: float = DAMPING_EPS) -> tuple[Predictor, SpectralInfo]:
    """Rank-``r`` factors ``A = U_r Sigma_r`` and ``B = V_r^T S^{-1}`` of the gate matrix.

    With ``whitening="naive"`` the whitening matrix is the identity and ``X``
    may be omitted. The returned predictor has a zero bias.
    """
    W = np.asarray(W_gate, dtype=np.float64)
    if W.ndim != 2:
        raise DataError(f"gate must be a matrix, got shape {W.shape}")
    D, d = W.shape
    if not 1 <= r <= min(D, d):
        raise DataError(f"rank {r} outside [1, min(D, d)] = [1, {min(D, d)}]")

    gate_sv = np.linalg.svd(W, compute_uv=False)
    sigma_next = float(gate_sv[r]) if r < len(gate_sv) else 0.0

    if whitening == "naive":
        U_r, sig, Vt_r = _truncate(W, r)
        A = U_r * sig[:r]
        B = Vt_r
        lam = 0.0
    elif whitening == "whitened":
        if X is None:
            raise DataError("whitened mode needs a calibration batch")
        cols = _as_cols(X)
        if cols.shape[0] != d:
            raise DataError(f"calibration batch has d={cols.shape[0]}, gate expects d={d}")
        wres = cholesky_whitening(cols, eps)
        U_r, sig, Vt_r = _truncate(W @ wres.S, r)
        A = U_r * sig[:r]
        # B = V_r^T S^{-1}, i.e. solve B S = V_r^T via S^T B^T = V_r.
        B = solve_triangular(wres.S, Vt_r.T, lower=True, trans="T").T
        lam = wres.damping
    else:
        raise DataError(f"unknown whitening mode {whitening!r}")

    pred = Predictor(A, B, np.zeros(D))
    info = SpectralInfo(sig, gate_sv, sigma_next, r, lam, whitening)
    return pred, info


def residual_spectral_norm(W, pred: Predictor) -> float:
    """Largest singular value of ``W - A @ B``."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape != (pred.D, pred.d):
        raise DataError(f"W has shape {W.shape}, predictor maps {pred.d} -> {pred.D}")
    return float(np.linalg.norm(W - pred.A @ pred.B, ord=2))


def auto_rank(D: int, d: int, fraction: float = 0.02) -> int:
    """Rank heuristic: about 2% of the intermediate size, clamped to ``[1, min(D, d)]``."""
    r = int(np.floor(fraction * D + 0.5))
    return max(1, min(r, min(D, d)))
