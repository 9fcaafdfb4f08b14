"""Deterministic gating-error bounds, worst-case witnesses and predictor metrics."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .containers import ActivationBatch, DataError, FfnWeights, Predictor
from .factorization import residual_spectral_norm
from .ffn_exec import Pipeline, dense_ffn, gating_error, predict_mask, run_pipeline


class Branch(str, enum.Enum):
    UNIFORM_NONNEG = "uniform_bias_nonneg"
    UNIFORM_NEG = "uniform_bias_neg"
    GENERAL_NONNEG = "general_bias_nonneg"
    GENERAL_NEG = "general_bias_neg"
    MIXED = "mixed_unsupported"


@dataclass(frozen=True)
class BoundReport:
    branch: Branch
    R: float
    bound_value: float | None
    observed: float
    tight_witness_gap: float | None = None

    @property
    def holds(self) -> bool:
        """``observed <= bound`` up to ``1e-9 * max(1, bound)``; vacuous for mixed bias."""
        if self.branch is Branch.MIXED:
            return True
        return self.observed <= self.bound_value + 1e-9 * max(1.0, self.bound_value)

    def to_json(self) -> dict:
        out = asdict(self)
        out["branch"] = self.branch.value
        return out


@dataclass(frozen=True)
class ResidualChain:
    lhs: float
    mid: float
    rhs: float

    @property
    def ordered(self) -> bool:
        return self.lhs <= self.mid <= self.rhs


@dataclass(frozen=True)
class MetricRow:
    layer: int
    recall: float
    predicted_sparsity: float
    realized_sparsity: float
    roc_auc: float
    mean_rel_output_error: float

    FIELDS = ("layer", "recall", "predicted_sparsity", "realized_sparsity",
              "roc_auc", "mean_rel_output_error")


def shifted_residual_bound(w_gate, w_approx, b, x) -> ResidualChain:
    """Gating error alongside ``||(dW x - b)_+||`` and ``||dW x - b||``."""
    W = np.asarray(w_gate, dtype=np.float64)
    Wr = np.asarray(w_approx, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.shape != Wr.shape or x.shape != (W.shape[1],) or b.shape != (W.shape[0],):
        raise DataError("shapes of W, W_r, b and x disagree")
    z = W @ x
    off = (Wr @ x + b) <= 0
    lhs = float(np.sqrt(np.sum(np.maximum(z, 0) ** 2 * off)))
    shifted = (W - Wr) @ x - b
    return ResidualChain(lhs, float(np.linalg.norm(np.maximum(shifted, 0))),
                         float(np.linalg.norm(shifted)))


def classify_bias(b: np.ndarray) -> Branch:
    if b.size and np.all(b == b[0]):
        return Branch.UNIFORM_NONNEG if b[0] >= 0 else Branch.UNIFORM_NEG
    if np.all(b >= 0):
        return Branch.GENERAL_NONNEG
    if np.all(b < 0):
        return Branch.GENERAL_NEG
    return Branch.MIXED


def worst_case_bound(m: int, b, R: float) -> BoundReport:
    """``sup_{||e|| <= R} ||(e - b)_+||`` with the witness that attains it.

    ``b`` may be a scalar (uniform bias) or a length-``m`` vector. Mixed-sign
    vectors are outside both closed forms and come back without a bound.
    """
    if R < 0:
        raise DataError(f"residual budget R must be nonnegative, got {R}")
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), (m,)).copy()
    branch = classify_bias(b)
    if branch is Branch.MIXED:
        return BoundReport(branch, float(R), None, float("nan"), None)

    if branch is Branch.UNIFORM_NONNEG:
        bound = max(R - b[0], 0.0)
        e = np.zeros(m)
        e[0] = R
    elif branch is Branch.UNIFORM_NEG:
        bound = R - b[0] * np.sqrt(m)
        e = np.full(m, R / np.sqrt(m))
    elif branch is Branch.GENERAL_NONNEG:
        gains = np.maximum(R - b, 0.0)
        i_star = int(np.argmax(gains))
        bound = float(gains[i_star])
        e = np.zeros(m)
        e[i_star] = R
    else:
        nb = float(np.linalg.norm(b))
        bound = R + nb
        e = (R / nb) * (-b)

    attained = float(np.linalg.norm(np.maximum(e - b, 0.0)))
    return BoundReport(branch, float(R), float(bound), attained, float(bound - attained))


def svd_bound_check(w: FfnWeights, pred: Predictor, samples, sigma: float | None = None) -> list[BoundReport]:
    """Per-sample relative gating error against the truncated-SVD corollary.

    ``sigma`` defaults to the spectral norm of ``W_gate - A @ B``, which
    equals the first discarded singular value for a plain truncated SVD.
    """
    X = samples.x_cols if isinstance(samples, ActivationBatch) else np.asarray(samples)
    sigma = residual_spectral_norm(w.gate, pred) if sigma is None else float(sigma)
    b = np.asarray(pred.bias, dtype=np.float64)
    branch = classify_bias(b)
    reports = []
    for x in X.T:
        xn = float(np.linalg.norm(x))
        observed = gating_error(w, pred, x).relative
        if branch is Branch.MIXED:
            reports.append(BoundReport(branch, sigma, None, observed))
            continue
        if branch in (Branch.UNIFORM_NONNEG, Branch.GENERAL_NONNEG):
            bound = float(np.max(np.maximum(sigma - b / xn, 0.0)))
        else:
            bound = sigma + float(np.linalg.norm(b)) / xn
        reports.append(BoundReport(branch, sigma, bound, observed))
    return reports


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise DataError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def layer_metrics(w: FfnWeights, pred: Predictor, eval_batch, layer: int = 0,
                  mode=Pipeline.SEQUENTIAL) -> MetricRow:
    """Recall, sparsity, pooled ROC AUC and output error of one predictor on held-out tokens.

    A neuron is truly active when its gate pre-activation is positive; this
    label is used for both activation variants.
    """
    X = eval_batch.x_cols if isinstance(eval_batch, ActivationBatch) else np.asarray(eval_batch)
    mode = Pipeline(mode)
    recalls, pred_sp, real_sp, errs = [], [], [], []
    logits = pred.A @ (pred.B @ X) + pred.bias[:, None]
    truth = (w.gate @ X) > 0
    for t, x in enumerate(X.T):
        mask = predict_mask(pred, x)
        n_true = int(truth[:, t].sum())
        if n_true:
            recalls.append(int((mask.active & truth[:, t]).sum()) / n_true)
        y_dense, _ = dense_ffn(w, x)
        y, st = run_pipeline(mode, w, pred, x)
        pred_sp.append(st.predicted_sparsity)
        real_sp.append(st.realized_sparsity)
        dn = float(np.linalg.norm(y_dense))
        if dn > 0:
            errs.append(float(np.linalg.norm(y_dense - y)) / dn)
    labels = truth.ravel()
    auc = roc_auc(logits.ravel(), labels) if 0 < labels.sum() < labels.size else float("nan")
    return MetricRow(
        layer=layer,
        recall=float(np.mean(recalls)) if recalls else 1.0,
        predicted_sparsity=float(np.mean(pred_sp)),
        realized_sparsity=float(np.mean(real_sp)),
        roc_auc=auc,
        mean_rel_output_error=float(np.mean(errs)) if errs else 0.0,
    )
