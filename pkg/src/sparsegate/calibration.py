"""Greedy per-neuron threshold calibration under a global drop budget.

Each neuron's calibration samples are sorted by predictor score; dropping the
``k`` lowest-scoring samples of neuron ``i`` costs ``C_i(k)``, the cumulative
damage of those samples. The greedy loop repeatedly advances the neuron whose
next ``eta`` drops are cheapest until the requested sparsity is reached.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .containers import ActivationBatch, Activation, DataError, FfnWeights, Predictor

DEFAULT_ETA = 8
# Threshold for a neuron that drops nothing; finite so the stored bias stays finite.
NEVER_DROP = -np.finfo(np.float64).max


@dataclass(frozen=True)
class CalibInstance:
    """Per-neuron proxy-sorted scores, permuted damage weights and prefix costs.

    ``order[i]`` is the stable argsort of neuron ``i``'s scores, so
    ``scores[i] == raw_scores[i, order[i]]``. ``cumcost`` has ``T + 1``
    columns with ``cumcost[:, 0] == 0``.
    """

    scores: np.ndarray
    weights: np.ndarray
    cumcost: np.ndarray
    order: np.ndarray
    eta: int = DEFAULT_ETA

    @property
    def D(self) -> int:
        return self.scores.shape[0]

    @property
    def T(self) -> int:
        return self.scores.shape[1]

    def realized_drops(self, tau: np.ndarray) -> np.ndarray:
        """Number of samples per neuron with ``score <= tau_i``."""
        return np.array([np.searchsorted(row, t, side="right") for row, t in zip(self.scores, tau)],
                        dtype=np.int64)

    def threshold(self, i: int, k: int) -> float:
        return NEVER_DROP if k == 0 else float(self.scores[i, k - 1])

    def tie_end(self, i: int, k: int) -> int:
        """Smallest pointer ``>= k`` that the ``<=`` predicate can realize exactly."""
        if k == 0:
            return 0
        return int(np.searchsorted(self.scores[i], self.scores[i, k - 1], side="right"))

    def tie_start(self, i: int, k: int) -> int:
        """Largest pointer ``<= k`` that the ``<=`` predicate can realize exactly."""
        row = self.scores[i]
        if k == 0 or k == self.T or row[k - 1] < row[k]:
            return k
        return int(np.searchsorted(row, row[k - 1], side="left"))


@dataclass(frozen=True)
class CalibResult:
    bias: np.ndarray
    tau: np.ndarray
    drops: np.ndarray
    achieved_sparsity: float
    total_damage: float
    requested_sparsity: float
    eta: int
    steps: int

    def to_json(self) -> dict:
        return {
            "requested_sparsity": self.requested_sparsity,
            "achieved_sparsity": self.achieved_sparsity,
            "total_damage": self.total_damage,
            "eta": self.eta,
            "greedy_steps": self.steps,
            "drop_counts": [int(k) for k in self.drops],
        }


def damage_weights(w: FfnWeights, data) -> np.ndarray:
    """Squared norm of each neuron's rank-one output contribution, per token (``D x T``)."""
    X = data.x_cols if isinstance(data, ActivationBatch) else np.asarray(data)
    if X.ndim != 2 or X.shape[0] != w.d:
        raise DataError(f"batch has shape {X.shape}, weights expect d={w.d}")
    gate = np.maximum(w.gate @ X, 0.0)
    up = w.up @ X
    if w.activation is Activation.DRELU:
        up = np.maximum(up, 0.0)
    col_sq = np.sum(np.asarray(w.down, dtype=np.float64) ** 2, axis=0)
    return (gate * up) ** 2 * col_sq[:, None]


def proxy_scores(pred: Predictor, data) -> np.ndarray:
    X = data.x_cols if isinstance(data, ActivationBatch) else np.asarray(data)
    if X.ndim != 2 or X.shape[0] != pred.d:
        raise DataError(f"batch has shape {X.shape}, predictor expects d={pred.d}")
    return pred.A @ (pred.B @ X)


def build_instance(scores, weights, eta: int = DEFAULT_ETA) -> CalibInstance:
    scores = np.asarray(scores, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if scores.ndim != 2 or scores.shape != weights.shape:
        raise DataError(f"scores {scores.shape} and weights {weights.shape} must be equal D x T matrices")
    if eta < 1:
        raise DataError(f"eta must be >= 1, got {eta}")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise DataError("damage weights must be finite and nonnegative")
    order = np.argsort(scores, axis=1, kind="stable")
    s_sorted = np.take_along_axis(scores, order, axis=1)
    w_sorted = np.take_along_axis(weights, order, axis=1)
    cum = np.zeros((scores.shape[0], scores.shape[1] + 1))
    np.cumsum(w_sorted, axis=1, out=cum[:, 1:])
    return CalibInstance(s_sorted, w_sorted, cum, order, int(eta))


def _initial_pointers(inst: CalibInstance) -> np.ndarray:
    # Zero-damage prefix, backed off to a tie boundary so the drop stays free.
    k = np.empty(inst.D, dtype=np.int64)
    for i in range(inst.D):
        pos = np.flatnonzero(inst.weights[i] > 0)
        prefix = inst.T if pos.size == 0 else int(pos[0])
        k[i] = inst.tie_start(i, prefix)
    return k


def greedy_calibrate(inst: CalibInstance, s: float, eta: int | None = None) -> CalibResult:
    """Greedy bias calibration reaching drop fraction ``>= s``.

    Pointers start past each neuron's zero-damage prefix; every step moves
    the cheapest neuron forward by ``eta`` samples (saturating at ``T``).
    Ties go to the lowest neuron index. Returns ``bias = -tau``.
    """
    if not 0.0 < s <= 1.0:
        raise DataError(f"target sparsity must lie in (0, 1], got {s}")
    eta = inst.eta if eta is None else int(eta)
    if eta < 1:
        raise DataError(f"eta must be >= 1, got {eta}")
    D, T = inst.D, inst.T
    total = D * T
    k = _initial_pointers(inst)

    def advance(i: int) -> int:
        return inst.tie_end(i, min(int(k[i]) + eta, T))

    heap: list[tuple[float, int]] = []
    for i in range(D):
        if k[i] < T:
            heap.append((inst.cumcost[i, advance(i)] - inst.cumcost[i, k[i]], i))
    heapq.heapify(heap)

    dropped = int(k.sum())
    steps = 0
    while dropped / total < s:
        # Only reachable with the heap exhausted if every k_i == T, i.e. fraction 1.
        cost, i = heapq.heappop(heap)
        nxt = advance(i)
        dropped += nxt - int(k[i])
        k[i] = nxt
        steps += 1
        if nxt < T:
            heapq.heappush(heap, (inst.cumcost[i, advance(i)] - inst.cumcost[i, nxt], i))

    tau = np.array([inst.threshold(i, int(k[i])) for i in range(D)])
    return CalibResult(
        bias=-tau,
        tau=tau,
        drops=k,
        achieved_sparsity=dropped / total,
        total_damage=float(inst.cumcost[np.arange(D), k].sum()),
        requested_sparsity=float(s),
        eta=eta,
        steps=steps,
    )


def calibrate(w: FfnWeights, pred: Predictor, data, s: float, eta: int = DEFAULT_ETA):
    """Weights + predictor + calibration batch -> (calibrated predictor, result)."""
    inst = build_instance(proxy_scores(pred, data), damage_weights(w, data), eta)
    res = greedy_calibrate(inst, s, eta)
    return pred.with_bias(res.bias), res


def dp_knapsack_oracle(inst: CalibInstance, K: int) -> tuple[float, np.ndarray]:
    """Exact ``min sum_i C_i(k_i)`` subject to ``sum_i k_i == K`` by DP over neurons."""
    D, T = inst.D, inst.T
    if not 0 <= K <= D * T:
        raise DataError(f"budget {K} outside [0, {D * T}]")
    best = np.full(K + 1, np.inf)
    best[0] = 0.0
    choice = np.zeros((D, K + 1), dtype=np.int64)
    for i in range(D):
        new = np.full(K + 1, np.inf)
        for kk in range(min(T, K) + 1):
            cand = np.full(K + 1, np.inf)
            cand[kk:] = best[:K + 1 - kk] + inst.cumcost[i, kk]
            better = cand < new
            new[better] = cand[better]
            choice[i, better] = kk
        best = new
    ks = np.zeros(D, dtype=np.int64)
    c = K
    for i in range(D - 1, -1, -1):
        ks[i] = choice[i, c]
        c -= ks[i]
    return float(best[K]), ks


def group_sums(inst: CalibInstance, eta: int) -> np.ndarray:
    M = inst.T // eta
    return inst.weights[:, :M * eta].reshape(inst.D, M, eta).sum(axis=2)


def kendall_tau_diagnostic(inst: CalibInstance, eta: int | None = None) -> np.ndarray:
    """Normalized Kendall agreement between ``eta``-group damage sums and group order.

    Returns ``1 - K_d / (M (M - 1))`` per neuron, where ``K_d`` counts group
    pairs whose sums strictly decrease. Values lie in ``[0.5, 1]``.
    """
    eta = inst.eta if eta is None else int(eta)
    M = inst.T // eta if eta >= 1 else 0
    if M < 2:
        raise DataError(f"need at least two groups of eta={eta} samples, have T={inst.T}")
    S = group_sums(inst, eta)
    iu, ju = np.triu_indices(M, k=1)
    discordant = (S[:, iu] > S[:, ju]).sum(axis=1)
    return 1.0 - discordant / (M * (M - 1))


def has_monotone_marginals(inst: CalibInstance) -> bool:
    return bool(np.all(np.diff(inst.weights, axis=1) >= 0))
