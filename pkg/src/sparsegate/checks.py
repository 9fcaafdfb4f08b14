"""Randomized property suites for the error bounds and the calibration optimizer.

Each check draws seeded random instances and counts passes and failures;
``run_bound_suite`` covers the gating-error results, ``run_oracle_suite``
the greedy calibration against exact oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .analysis import Branch, shifted_residual_bound, svd_bound_check, worst_case_bound
from .calibration import (
    build_instance,
    dp_knapsack_oracle,
    group_sums,
    greedy_calibrate,
    has_monotone_marginals,
    kendall_tau_diagnostic,
)
from .containers import FfnWeights
from .factorization import build_predictor
from .ffn_exec import gating_error


@dataclass
class PropertyResult:
    name: str
    passed: int = 0
    failed: int = 0
    skipped: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failed == 0

    def record(self, good: bool) -> None:
        if good:
            self.passed += 1
        else:
            self.failed += 1

    def to_json(self) -> dict:
        return {"property": self.name, "ok": self.ok, "passed": self.passed,
                "failed": self.failed, "skipped": self.skipped, **self.stats}


def random_layer(rng: np.random.Generator, d: int, D: int) -> FfnWeights:
    return FfnWeights(rng.standard_normal((D, d)), rng.standard_normal((D, d)),
                      rng.standard_normal((d, D)))


def random_x(rng: np.random.Generator, d: int) -> np.ndarray:
    x = rng.standard_normal(d)
    while not np.any(x):
        x = rng.standard_normal(d)
    return x


def sign_uniform_bias(rng: np.random.Generator, D: int, kind: str) -> np.ndarray:
    mag = rng.exponential(0.5, D)
    if kind == "uniform_nonneg":
        return np.full(D, mag[0])
    if kind == "uniform_neg":
        return np.full(D, -mag[0] - 1e-3)
    if kind == "nonneg":
        return mag
    return -mag - 1e-3


BIAS_KINDS = ("uniform_nonneg", "uniform_neg", "nonneg", "neg")


def run_bound_suite(trials: int = 100, seed: int = 0, d: int = 8, D: int = 16, rank: int = 4) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    exact = PropertyResult("exact_error_identity")
    mono = PropertyResult("bias_monotonicity")
    chain = PropertyResult("residual_bound_chain")
    tight = PropertyResult("worst_case_tightness")
    dom = PropertyResult("worst_case_domination")
    cor = PropertyResult("svd_corollary_bound")
    max_gap = 0.0

    for t in range(trials):
        w = random_layer(rng, d, D)
        base, _ = build_predictor(w.gate, r=rank, whitening="naive")
        x = random_x(rng, d)
        b = rng.normal(0.0, 1.0, D)
        pred = base.with_bias(b)

        try:
            ge = gating_error(w, pred, x)
            exact.record(abs(ge.error_norm - ge.direct_norm) <= 1e-12 * max(ge.direct_norm, 1e-300))
        except ArithmeticError:
            exact.record(False)

        lower = base.with_bias(b - rng.exponential(1.0, D))
        mono.record(gating_error(w, lower, x).error_norm >= ge.error_norm)

        c = shifted_residual_bound(w.gate, base.A @ base.B, b, x)
        chain.record(c.ordered)

        kind = BIAS_KINDS[t % len(BIAS_KINDS)]
        bb = sign_uniform_bias(rng, D, kind)
        R = float(rng.exponential(2.0))
        rep = worst_case_bound(D, bb, R)
        max_gap = max(max_gap, abs(rep.tight_witness_gap))
        tight.record(rep.branch is not Branch.MIXED and abs(rep.tight_witness_gap) <= 1e-9)
        e = rng.standard_normal(D)
        e *= R * rng.uniform() ** (1.0 / D) / np.linalg.norm(e)
        val = float(np.linalg.norm(np.maximum(e - bb, 0.0)))
        dom.record(val <= rep.bound_value + 1e-12 * max(1.0, rep.bound_value))

        X = np.stack([random_x(rng, d) for _ in range(4)], axis=1)
        reports = svd_bound_check(w, base.with_bias(bb), X)
        cor.record(all(r.holds for r in reports))

    tight.stats["max_abs_gap"] = max_gap
    return [exact, mono, chain, tight, dom, cor]


def monotone_instance(rng: np.random.Generator, D: int, T: int, eta: int = 1):
    """Instance whose proxy-sorted integer weights are nondecreasing per neuron."""
    scores = np.sort(rng.standard_normal((D, T)), axis=1)
    weights = np.sort(rng.integers(0, 20, (D, T)), axis=1).astype(np.float64)
    weights[rng.uniform(size=D) < 0.3, 0] = 0.0
    weights = np.sort(weights, axis=1)
    perm = np.argsort(rng.uniform(size=(D, T)), axis=1)
    return build_instance(np.take_along_axis(scores, perm, 1), np.take_along_axis(weights, perm, 1), eta)


def arbitrary_instance(rng: np.random.Generator, D: int, T: int, eta: int = 1):
    scores = rng.standard_normal((D, T))
    weights = rng.integers(0, 20, (D, T)).astype(np.float64)
    return build_instance(scores, weights, eta)


def kendall_bruteforce(sums: np.ndarray) -> float:
    M = len(sums)
    disc = sum(1 for a in range(M) for b in range(a + 1, M) if sums[a] > sums[b])
    return 1.0 - disc / (M * (M - 1))


def run_oracle_suite(trials: int = 100, seed: int = 0, max_neurons: int = 8,
                     max_samples: int = 12) -> list[PropertyResult]:
    rng = np.random.default_rng(seed)
    optimal = PropertyResult("greedy_equals_dp")
    feasible = PropertyResult("budget_feasibility")
    mono = PropertyResult("damage_monotone_in_sparsity")
    realize = PropertyResult("threshold_realization")
    kendall = PropertyResult("kendall_soundness")
    gaps = []

    for t in range(trials):
        D = int(rng.integers(1, max_neurons + 1))
        T = int(rng.integers(2, max_samples + 1))
        adversarial = t % 2 == 1
        inst = arbitrary_instance(rng, D, T) if adversarial else monotone_instance(rng, D, T)
        K = int(rng.integers(1, D * T + 1))
        res = greedy_calibrate(inst, K / (D * T), eta=1)
        k_total = int(res.drops.sum())
        dp_cost, _ = dp_knapsack_oracle(inst, k_total)
        if has_monotone_marginals(inst):
            optimal.record(res.total_damage == dp_cost)
        else:
            optimal.skipped += 1
            gaps.append(res.total_damage - dp_cost)

        s1, s2 = sorted(rng.uniform(0.01, 1.0, 2))
        eta = int(rng.integers(1, 4))
        r1 = greedy_calibrate(inst, s1, eta)
        r2 = greedy_calibrate(inst, s2, eta)
        feasible.record(r1.achieved_sparsity >= s1 and r2.achieved_sparsity >= s2)
        mono.record(r1.total_damage <= r2.total_damage)
        realize.record(bool(np.array_equal(inst.realized_drops(r1.tau), r1.drops)))

        if T >= 2 * eta:
            got = kendall_tau_diagnostic(inst, eta)
            want = [kendall_bruteforce(row) for row in group_sums(inst, eta)]
            kendall.record(bool(np.array_equal(got, want)))

    if gaps:
        # DP is exact, so greedy can only be worse on non-monotone instances.
        optimal.stats.update(adversarial_instances=len(gaps), min_gap=float(min(gaps)),
                             max_gap=float(max(gaps)), mean_gap=float(np.mean(gaps)))
        if min(gaps) < 0:
            optimal.failed += 1
    return [optimal, feasible, mono, realize, kendall]
