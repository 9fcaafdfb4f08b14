import numpy as np
import pytest

from sparsegate.containers import DataError, FfnWeights, Predictor
from sparsegate.factorization import build_predictor
from sparsegate.ffn_exec import (
    Mask,
    Pipeline,
    blocked_down_projection,
    dense_ffn,
    gating_error,
    op_count_model,
    predict_mask,
    sparse_ffn_parallel,
    sparse_ffn_sequential,
)


def random_ffn(rng, d=16, D=200, activation="reglu"):
    return FfnWeights(rng.standard_normal((D, d)), rng.standard_normal((D, d)),
                      rng.standard_normal((d, D)), activation)


def exact_predictor(w):
    pred, _ = build_predictor(w.gate, r=min(w.D, w.d), whitening="naive")
    return pred


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def const_predictor(w, bias_value):
    return Predictor(np.ones((w.D, 1)), np.zeros((1, w.d)), np.full(w.D, float(bias_value)))


class TestDense:
    def test_identity_example(self):
        w = FfnWeights(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.eye(2), np.eye(2))
        y, st = dense_ffn(w, np.array([1.0, 1.0]))
        np.testing.assert_array_equal(y, [1.0, 0.0])
        assert st.multiplies == 3 * 2 * 2
        assert st.pipeline is Pipeline.DENSE

    def test_zero_input(self, rng):
        y, _ = dense_ffn(random_ffn(rng), np.zeros(16))
        assert not y.any()

    def test_drelu_negative_up(self):
        gate, up, down = np.array([[1.0, 0.0]]), np.array([[-1.0, 0.0]]), np.array([[1.0], [1.0]])
        x = np.array([2.0, 0.0])
        y_re, _ = dense_ffn(FfnWeights(gate, up, down, "reglu"), x)
        y_dr, _ = dense_ffn(FfnWeights(gate, up, down, "drelu"), x)
        np.testing.assert_array_equal(y_re, [-4.0, -4.0])
        np.testing.assert_array_equal(y_dr, [0.0, 0.0])

    def test_matches_plain_formula(self, rng):
        w = random_ffn(rng)
        x = rng.standard_normal(16)
        ref = w.down @ (np.maximum(w.gate @ x, 0) * (w.up @ x))
        y, _ = dense_ffn(w, x)
        assert rel(y, ref) <= 1e-12

    def test_non_finite_input(self, rng):
        with pytest.raises(DataError, match="non-finite"):
            dense_ffn(random_ffn(rng), np.full(16, np.nan))


class TestBlockedReduction:
    def test_matches_matvec(self, rng):
        down = rng.standard_normal((5, 300))
        z = rng.standard_normal(300)
        y = blocked_down_projection(down, np.arange(300), z)
        assert rel(y, down @ z) <= 1e-13

    def test_empty(self, rng):
        assert not blocked_down_projection(rng.random((3, 10)), np.array([], dtype=int), np.array([])).any()

    def test_zero_slots_are_neutral(self, rng):
        down = rng.standard_normal((4, 130))
        z = rng.standard_normal(130)
        keep = np.sort(rng.choice(130, 50, replace=False))
        z_dense = np.zeros(130)
        z_dense[keep] = z[keep]
        a = blocked_down_projection(down, keep, z[keep])
        b = blocked_down_projection(down, np.arange(130), z_dense)
        assert a.tobytes() == b.tobytes()


class TestPredictMask:
    def test_exact_predictor_matches_support(self, rng):
        w = random_ffn(rng, d=8, D=20)
        pred = exact_predictor(w)
        for _ in range(10):
            x = rng.standard_normal(8)
            z = w.gate @ x
            m = predict_mask(pred, x)
            margin = np.abs(z) > 1e-9
            np.testing.assert_array_equal(m.active[margin], (z > 0)[margin])
            assert m.predicted_active_count == m.active.sum()

    def test_huge_positive_bias(self, rng):
        w = random_ffn(rng)
        m = predict_mask(const_predictor(w, 1e300), rng.standard_normal(16))
        assert m.active.all()

    def test_very_negative_bias(self, rng):
        w = random_ffn(rng)
        m = predict_mask(const_predictor(w, -1e300), rng.standard_normal(16))
        assert not m.active.any()

    def test_zero_logit_inactive(self, rng):
        w = random_ffn(rng, D=4)
        assert not predict_mask(const_predictor(w, 0.0), rng.standard_normal(16)).active.any()


class TestParallel:
    def test_all_active_bit_identical(self, rng):
        w = random_ffn(rng)
        x = rng.standard_normal(16)
        y, st = sparse_ffn_parallel(w, const_predictor(w, 1.0), x)
        assert y.tobytes() == dense_ffn(w, x)[0].tobytes()
        assert st.predicted_sparsity == st.realized_sparsity == 0.0

    def test_all_inactive(self, rng):
        w = random_ffn(rng)
        pred = const_predictor(w, -1.0)
        y, st = sparse_ffn_parallel(w, pred, rng.standard_normal(16))
        assert not y.any()
        assert st.multiplies == 1 * (16 + 200)
        assert st.realized_sparsity == 1.0

    def test_perfect_recall(self, rng):
        w = random_ffn(rng)
        pred = exact_predictor(w)
        for _ in range(10):
            x = rng.standard_normal(16)
            y_d, _ = dense_ffn(w, x)
            y, st = sparse_ffn_parallel(w, pred, x)
            assert rel(y, y_d) <= 1e-12
            assert st.multiplies == 16 * (16 + 200) + 3 * 16 * st.predicted_active


class TestSequential:
    def test_revalidation_drops_false_positive(self):
        w = FfnWeights(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.eye(2), np.eye(2))
        pred = Predictor(np.ones((2, 1)), np.zeros((1, 2)), np.ones(2))
        y, st = sparse_ffn_sequential(w, pred, np.array([1.0, 1.0]))
        np.testing.assert_array_equal(y, [1.0, 0.0])
        assert st.predicted_sparsity == 0.0
        assert st.realized_sparsity == 0.5
        assert st.realized_sparsity > st.predicted_sparsity
        assert st.multiplies == 1 * 4 + 2 * 2 + 2 * 2 * 1

    def test_perfect_mask_fewer_multiplies(self, rng):
        w = random_ffn(rng)
        pred = const_predictor(w, 1.0)  # every neuron predicted active, most are false positives
        x = rng.standard_normal(16)
        y_s, st_s = sparse_ffn_sequential(w, pred, x)
        y_p, st_p = sparse_ffn_parallel(w, pred, x)
        y_d, _ = dense_ffn(w, x)
        assert rel(y_s, y_d) <= 1e-12
        assert st_s.multiplies < st_p.multiplies
        assert y_s.tobytes() == y_p.tobytes()

    def test_all_inactive(self, rng):
        w = random_ffn(rng)
        y, st = sparse_ffn_sequential(w, const_predictor(w, -5.0), rng.standard_normal(16))
        assert not y.any()
        assert st.multiplies == 216

    @pytest.mark.parametrize("activation", ["reglu", "drelu"])
    def test_same_output_as_parallel_on_any_mask(self, rng, activation):
        w = random_ffn(rng, activation=activation)
        pred = Predictor(rng.standard_normal((200, 3)), rng.standard_normal((3, 16)), rng.normal(0, 1, 200))
        for _ in range(10):
            x = rng.standard_normal(16)
            y_s, st_s = sparse_ffn_sequential(w, pred, x)
            y_p, st_p = sparse_ffn_parallel(w, pred, x)
            assert y_s.tobytes() == y_p.tobytes()
            assert st_s.realized_sparsity >= st_s.predicted_sparsity == st_p.predicted_sparsity
            assert st_s.multiplies <= st_p.multiplies

    def test_stats_match_op_model(self, rng):
        w = random_ffn(rng)
        pred = Predictor(rng.standard_normal((200, 4)), rng.standard_normal((4, 16)), rng.normal(0, 1, 200))
        x = rng.standard_normal(16)
        for fn in (sparse_ffn_parallel, sparse_ffn_sequential):
            _, st = fn(w, pred, x)
            model = op_count_model(16, 200, 4, st.predicted_sparsity, st.realized_sparsity)
            assert st.multiplies == round(model.sparse)

    def test_deterministic(self, rng):
        w = random_ffn(rng)
        pred = Predictor(rng.standard_normal((200, 4)), rng.standard_normal((4, 16)), rng.normal(0, 1, 200))
        x = rng.standard_normal(16)
        a = sparse_ffn_sequential(w, pred, x)
        b = sparse_ffn_sequential(w, pred, x)
        assert a[0].tobytes() == b[0].tobytes() and a[1] == b[1]

    def test_explicit_mask(self, rng):
        w = random_ffn(rng, D=4)
        pred = const_predictor(w, -1.0)
        mask = Mask(np.array([True, True, True, True]), 4)
        _, st = sparse_ffn_sequential(w, pred, rng.standard_normal(16), mask=mask)
        assert st.predicted_active == 4


class TestOpCount:
    def test_7b_shapes_ratio(self):
        # 3dD / (r(d+D) + d(1-s)D + 2d(1-s')D) at 7B-scale shapes.
        oc = op_count_model(4096, 11008, 256, 0.5, 0.9)
        assert oc.dense == 135_266_304
        assert oc.sparse == pytest.approx(256 * 15104 + 4096 * 0.5 * 11008 + 2 * 4096 * 0.1 * 11008)
        assert 3.80 <= oc.ratio <= 3.84
        assert round(oc.ratio, 2) == 3.82

    def test_degenerate_dense(self):
        oc = op_count_model(8, 32, 0, 0.0, 0.0)
        assert oc.sparse == 3 * 8 * 32
        assert oc.ratio == 1.0

    def test_everything_skipped(self):
        assert op_count_model(8, 32, 2, 1.0, 1.0).sparse == 2 * 40

    def test_rejects_s_above_realized(self):
        with pytest.raises(DataError):
            op_count_model(8, 32, 2, 0.6, 0.5)


class TestGatingError:
    def test_exact_predictor(self, rng):
        w = random_ffn(rng, d=8, D=20)
        assert gating_error(w, exact_predictor(w).with_bias(np.full(20, 1e-9)), rng.standard_normal(8)).error_norm == 0.0

    def test_positive_bias(self, rng):
        w = random_ffn(rng)
        assert gating_error(w, const_predictor(w, 1e6), rng.standard_normal(16)).relative == 0.0

    def test_closed_form_vs_direct(self, rng):
        w = random_ffn(rng)
        pred = Predictor(rng.standard_normal((200, 3)), rng.standard_normal((3, 16)), rng.normal(0, 1, 200))
        for _ in range(20):
            x = rng.standard_normal(16)
            ge = gating_error(w, pred, x)
            a = np.maximum(w.gate @ x, 0)
            keep = (pred.A @ (pred.B @ x) + pred.bias) > 0
            oracle = np.linalg.norm(a - a * keep)
            assert ge.error_norm == pytest.approx(oracle, rel=1e-12)
            assert ge.relative == pytest.approx(oracle / np.linalg.norm(x), rel=1e-12)

    def test_zero_input(self, rng):
        w = random_ffn(rng)
        with pytest.raises(DataError, match="zero input"):
            gating_error(w, const_predictor(w, 0.0), np.zeros(16))
