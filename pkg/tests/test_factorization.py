import numpy as np
import pytest

from sparsegate.containers import DataError
from sparsegate.factorization import (
    WhiteningError,
    auto_rank,
    build_predictor,
    cholesky_whitening,
    residual_spectral_norm,
)


def orthonormal_rows(rng, d, n):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q[:d]


def correlated(rng, d, n):
    mix = rng.standard_normal((d, d)) * 0.8 ** np.arange(d)
    return mix @ rng.standard_normal((d, n))


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestWhitening:
    def test_identity_gram(self, rng):
        X = orthonormal_rows(rng, 4, 10)
        res = cholesky_whitening(X)
        assert res.damping == 0.0
        np.testing.assert_allclose(res.S, np.eye(4), atol=1e-12)

    def test_rank_deficient_gets_damped(self):
        X = np.array([[1.0], [0.0]])
        res = cholesky_whitening(X)
        assert res.damping > 0
        assert np.allclose(res.S, np.tril(res.S))
        assert np.all(np.diag(res.S) > 0)

    def test_reconstructs_gram(self, rng):
        X = rng.standard_normal((8, 64))
        res = cholesky_whitening(X)
        gram = X @ X.T + res.damping * np.eye(8)
        assert np.linalg.norm(res.S @ res.S.T - gram) <= 1e-10 * np.linalg.norm(gram)
        assert np.linalg.norm(res.S @ res.S_inv - np.eye(8)) <= 1e-8 * max(1.0, np.linalg.norm(res.S))

    def test_zero_batch_fails_whole_ladder(self):
        with pytest.raises(WhiteningError, match="damping"):
            cholesky_whitening(np.zeros((3, 5)))


class TestBuildPredictor:
    def test_full_rank_reconstructs(self, rng):
        W = rng.standard_normal((7, 5))
        X = orthonormal_rows(rng, 5, 12)
        for mode in ("whitened", "naive"):
            pred, _ = build_predictor(W, X, 5, mode)
            assert rel_fro(pred.A @ pred.B, W) <= 1e-8
            assert not pred.bias.any()

    def test_full_rank_correlated_data(self, rng):
        W = rng.standard_normal((6, 6))
        pred, _ = build_predictor(W, correlated(rng, 6, 50), 6)
        assert rel_fro(pred.A @ pred.B, W) <= 1e-8

    def test_diagonal(self, rng):
        W = np.diag([3.0, 2.0, 1.0])
        X = orthonormal_rows(rng, 3, 3)
        pred, info = build_predictor(W, X, 2)
        np.testing.assert_allclose(pred.A @ pred.B, np.diag([3.0, 2.0, 0.0]), atol=1e-12)
        assert info.sigma_r_plus_1 == pytest.approx(1.0, abs=1e-12)

    def test_whitened_beats_naive_on_data(self, rng):
        W = rng.standard_normal((8, 6))
        X = correlated(rng, 6, 100)
        pw, _ = build_predictor(W, X, 2, "whitened")
        pn, _ = build_predictor(W, X, 2, "naive")
        err_w = np.linalg.norm(W @ X - pw.A @ pw.B @ X)
        err_n = np.linalg.norm(W @ X - pn.A @ pn.B @ X)
        assert err_w <= err_n + 1e-10 * np.linalg.norm(W @ X)

    def test_B_is_Vt_times_S_inverse(self, rng):
        W = rng.standard_normal((9, 5))
        X = correlated(rng, 5, 40)
        pred, info = build_predictor(W, X, 3)
        S = cholesky_whitening(X).S
        U, sig, Vt = np.linalg.svd(W @ S, full_matrices=False)
        target = (U[:, :3] * sig[:3]) @ Vt[:3]
        assert rel_fro((pred.A @ pred.B) @ S, target) <= 1e-8
        np.testing.assert_allclose(info.singular_values, sig, rtol=1e-12)

    @pytest.mark.parametrize("r", [0, 6])
    def test_rank_out_of_range(self, rng, r):
        with pytest.raises(DataError, match="rank"):
            build_predictor(rng.standard_normal((5, 5)), r=r, whitening="naive")

    def test_whitened_needs_batch(self, rng):
        with pytest.raises(DataError, match="calibration"):
            build_predictor(rng.standard_normal((4, 3)), None, 2)

    def test_spectral_info_is_sorted(self, rng):
        _, info = build_predictor(rng.standard_normal((10, 6)), correlated(rng, 6, 30), 2)
        for sv in (info.singular_values, info.gate_singular_values):
            assert np.all(sv >= 0) and np.all(np.diff(sv) <= 0)


class TestResidualSpectralNorm:
    def test_full_rank_zero(self, rng):
        W = rng.standard_normal((6, 4))
        pred, _ = build_predictor(W, r=4, whitening="naive")
        assert residual_spectral_norm(W, pred) <= 1e-9 * np.linalg.norm(W, 2)

    def test_diagonal(self):
        W = np.diag([3.0, 2.0, 1.0])
        pred, _ = build_predictor(W, r=2, whitening="naive")
        assert residual_spectral_norm(W, pred) == pytest.approx(1.0, rel=1e-12)

    @pytest.mark.parametrize("shape,r", [((12, 8), 3), ((5, 9), 1), ((16, 16), 10)])
    def test_eckart_young(self, rng, shape, r):
        W = rng.standard_normal(shape)
        pred, info = build_predictor(W, r=r, whitening="naive")
        oracle = np.linalg.svd(W, compute_uv=False)[r]
        assert residual_spectral_norm(W, pred) == pytest.approx(oracle, rel=1e-8)
        assert info.sigma_r_plus_1 == pytest.approx(oracle, rel=1e-12)

    def test_shape_mismatch(self, rng):
        pred, _ = build_predictor(rng.standard_normal((4, 3)), r=1, whitening="naive")
        with pytest.raises(DataError):
            residual_spectral_norm(rng.standard_normal((3, 4)), pred)


@pytest.mark.parametrize("D,d,expected", [(256, 64, 5), (11008, 4096, 220), (10, 10, 1), (1000, 8, 8)])
def test_auto_rank(D, d, expected):
    assert auto_rank(D, d) == expected
