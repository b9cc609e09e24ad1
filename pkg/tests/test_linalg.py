import numpy as np
import pytest

from donprec.linalg import (
    CsrMatrix,
    LuSolver,
    SingularMatrixError,
    lu_solve,
    operator_to_dense,
    qr_thin,
    spectral_radius_estimate,
    spmv,
    sym_eig,
)


def dense_matvec_oracle(dense, x):
    # independent reference: plain row-wise dot products
    return np.array([np.dot(row, x) for row in dense])


def laplacian_1d_dense(n, h):
    a = np.zeros((n, n))
    for i in range(n):
        a[i, i] = 2.0 / h
        if i > 0:
            a[i, i - 1] = -1.0 / h
        if i < n - 1:
            a[i, i + 1] = -1.0 / h
    return a


class TestSpmv:
    def test_identity(self):
        a = CsrMatrix.identity(3)
        x = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(spmv(a, x), x)

    def test_laplacian_stencil_matches_dense_oracle(self):
        h = 0.25
        dense = laplacian_1d_dense(3, h)
        a = CsrMatrix.from_dense(dense)
        x = np.ones(3)
        expected = dense_matvec_oracle(dense, x)
        assert np.allclose(spmv(a, x), expected, rtol=0, atol=1e-14)

    def test_empty_row_gives_zero(self):
        a = CsrMatrix(2, 2, [0, 1, 1], [0], [3.0])
        y = spmv(a, np.array([2.0, 5.0]))
        assert y[0] == 6.0
        assert y[1] == 0.0

    def test_dimension_mismatch(self):
        a = CsrMatrix.identity(3)
        with pytest.raises(ValueError):
            spmv(a, np.ones(4))

    def test_random_matrices_match_dense_oracle(self):
        # property: agreement with dense oracle to 1e-13 relative on >= 100 cases
        rng = np.random.default_rng(42)
        for _ in range(120):
            n = int(rng.integers(1, 65))
            dense = rng.standard_normal((n, n))
            dense[rng.random((n, n)) < 0.6] = 0.0
            a = CsrMatrix.from_dense(dense)
            x = rng.standard_normal(n)
            y = spmv(a, x)
            ref = dense_matvec_oracle(dense, x)
            scale = max(np.linalg.norm(ref), 1e-300)
            assert np.linalg.norm(y - ref) / scale < 1e-13


class TestCsrValidation:
    def test_rejects_bad_row_ptr(self):
        with pytest.raises(ValueError):
            CsrMatrix(2, 2, [0, 2, 1], [0, 1], [1.0, 1.0])

    def test_rejects_duplicate_columns(self):
        with pytest.raises(ValueError):
            CsrMatrix(1, 3, [0, 2], [1, 1], [1.0, 2.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            CsrMatrix(1, 1, [0, 1], [0], [np.nan])


class TestQrThin:
    def test_identity(self):
        q, r = qr_thin(np.eye(4))
        assert np.allclose(q, np.eye(4), atol=1e-15)
        assert np.allclose(r, np.eye(4), atol=1e-15)

    def test_random_20x5_remultiply_oracle(self):
        rng = np.random.default_rng(7)
        m = rng.standard_normal((20, 5))
        q, r = qr_thin(m)
        assert np.linalg.norm(q.T @ q - np.eye(5)) < 1e-12
        assert np.linalg.norm(q @ r - m) / np.linalg.norm(m) < 1e-12
        assert np.all(np.diag(r) >= 0.0)
        assert np.allclose(np.tril(r, -1), 0.0, atol=1e-14)

    def test_duplicated_column_flags_rank_deficiency(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((10, 4))
        m[:, 3] = m[:, 0]
        _, r = qr_thin(m)
        assert np.min(np.abs(np.diag(r))) < 1e-12

    def test_orthogonality_idempotent(self):
        rng = np.random.default_rng(11)
        m = rng.standard_normal((30, 6))
        q, _ = qr_thin(m)
        q2, _ = qr_thin(q)
        # equal up to column sign
        signs = np.sign(np.sum(q2 * q, axis=0))
        assert np.linalg.norm(q2 * signs - q) < 1e-10

    def test_rejects_wide_matrix(self):
        with pytest.raises(ValueError):
            qr_thin(np.ones((2, 3)))


class TestLuSolve:
    def test_scaled_identity(self):
        m = 2.0 * np.eye(2)
        assert np.allclose(lu_solve(m, np.array([2.0, 4.0])), [1.0, 2.0])

    def test_laplacian_residual_oracle(self):
        m = laplacian_1d_dense(10, 1.0 / 11.0)
        b = np.ones(10)
        x = lu_solve(m, b)
        assert np.linalg.norm(m @ x - b) / np.linalg.norm(b) < 1e-12

    def test_singular_matrix_raises(self):
        m = np.eye(3)
        m[1] = 0.0
        with pytest.raises(SingularMatrixError):
            lu_solve(m, np.ones(3))

    def test_factorization_cached(self):
        from donprec.linalg import _lu_cache

        m = np.diag([1.0, 2.0, 3.0])
        lu_solve(m, np.ones(3))
        assert id(m) in _lu_cache
        lu_solve(m, np.arange(3.0))

    def test_roundtrip_via_spmv(self):
        rng = np.random.default_rng(5)
        q, _ = qr_thin(rng.standard_normal((40, 40)))
        m = q @ np.diag(np.linspace(1.0, 100.0, 40)) @ q.T
        b = rng.standard_normal(40)
        x = LuSolver(m).solve(b)
        a = CsrMatrix.from_dense(m)
        assert np.linalg.norm(spmv(a, x) - b) / np.linalg.norm(b) < 1e-9


class TestSymEig:
    def test_diagonal(self):
        vals, _ = sym_eig(np.diag([3.0, 1.0, 2.0]))
        assert np.allclose(vals, [1.0, 2.0, 3.0])

    def test_dirichlet_laplacian_analytic_modes(self):
        # analytic oracle: eigenvalues (2/h)(1 - cos(j*pi*h)) for interior stencil
        n, h = 9, 0.1
        vals, vecs = sym_eig(laplacian_1d_dense(n, h))
        j = np.arange(1, n + 1)
        analytic = (2.0 / h) * (1.0 - np.cos(j * np.pi * h))
        assert np.allclose(vals, np.sort(analytic), rtol=1e-9)
        m = laplacian_1d_dense(n, h)
        assert np.linalg.norm(m @ vecs - vecs @ np.diag(vals)) / np.abs(vals).max() < 1e-9
        assert np.linalg.norm(vecs.T @ vecs - np.eye(n)) < 1e-12

    def test_zero_matrix(self):
        vals, _ = sym_eig(np.zeros((4, 4)))
        assert np.allclose(vals, 0.0)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(ValueError):
            sym_eig(np.array([[0.0, 1.0], [0.0, 0.0]]))


class TestSpectralRadius:
    def test_scaled_identity(self):
        rho = spectral_radius_estimate(lambda v: 0.5 * v, n=10, iters=50, seed=1)
        assert abs(rho - 0.5) < 1e-8

    def test_diagonal_operator_matches_dense_eig_oracle(self):
        d = np.linspace(0.1, 0.9, 9)
        expected = np.abs(np.linalg.eigvals(np.diag(d))).max()
        rho = spectral_radius_estimate(lambda v: d * v, n=9, iters=200, seed=2)
        assert abs(rho - expected) < 1e-6

    def test_expanding_operator(self):
        rho = spectral_radius_estimate(lambda v: 2.0 * v, n=5, iters=30, seed=3)
        assert abs(rho - 2.0) < 1e-10

    def test_deterministic_given_seed(self):
        f = lambda v: np.roll(v, 1) * 0.9
        r1 = spectral_radius_estimate(f, n=12, iters=77, seed=9)
        r2 = spectral_radius_estimate(f, n=12, iters=77, seed=9)
        assert r1 == r2


def test_operator_to_dense_roundtrip():
    rng = np.random.default_rng(8)
    m = rng.standard_normal((6, 6))
    captured = operator_to_dense(lambda v: m @ v, 6)
    assert np.allclose(captured, m, atol=1e-15)
