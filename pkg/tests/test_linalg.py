import numpy as np
import pytest

from fedsvd import linalg


def check_svd_invariants(m, res, recon_tol=1e-9):
    u, s, vt = res
    k = min(m.shape)
    assert u.shape == (m.shape[0], k)
    assert vt.shape == (k, m.shape[1])
    assert s.shape == (k,)
    assert np.all(s >= 0.0)
    assert np.all(np.diff(s) <= 0.0)
    assert np.max(np.abs(u.T @ u - np.eye(k))) <= 1e-10
    assert np.max(np.abs(vt @ vt.T - np.eye(k))) <= 1e-10
    recon = u @ np.diag(s) @ vt
    assert linalg.rel_frobenius_error(recon, m) <= recon_tol


def test_svd_identity():
    res = linalg.svd(np.eye(3))
    np.testing.assert_allclose(res.singular_values, [1.0, 1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(res.u @ res.vt, np.eye(3), atol=1e-12)


def test_svd_diagonal():
    res = linalg.svd(np.diag([3.0, 2.0]))
    np.testing.assert_allclose(res.singular_values, [3.0, 2.0], atol=1e-14)
    check_svd_invariants(np.diag([3.0, 2.0]), res)


def test_svd_random_5x3_against_gram_eigensolver_oracle():
    # Oracle: singular values are square roots of the eigenvalues of M^T M,
    # computed with an independent symmetric eigensolver (LAPACK).
    rng = np.random.default_rng(42)
    m = rng.standard_normal((5, 3))
    res = linalg.svd(m)
    check_svd_invariants(m, res, recon_tol=1e-10)
    gram_eigs = np.sort(np.linalg.eigvalsh(m.T @ m))[::-1]
    oracle = np.sqrt(np.clip(gram_eigs, 0.0, None))
    np.testing.assert_allclose(res.singular_values, oracle, rtol=1e-10)


@pytest.mark.parametrize("shape", [(1, 1), (2, 7), (7, 2), (6, 6), (17, 5), (4, 19)])
def test_svd_shapes_and_invariants(shape):
    rng = np.random.default_rng(hash(shape) % 2**32)
    m = rng.standard_normal(shape)
    check_svd_invariants(m, linalg.svd(m), recon_tol=1e-12)


def test_svd_rank_deficient():
    rng = np.random.default_rng(3)
    m = np.outer(rng.standard_normal(6), rng.standard_normal(4))
    res = linalg.svd(m)
    check_svd_invariants(m, res, recon_tol=1e-12)
    assert np.all(res.singular_values[1:] == 0.0)


def test_svd_all_zero():
    res = linalg.svd(np.zeros((4, 3)))
    assert np.all(res.singular_values == 0.0)
    check_svd_invariants(np.zeros((4, 3)), res)


def test_svd_sign_convention_deterministic():
    rng = np.random.default_rng(11)
    m = rng.standard_normal((6, 4))
    r1 = linalg.svd(m)
    r2 = linalg.svd(-(-m))
    assert r1.u.tobytes() == r2.u.tobytes()
    assert r1.vt.tobytes() == r2.vt.tobytes()
    for k in range(r1.vt.shape[0]):
        row = r1.vt[k]
        assert row[int(np.argmax(np.abs(row)))] >= 0.0


def test_svd_rejects_bad_input():
    with pytest.raises(ValueError):
        linalg.svd(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        linalg.svd(np.array([[np.nan, 1.0], [0.0, 2.0]]))
    with pytest.raises(ValueError):
        linalg.svd(np.ones(4))


def test_qr_thin_reconstruction_and_orthonormality():
    rng = np.random.default_rng(0)
    for shape in [(5, 5), (9, 3), (4, 1)]:
        m = rng.standard_normal(shape)
        q, r = linalg.qr_thin(m)
        assert np.max(np.abs(q.T @ q - np.eye(shape[1]))) <= 1e-12
        np.testing.assert_allclose(q @ r, m, atol=1e-12)
        assert np.allclose(r, np.triu(r))


def test_qr_thin_zero_column():
    m = np.zeros((5, 3))
    m[:, 2] = 1.0
    q, r = linalg.qr_thin(m)
    assert np.max(np.abs(q.T @ q - np.eye(3))) <= 1e-12
    np.testing.assert_allclose(q @ r, m, atol=1e-12)


# --- lowrank_svd ---


def test_lowrank_svd_zero_b():
    res = linalg.lowrank_svd(np.zeros((6, 3)), np.ones((3, 8)))
    assert np.all(res.singular_values == 0.0)


def test_lowrank_svd_unit_outer_product():
    b = np.zeros((5, 1))
    b[0, 0] = 1.0
    a = np.zeros((1, 7))
    a[0, 0] = 1.0
    res = linalg.lowrank_svd(b, a)
    np.testing.assert_allclose(res.singular_values, [1.0], atol=1e-14)
    np.testing.assert_allclose(res.u @ np.diag(res.singular_values) @ res.vt, b @ a, atol=1e-12)


def test_lowrank_svd_matches_dense_oracle():
    # Oracle: dense SVD of the explicitly formed product.
    rng = np.random.default_rng(7)
    b = rng.standard_normal((8, 4))
    a = rng.standard_normal((4, 16))
    res = linalg.lowrank_svd(b, a)
    dense = linalg.svd(b @ a)
    np.testing.assert_allclose(res.singular_values, dense.singular_values[:4], rtol=1e-9)
    recon = res.u @ np.diag(res.singular_values) @ res.vt
    assert linalg.rel_frobenius_error(recon, b @ a) <= 1e-10
    assert np.max(np.abs(res.u.T @ res.u - np.eye(4))) <= 1e-10
    assert np.max(np.abs(res.vt @ res.vt.T - np.eye(4))) <= 1e-10


def test_lowrank_svd_agreement_property():
    rng = np.random.default_rng(19)
    for _ in range(20):
        d_out = int(rng.integers(2, 30))
        d_in = int(rng.integers(2, 30))
        r = int(rng.integers(1, min(d_out, d_in) + 1))
        b = rng.standard_normal((d_out, r))
        a = rng.standard_normal((r, d_in))
        res = linalg.lowrank_svd(b, a)
        dense = linalg.svd(b @ a)
        for sv_fast, sv_dense in zip(res.singular_values, dense.singular_values):
            if sv_dense >= 1e-12 * dense.singular_values[0]:
                assert abs(sv_fast - sv_dense) <= 1e-9 * sv_dense


def test_lowrank_svd_dimension_mismatch():
    with pytest.raises(ValueError):
        linalg.lowrank_svd(np.ones((4, 3)), np.ones((2, 5)))
    with pytest.raises(ValueError):
        linalg.lowrank_svd(np.ones((2, 3)), np.ones((3, 5)))  # r > d_out


# --- spectral norm / condition number ---


def test_spectral_norm_identity_and_scaling():
    assert abs(linalg.spectral_norm(np.eye(4)) - 1.0) <= 1e-12
    assert abs(linalg.spectral_norm(2.0 * np.eye(4)) - 2.0) <= 1e-12


def test_spectral_norm_matches_svd_and_scales():
    rng = np.random.default_rng(23)
    m = rng.standard_normal((6, 9))
    top = linalg.svd(m).singular_values[0]
    assert abs(linalg.spectral_norm(m) - top) <= 1e-12 * top
    c = -3.7
    assert abs(linalg.spectral_norm(c * m) - abs(c) * top) <= 1e-12 * abs(c) * top


def test_condition_number_orthonormal_rows():
    rng = np.random.default_rng(5)
    q, _ = linalg.qr_thin(rng.standard_normal((12, 4)))
    assert abs(linalg.condition_number(q.T) - 1.0) <= 1e-10


def test_condition_number_diagonal():
    assert abs(linalg.condition_number(np.diag([4.0, 1.0])) - 4.0) <= 1e-12


def test_condition_number_rank_one_and_zero():
    assert linalg.condition_number(np.outer(np.ones(3), np.ones(5))) == 1.0
    with pytest.raises(ValueError):
        linalg.condition_number(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        linalg.condition_number(np.eye(3), rank_tol=0.0)


def test_condition_number_kaiming_exceeds_one():
    # Random Kaiming-uniform 8x64 matrices are ill-conditioned with
    # overwhelming probability.
    bound = np.sqrt(3.0 / 64.0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-bound, bound, size=(8, 64))
        assert linalg.condition_number(a) > 1.0 + 1e-6


def test_condition_number_scale_invariance():
    rng = np.random.default_rng(31)
    m = rng.standard_normal((7, 5))
    k = linalg.condition_number(m)
    for c in [2.0, -0.125, 1e3]:
        assert abs(linalg.condition_number(c * m) - k) <= 1e-10 * k


# --- eig_sym ---


def test_eig_sym_identity():
    w, v = linalg.eig_sym(np.eye(2))
    np.testing.assert_allclose(w, [1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(v @ v.T, np.eye(2), atol=1e-12)


def test_eig_sym_analytic_2x2():
    w, v = linalg.eig_sym(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-12)


def test_eig_sym_residual_and_order():
    rng = np.random.default_rng(13)
    for n in [1, 2, 5, 16, 32]:
        g = rng.standard_normal((n, n))
        m = (g + g.T) / 2.0
        w, v = linalg.eig_sym(m)
        assert np.all(np.diff(w) <= 1e-12)
        for i in range(n):
            resid = m @ v[:, i] - w[i] * v[:, i]
            assert np.max(np.abs(resid)) <= 1e-8
        # oracle: independent LAPACK eigensolver
        np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(m))[::-1], atol=1e-10)


def test_eig_sym_psd_congruence():
    # H = A M A^T is PSD whenever M is PSD.
    rng = np.random.default_rng(17)
    for _ in range(20):
        a = rng.standard_normal((4, 9))
        g = rng.standard_normal((9, 9))
        m = g @ g.T
        w, _ = linalg.eig_sym(a @ m @ a.T)
        assert np.all(w >= -1e-10)


def test_eig_sym_rejects_asymmetric():
    with pytest.raises(ValueError):
        linalg.eig_sym(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        linalg.eig_sym(np.ones((2, 3)))


def test_eig_sym_zero_matrix():
    w, v = linalg.eig_sym(np.zeros((3, 3)))
    assert np.all(w == 0.0)
    np.testing.assert_allclose(v, np.eye(3))
