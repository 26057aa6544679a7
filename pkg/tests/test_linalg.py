import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixrank import NonFiniteError, ValidationError, frob_energy, pinv, svd, truncate
from mixrank.errors import DimensionMismatchError


def rand(seed, rows, cols):
    return np.random.default_rng(seed).standard_normal((rows, cols))


class TestSvd:
    def test_identity_spectrum(self):
        res = svd(np.eye(3))
        assert np.allclose(res.s, [1.0, 1.0, 1.0])

    def test_rank_one_outer_product(self):
        a = np.array([1.0, 2.0, 2.0])
        b = np.array([3.0, 4.0])
        res = svd(np.outer(a, b))
        assert res.s[0] == pytest.approx(np.linalg.norm(a) * np.linalg.norm(b))
        assert np.all(res.s[1:] < 1e-12)

    def test_multiply_back(self):
        m = rand(0, 8, 6)
        res = svd(m)
        assert np.linalg.norm(res.reconstruct() - m) < 1e-10

    def test_orthonormal_factors(self):
        res = svd(rand(1, 9, 5))
        assert np.allclose(res.u.T @ res.u, np.eye(5), atol=1e-8)
        assert np.allclose(res.vt @ res.vt.T, np.eye(5), atol=1e-8)

    def test_sigma_sorted_nonnegative(self):
        res = svd(rand(2, 7, 7))
        assert np.all(np.diff(res.s) <= 0)
        assert np.all(res.s >= 0)

    def test_rejects_nan(self):
        m = np.ones((3, 3))
        m[1, 1] = np.nan
        with pytest.raises(NonFiniteError):
            svd(m)

    def test_rejects_1d(self):
        with pytest.raises(DimensionMismatchError):
            svd(np.ones(4))


class TestTruncate:
    def test_full_rank_noop(self):
        m = rand(3, 5, 5)
        res = svd(m)
        kept = truncate(res, 5)
        assert np.allclose(kept.reconstruct(), m)

    def test_diag_residual(self):
        res = truncate(svd(np.diag([3.0, 2.0, 1.0])), 2)
        residual = np.diag([3.0, 2.0, 1.0]) - res.reconstruct()
        assert np.sum(residual**2) == pytest.approx(1.0)

    def test_tail_energy_oracle(self):
        m = rand(4, 6, 6)
        res = svd(m)
        for r in range(1, 7):
            residual = m - truncate(res, r).reconstruct()
            tail = np.sum(res.s[r:] ** 2)
            assert np.sum(residual**2) == pytest.approx(tail, rel=1e-9, abs=1e-12)

    def test_rank_out_of_range(self):
        res = svd(rand(5, 4, 4))
        for r in (0, 5):
            with pytest.raises(ValidationError):
                truncate(res, r)

    def test_truncated_matrix_has_r_nonzero_singulars(self):
        m = rand(6, 8, 8)
        for r in (1, 3, 5):
            rebuilt = truncate(svd(m), r).reconstruct()
            s = svd(rebuilt).s
            assert np.sum(s > 1e-10 * s[0]) == r


class TestPinv:
    def test_identity(self):
        assert np.allclose(pinv(np.eye(4)), np.eye(4))

    def test_diagonal_with_zero(self):
        assert np.allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))

    def test_moore_penrose_conditions(self):
        m = rand(7, 7, 4)
        x = pinv(m)
        assert np.allclose(m @ x @ m, m, atol=1e-8)
        assert np.allclose(x @ m @ x, x, atol=1e-8)
        assert np.allclose((m @ x).T, m @ x, atol=1e-8)
        assert np.allclose((x @ m).T, x @ m, atol=1e-8)

    def test_rcond_range(self):
        for bad in (0.0, 1.0, -0.5):
            with pytest.raises(ValidationError):
                pinv(np.eye(2), rcond=bad)


class TestFrobEnergy:
    def test_zero(self):
        assert frob_energy(np.zeros((3, 4))) == 0.0

    def test_diag_hand_value(self):
        assert frob_energy(np.diag([3.0, 4.0])) == pytest.approx(25.0)

    def test_matches_singular_values(self):
        m = rand(8, 6, 9)
        assert frob_energy(m) == pytest.approx(np.sum(svd(m).s ** 2), rel=1e-9)


@settings(deadline=None, max_examples=60)
@given(seed=st.integers(0, 10**6), rows=st.integers(2, 12), cols=st.integers(2, 12),
       data=st.data())
def test_eckart_young_tail_identity(seed, rows, cols, data):
    m = rand(seed, rows, cols)
    res = svd(m)
    r = data.draw(st.integers(1, min(rows, cols)))
    residual = m - truncate(res, r).reconstruct()
    tail = np.sum(res.s[r:] ** 2)
    assert np.sum(residual**2) == pytest.approx(tail, rel=1e-9, abs=1e-12)


@settings(deadline=None, max_examples=40)
@given(seed=st.integers(0, 10**6), rows=st.integers(2, 10), cols=st.integers(2, 10))
def test_frob_energy_orthogonal_invariance(seed, rows, cols):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((rows, cols))
    ql, _ = np.linalg.qr(rng.standard_normal((rows, rows)))
    qr, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    base = frob_energy(m)
    assert frob_energy(ql @ m) == pytest.approx(base, rel=1e-9)
    assert frob_energy(m @ qr) == pytest.approx(base, rel=1e-9)
