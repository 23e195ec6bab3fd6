import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from safeswitch.errors import DimensionMismatch, NotPositiveDefinite, Unstable
from safeswitch.linalg import (
    CommonLyapunovCertificate,
    certified_power_series,
    contraction_factor,
    find_common_lyapunov,
    lyapunov_residual,
    noise_gramian,
    riccati_residual,
    solve_dare,
    solve_discrete_lyapunov,
    spd_sqrt,
    spectral_radius,
    weighted_matrix_norm,
    weighted_operator_norm,
)

from conftest import random_controllable, random_schur, random_spd


class TestSpdSqrt:
    def test_identity(self):
        np.testing.assert_allclose(spd_sqrt(np.eye(3)), np.eye(3), atol=1e-14)

    def test_diagonal(self):
        np.testing.assert_allclose(spd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]),
                                   atol=1e-14)

    def test_two_by_two(self):
        # eigenpairs (3, [1,1]/sqrt2) and (1, [1,-1]/sqrt2)
        a, b = (math.sqrt(3) + 1) / 2, (math.sqrt(3) - 1) / 2
        S = spd_sqrt(np.array([[2.0, 1.0], [1.0, 2.0]]))
        np.testing.assert_allclose(S, [[a, b], [b, a]], atol=1e-12)
        np.testing.assert_allclose(S @ S, [[2, 1], [1, 2]], atol=1e-10)

    def test_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            spd_sqrt(np.diag([1.0, -1.0]))


class TestWeightedNorms:
    def test_matrix_norm_identity(self):
        assert weighted_matrix_norm(np.eye(3), np.eye(3)) == pytest.approx(1.0)

    def test_matrix_norm_self(self, rng):
        Q = random_spd(rng, 5)
        assert weighted_matrix_norm(Q, Q) == pytest.approx(1.0, rel=1e-12)

    def test_matrix_norm_diag(self):
        assert weighted_matrix_norm(np.diag([8.0, 2.0]), np.diag([2.0, 2.0])) == pytest.approx(4.0)

    def test_matrix_norm_dimension(self):
        with pytest.raises(DimensionMismatch):
            weighted_matrix_norm(np.eye(2), np.eye(3))

    def test_sup_characterization(self, rng):
        Q, P = random_spd(rng, 4), random_spd(rng, 4)
        c = weighted_matrix_norm(Q, P)
        V = rng.standard_normal((1000, 4))
        vq = np.einsum("ki,ij,kj->k", V, Q, V)
        vp = np.einsum("ki,ij,kj->k", V, P, V)
        assert np.all(c * vp >= vq * (1 - 1e-12))
        # the supremum is attained at the top generalized eigenvector
        lam, vecs = scipy.linalg.eigh(Q, P)
        v = vecs[:, -1]
        assert (v @ Q @ v) / (v @ P @ v) == pytest.approx(c, rel=1e-10)

    def test_operator_norm_identity(self, rng):
        assert weighted_operator_norm(np.eye(3), random_spd(rng, 3)) == pytest.approx(1.0)

    def test_operator_norm_scalar_multiple(self, rng):
        assert weighted_operator_norm(0.5 * np.eye(3), random_spd(rng, 3)) == pytest.approx(0.5)

    def test_operator_norm_nilpotent(self):
        Mx = np.array([[0.0, 1.0], [0.0, 0.0]])
        assert weighted_operator_norm(Mx, np.diag([4.0, 1.0])) == pytest.approx(2.0)


class TestLyapunov:
    def test_nilpotent(self, rng):
        S = random_spd(rng, 3)
        np.testing.assert_allclose(solve_discrete_lyapunov(np.zeros((3, 3)), S), S)

    def test_scalar(self):
        X = solve_discrete_lyapunov(np.array([[0.5]]), np.array([[1.0]]))
        assert X[0, 0] == pytest.approx(4 / 3, rel=1e-14)

    def test_scaled_identity(self):
        X = solve_discrete_lyapunov(0.5 * np.eye(2), np.eye(2))
        np.testing.assert_allclose(X, 4 / 3 * np.eye(2), rtol=1e-14)

    def test_unstable(self):
        with pytest.raises(Unstable):
            solve_discrete_lyapunov(np.diag([1.0, 0.5]), np.eye(2))

    def test_matches_scipy(self, rng):
        A = random_schur(rng, 6, 0.97)
        S = random_spd(rng, 6)
        ref = scipy.linalg.solve_discrete_lyapunov(A.T, S)
        np.testing.assert_allclose(solve_discrete_lyapunov(A, S), ref, rtol=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.floats(0.0, 0.99), st.integers(0, 2**32 - 1))
    def test_residual_property(self, n, radius, seed):
        rng = np.random.default_rng(seed)
        A = random_schur(rng, n, radius) if radius > 0 else np.zeros((n, n))
        S = random_spd(rng, n)
        X = solve_discrete_lyapunov(A, S)
        assert lyapunov_residual(A, X, S) <= 1e-10
        assert np.linalg.eigvalsh(X)[0] > 0
        if radius > 0:
            assert contraction_factor(A, X) < 1


class TestContraction:
    def test_zero(self, rng):
        assert contraction_factor(np.zeros((3, 3)), random_spd(rng, 3)) == 0.0

    def test_scalar(self):
        assert contraction_factor(np.array([[0.5]]), np.array([[4 / 3]])) == pytest.approx(0.25)

    def test_scaled_identity(self):
        assert contraction_factor(0.9 * np.eye(3), np.eye(3)) == pytest.approx(0.81)


def _scalar_dare_oracle(a, b, q, r):
    p = q
    for _ in range(100_000):
        p_new = a * a * p - (a * b * p) ** 2 / (r + b * b * p) + q
        if abs(p_new - p) < 1e-14:
            break
        p = p_new
    return p_new, -a * b * p_new / (r + b * b * p_new)


class TestDare:
    def test_no_dynamics(self):
        P, K = solve_dare(np.zeros((2, 2)), np.eye(2), np.eye(2), np.eye(2))
        np.testing.assert_allclose(P, np.eye(2), atol=1e-14)
        np.testing.assert_allclose(K, np.zeros((2, 2)), atol=1e-14)

    def test_scalar(self):
        p, k = _scalar_dare_oracle(0.9, 1.0, 1.0, 1.0)
        P, K = solve_dare([[0.9]], [[1.0]], [[1.0]], [[1.0]])
        assert P[0, 0] == pytest.approx(p, rel=1e-12)
        assert K[0, 0] == pytest.approx(k, rel=1e-12)

    def test_unstable_open_loop(self):
        p, k = _scalar_dare_oracle(1.5, 1.0, 1.0, 1.0)
        P, K = solve_dare([[1.5]], [[1.0]], [[1.0]], [[1.0]])
        assert P[0, 0] == pytest.approx(p, rel=1e-10)
        assert abs(1.5 + K[0, 0]) < 1

    @pytest.mark.parametrize("seed", range(10))
    def test_random_controllable(self, seed):
        rng = np.random.default_rng(seed)
        A, B = random_controllable(rng, 4, 2)
        Q, R = random_spd(rng, 4), random_spd(rng, 2)
        P, K = solve_dare(A, B, Q, R)
        assert spectral_radius(A + B @ K) < 1
        assert riccati_residual(A, B, Q, R, P) <= 1e-10
        np.testing.assert_allclose(P, scipy.linalg.solve_discrete_are(A, B, Q, R), rtol=1e-7)


class TestGramian:
    def test_zero(self, rng):
        W = random_spd(rng, 3)
        np.testing.assert_allclose(noise_gramian(np.zeros((3, 3)), W), W)

    def test_scalar(self):
        assert noise_gramian([[0.5]], [[1.0]])[0, 0] == pytest.approx(4 / 3)

    def test_series(self, rng):
        A = random_schur(rng, 3, 0.8)
        W = random_spd(rng, 3)
        S, Ak = np.zeros((3, 3)), np.eye(3)
        for _ in range(200):
            S += Ak @ W @ Ak.T
            Ak = A @ Ak
        G = noise_gramian(A, W)
        np.testing.assert_allclose(G, S, atol=1e-8)
        assert np.linalg.eigvalsh(G - W)[0] >= -1e-12


class TestSpectralRadius:
    def test_identity(self):
        assert spectral_radius(np.eye(4)) == pytest.approx(1.0)

    def test_diag(self):
        assert spectral_radius(np.diag([0.3, -0.8])) == pytest.approx(0.8)

    def test_rotation(self):
        th = 0.7
        Rm = 0.95 * np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
        assert spectral_radius(Rm) == pytest.approx(0.95, abs=1e-12)


class TestCommonLyapunov:
    def test_equal_loops(self):
        c = find_common_lyapunov(0.5 * np.eye(2), 0.5 * np.eye(2), rho_margin=0.05)
        np.testing.assert_allclose(c.P, 4 / 3 * np.eye(2))
        assert c.rho == pytest.approx(0.30)
        assert c.t == 1

    def test_slow_fallback(self):
        # 0.81**t < 0.01  <=>  t > log(0.01)/log(0.81) = 21.85
        c = find_common_lyapunov(0.1 * np.eye(2), 0.9 * np.eye(2), rho_margin=0.0)
        assert c.rho == pytest.approx(0.01)
        assert c.t == math.ceil(math.log(0.01) / math.log(0.81)) == 22

    def test_unstable(self):
        with pytest.raises(Unstable):
            find_common_lyapunov(1.01 * np.eye(2), 0.5 * np.eye(2))

    @pytest.mark.parametrize("seed", range(8))
    def test_self_check(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(2, 7)
        A1, A0 = random_schur(rng, n), random_schur(rng, n, 0.9)
        c = find_common_lyapunov(A1, A0)
        assert isinstance(c, CommonLyapunovCertificate)
        assert c.violations(A1, A0) == []
        if c.t > 1:
            # minimality of the dwell time
            assert contraction_factor(np.linalg.matrix_power(A0, c.t - 1), c.P) >= c.rho


class TestPowerSeries:
    def test_scalar_geometric(self):
        # sum 0.5^s = 2 for a scalar loop; the tail bound keeps it above 2
        s = certified_power_series([[0.5]], [[1.0]], 0.25, [[4 / 3]])
        assert 2.0 <= s <= 2.0 + 1e-11

    def test_upper_bounds_truncated_sum(self, rng):
        A = random_schur(rng, 4, 0.7)
        Q = random_spd(rng, 4)
        c = find_common_lyapunov(A, A)
        s = certified_power_series(A, Q, c.rho, c.P)
        partial = sum(weighted_operator_norm(np.linalg.matrix_power(A, k), Q) for k in range(400))
        assert partial <= s <= partial + 1e-10
