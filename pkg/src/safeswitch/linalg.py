"""Dense linear algebra for stability certificates.

Lyapunov and Riccati solvers, weighted norms, noise Gramians and the
common-Lyapunov search used by the bound calculators.  Everything here is a
pure function of its inputs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    DwellTimeOverflow,
    NoConvergence,
    NotPositiveDefinite,
    NotStabilizable,
    Unstable,
)

TAU_SYM = 1e-10
TAU_PSD = 1e-9
TAU_SPEC = 1e-9
TAU_LYAP = 1e-10

_MAX_DOUBLING = 100


def _square(A, name="matrix"):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def symmetrize(P):
    P = _square(P)
    return 0.5 * (P + P.T)


def as_spd(P, name="matrix"):
    """Symmetrize ``P`` and check positive definiteness."""
    P = _square(P, name)
    asym = np.max(np.abs(P - P.T)) if P.size else 0.0
    scale = max(1.0, np.max(np.abs(P)))
    if asym > TAU_SYM * scale:
        raise NotPositiveDefinite(f"{name} is not symmetric (asymmetry {asym:.3e})")
    P = 0.5 * (P + P.T)
    lam_min = np.linalg.eigvalsh(P)[0]
    if lam_min <= TAU_PSD:
        raise NotPositiveDefinite(
            f"{name} is not positive definite (min eigenvalue {lam_min:.3e})")
    return P


def _same_dim(*mats):
    n = mats[0].shape[0]
    for M in mats[1:]:
        if M.shape[0] != n:
            raise DimensionMismatch(
                f"dimension mismatch: {[m.shape for m in mats]}")


def spectral_radius(A):
    A = _square(A)
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def spd_sqrt(P):
    """Symmetric positive definite square root of ``P``."""
    P = as_spd(P)
    lam, V = np.linalg.eigh(P)
    S = (V * np.sqrt(lam)) @ V.T
    return 0.5 * (S + S.T)


def spd_inv_sqrt(P):
    P = as_spd(P)
    lam, V = np.linalg.eigh(P)
    S = (V / np.sqrt(lam)) @ V.T
    return 0.5 * (S + S.T)


def weighted_matrix_norm(Q, P):
    """Largest eigenvalue of ``P^{-1/2} Q P^{-1/2}``.

    Equals ``sup ||v||_Q^2`` over vectors with ``||v||_P = 1``.  ``Q`` only
    needs to be symmetric positive semidefinite.
    """
    Q = symmetrize(Q)
    P = as_spd(P, "P")
    _same_dim(Q, P)
    Pi = spd_inv_sqrt(P)
    return float(np.linalg.eigvalsh(Pi @ Q @ Pi)[-1])


def weighted_operator_norm(Mx, Q):
    """Induced 2-norm of ``Q^{1/2} Mx Q^{-1/2}``."""
    Mx = _square(Mx, "Mx")
    Q = as_spd(Q, "Q")
    _same_dim(Mx, Q)
    return float(np.linalg.norm(spd_sqrt(Q) @ Mx @ spd_inv_sqrt(Q), 2))


def contraction_factor(A, P):
    """Smallest ``rho`` with ``A^T P A <= rho P``."""
    A = _square(A, "A")
    P = as_spd(P, "P")
    _same_dim(A, P)
    return weighted_operator_norm(A, P) ** 2


def lyapunov_residual(A, X, S):
    return float(np.linalg.norm(A.T @ X @ A - X + S, "fro"))


def _doubling(A, S):
    # X = sum_k (A^k)^T S A^k, summed in O(log) squarings.
    X = S.copy()
    Ak = A.copy()
    for _ in range(_MAX_DOUBLING):
        step = Ak.T @ X @ Ak
        X = X + step
        Ak = Ak @ Ak
        if np.max(np.abs(step)) <= 1e-17 * max(1.0, np.max(np.abs(X))):
            return 0.5 * (X + X.T)
        if not np.all(np.isfinite(X)):
            break
    raise NoConvergence("Lyapunov doubling iteration did not converge")


def solve_discrete_lyapunov(A, S, tol=TAU_LYAP, max_refine=5):
    """Solve ``A^T X A - X + S = 0`` for Schur-stable ``A``.

    Uses the squared-doubling series followed by residual refinement until
    the Frobenius residual drops below ``tol``.
    """
    A = _square(A, "A")
    S = symmetrize(S)
    _same_dim(A, S)
    rho = spectral_radius(A)
    if rho >= 1.0 - TAU_SPEC:
        raise Unstable(f"spectral radius {rho:.6g} >= 1", rho)
    X = _doubling(A, S)
    res = lyapunov_residual(A, X, S)
    for _ in range(max_refine):
        if res <= tol:
            break
        E = _doubling(A, A.T @ X @ A - X + S)
        X = 0.5 * ((X + E) + (X + E).T)
        new_res = lyapunov_residual(A, X, S)
        if new_res >= res:
            res = new_res
            break
        res = new_res
    if res > tol:
        raise NoConvergence(f"Lyapunov residual {res:.3e} exceeds {tol:.1e}")
    return X


def noise_gramian(A0, W):
    """``sum_t A0^t W (A0^t)^T``, the stationary covariance of the fallback loop."""
    A0 = _square(A0, "A0")
    W = as_spd(W, "W")
    _same_dim(A0, W)
    return solve_discrete_lyapunov(A0.T, W)


def riccati_residual(A, B, Q, R, P):
    BtP = B.T @ P
    G = R + BtP @ B
    res = A.T @ P @ A - P + Q - A.T @ P @ B @ np.linalg.solve(G, BtP @ A)
    return float(np.linalg.norm(res, "fro"))


def dare_gain(A, B, R, P):
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def solve_dare(A, B, Q, R, tol=TAU_LYAP, max_iter=200):
    """Stabilizing solution of the discrete algebraic Riccati equation.

    Returns ``(P_star, K_star)`` with ``K_star = -(R + B^T P B)^{-1} B^T P A``
    so that ``u = K_star x`` is the optimal feedback.  The structured doubling
    algorithm produces the initial solution; Newton-Kleinman steps polish the
    residual.
    """
    A = _square(A, "A")
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"B has {B.shape[0]} rows, A is {A.shape}")
    Q = as_spd(Q, "Q")
    R = as_spd(R, "R")
    _same_dim(A, Q)
    if R.shape[0] != B.shape[1]:
        raise DimensionMismatch(f"R is {R.shape}, B has {B.shape[1]} columns")
    n = A.shape[0]
    I = np.eye(n)

    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    converged = False
    for _ in range(max_iter):
        Minv = np.linalg.inv(I + Gk @ Hk)
        A_next = Ak @ Minv @ Ak
        G_next = Gk + Ak @ Minv @ Gk @ Ak.T
        H_next = Hk + Ak.T @ Hk @ Minv @ Ak
        if not np.all(np.isfinite(H_next)):
            break
        delta = np.max(np.abs(H_next - Hk))
        Ak, Gk, Hk = A_next, 0.5 * (G_next + G_next.T), 0.5 * (H_next + H_next.T)
        if delta <= 1e-15 * max(1.0, np.max(np.abs(Hk))):
            converged = True
            break
    if not converged:
        raise NoConvergence("structured doubling for the Riccati equation failed")

    P = Hk
    K = dare_gain(A, B, R, P)
    if spectral_radius(A + B @ K) >= 1.0 - TAU_SPEC:
        raise NotStabilizable("Riccati solution is not stabilizing")
    res = riccati_residual(A, B, Q, R, P)
    for _ in range(10):
        if res <= tol:
            break
        Acl = A + B @ K
        P_new = solve_discrete_lyapunov(Acl, Q + K.T @ R @ K, tol=min(tol, 1e-12) * 10)
        K_new = dare_gain(A, B, R, P_new)
        new_res = riccati_residual(A, B, Q, R, P_new)
        if new_res >= res:
            break
        P, K, res = P_new, K_new, new_res
    if res > tol:
        raise NoConvergence(f"Riccati residual {res:.3e} exceeds {tol:.1e}")
    return P, K


@dataclass(frozen=True)
class StabilityCertificate:
    """Quadratic certificate ``(P0, rho0)`` for the fallback loop."""

    P0: np.ndarray
    rho0: float

    def violations(self, A0, S=None, tol_lyap=1e-8):
        """Return a list of failed checks; empty when the certificate holds.

        ``S`` is the forcing term of the Lyapunov equation; when omitted the
        residual check is skipped.
        """
        out = []
        if not 0.0 < self.rho0 < 1.0:
            out.append(f"rho0={self.rho0} not in (0, 1)")
        gap = self.rho0 * self.P0 - A0.T @ self.P0 @ A0
        lam = float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[0])
        if lam < -TAU_PSD:
            out.append(f"A0^T P0 A0 <= rho0 P0 fails (min eigenvalue {lam:.3e})")
        if S is not None:
            res = lyapunov_residual(A0, self.P0, S)
            if res > tol_lyap:
                out.append(f"Lyapunov residual {res:.3e} > {tol_lyap:.1e}")
        return out


@dataclass(frozen=True)
class CommonLyapunovCertificate:
    """``(P, rho, t)`` certifying both ``A1`` and ``A0**t``."""

    P: np.ndarray
    rho: float
    t: int

    def violations(self, A1, A0):
        out = []
        if not 0.0 < self.rho < 1.0:
            out.append(f"rho={self.rho} not in (0, 1)")
        if self.t < 1:
            out.append(f"dwell time t={self.t} < 1")
        A0t = np.linalg.matrix_power(A0, self.t)
        for name, M in (("A1", A1), ("A0^t", A0t)):
            gap = self.rho * self.P - M.T @ self.P @ M
            lam = float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[0])
            if lam < -TAU_PSD:
                out.append(f"{name}^T P {name} <= rho P fails (min eigenvalue {lam:.3e})")
        return out

    def with_rho(self, rho):
        """Same certificate with a larger contraction factor (still valid)."""
        if rho < self.rho:
            raise ValueError("rho can only be raised")
        return CommonLyapunovCertificate(self.P, float(rho), self.t)


def find_common_lyapunov(A1, A0, rho_margin=0.01, t_max=10**6):
    """Common quadratic Lyapunov function for ``A1`` and ``A0**t``.

    ``P`` solves ``A1^T P A1 - P + I = 0``; ``rho`` is the contraction factor
    of ``A1`` in that metric plus ``rho_margin`` (capped below one); ``t`` is
    the smallest dwell time whose ``t``-step fallback map contracts strictly
    faster than ``rho``.
    """
    A1 = _square(A1, "A1")
    A0 = _square(A0, "A0")
    _same_dim(A1, A0)
    for name, M in (("A1", A1), ("A0", A0)):
        r = spectral_radius(M)
        if r >= 1.0 - TAU_SPEC:
            raise Unstable(f"{name} is not Schur-stable (spectral radius {r:.6g})", r)
    n = A1.shape[0]
    P = solve_discrete_lyapunov(A1, np.eye(n))
    rho = min(1.0 - TAU_SPEC, contraction_factor(A1, P) + rho_margin)

    S = spd_sqrt(P)
    Si = spd_inv_sqrt(P)
    At = np.eye(n)
    for t in range(1, t_max + 1):
        At = At @ A0
        if np.linalg.norm(S @ At @ Si, 2) ** 2 < rho:
            return CommonLyapunovCertificate(P, float(rho), t)
    raise DwellTimeOverflow(f"no dwell time t <= {t_max} satisfies the common Lyapunov condition")


def certified_power_series(A, Q, rho, P, tol=1e-12, max_terms=10**6):
    """Upper bound on ``sum_{s>=0} ||A^s||_Q`` (weighted operator norm).

    Terms are summed exactly until the remaining tail, bounded through the
    certificate ``A^T P A <= rho P``, falls below ``tol``; that tail bound is
    then added so the result never underestimates the series.
    """
    A = _square(A, "A")
    Q = as_spd(Q, "Q")
    P = as_spd(P, "P")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    # ||M||_Q <= kappa ||M||_P with kappa^2 = ||P||_Q ||Q||_P
    kappa = np.sqrt(weighted_matrix_norm(P, Q) * weighted_matrix_norm(Q, P))
    r = np.sqrt(rho)
    Sq = spd_sqrt(Q)
    Sqi = spd_inv_sqrt(Q)
    M = np.eye(A.shape[0])
    total = 0.0
    for s in range(max_terms):
        tail = kappa * r**s / (1.0 - r)
        if tail < tol:
            return total + tail
        total += np.linalg.norm(Sq @ M @ Sqi, 2)
        M = M @ A
    raise NoConvergence("power series did not reach its tolerance")
