"""Closed-form performance and safety bounds for the switched controller.

Three families are evaluated here:

* the cost cap, valid for any primary gain (stable or not);
* the Gaussian-noise bounds on the fourth moment, the fallback probability
  and the performance gap, valid once the threshold exceeds ``a0 * ||K1-K0||``;
* their counterparts for noise with a finite fourth moment only.

The threshold-validity condition is reported through flags rather than
exceptions so that sweeps can cross uncertified regions.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateGains, Unstable
from .linalg import (
    TAU_SPEC,
    CommonLyapunovCertificate,
    StabilityCertificate,
    as_spd,
    certified_power_series,
    contraction_factor,
    find_common_lyapunov,
    noise_gramian,
    solve_discrete_lyapunov,
    spectral_radius,
    weighted_matrix_norm,
)

# The escape-probability argument needs rho > 1/4.
RHO_FLOOR = 0.2500001


def _norm2(M):
    return float(np.linalg.norm(np.atleast_2d(M), 2))


def certify_fallback(A, B, K0, Q, R, margin=0.01):
    """Lyapunov certificate ``(P0, rho0)`` for the fallback loop ``A + B K0``.

    ``P0`` solves the Lyapunov equation forced by ``Q + K0^T R K0``;
    ``rho0`` is its contraction factor plus ``margin``, kept below one.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    K0 = np.atleast_2d(np.asarray(K0, dtype=float))
    A0 = A + B @ K0
    r = spectral_radius(A0)
    if r >= 1.0 - TAU_SPEC:
        raise Unstable(f"fallback gain is not stabilizing: rho(A + B K0) = {r:.6g}", r)
    P0 = solve_discrete_lyapunov(A0, Q + K0.T @ R @ K0)
    rho0 = min(contraction_factor(A0, P0) + margin, 1.0 - TAU_SPEC)
    return StabilityCertificate(P0, float(rho0))


def lemma1_ev_bound(cert0, B, W, M):
    """Uniform bound on ``E x_k^T P0 x_k`` under the switched controller."""
    P0, rho0 = cert0.P0, cert0.rho0
    num = M**2 * _norm2(B) ** 2 * _norm2(P0) + float(np.trace(W @ P0))
    return 4.0 * (1.0 + rho0) * num / (1.0 - rho0) ** 2


def theorem1_cost_cap(cert0, B, R, W, M):
    """Upper bound on the LQ cost that holds whatever the primary gain is."""
    P0, rho0 = cert0.P0, cert0.rho0
    k = 8.0 * (1.0 + rho0) / (1.0 - rho0) ** 2
    return (k * _norm2(B) ** 2 * _norm2(P0) + 2.0 * _norm2(R)) * M**2 \
        + k * float(np.trace(W @ P0))


def theorem2_tail_constants(C1, C2, varrho):
    """Tail envelope of an exponentially weighted sum of sub-Gaussian terms.

    Given ``P(X_i >= a) <= C1 exp(-C2 a^2)``, returns ``(C1t, C2t, a_min)``
    such that ``P(S_k >= a) <= C1t exp(-C2t a^2)`` for every ``a >= a_min``.
    """
    if C1 <= 0 or C2 <= 0 or not 0 < varrho < 1:
        raise ValueError("need C1, C2 > 0 and 0 < varrho < 1")
    s = math.sqrt(varrho)
    C1t = 2.0 * C1 / min(1.0 / varrho - 1.0, 1.0)
    C2t = (1.0 - s) ** 2 * C2
    a_min = 2.0 / (math.sqrt(C2) * (1.0 - s))
    return C1t, C2t, a_min


@dataclass(frozen=True)
class GaussianBoundInputs:
    """Certificates and system data shared by the gap and moment bounds."""

    cert0: StabilityCertificate
    certC: CommonLyapunovCertificate
    Wtilde: np.ndarray
    Kdiff: float
    M: float
    n: int
    B: np.ndarray
    R: np.ndarray
    W: np.ndarray
    Q1: np.ndarray
    A1: np.ndarray
    Delta1: np.ndarray
    Delta2: np.ndarray
    dwell_ok: bool = True

    def with_M(self, M):
        return replace(self, M=float(M))


@dataclass(frozen=True)
class HeavyTailBoundInputs:
    base: GaussianBoundInputs
    mu4: float

    def __post_init__(self):
        floor = float(np.trace(self.base.W)) ** 2 / self.base.n
        if not math.isfinite(self.mu4) or self.mu4 < floor * (1 - 1e-12):
            raise ValueError(f"mu4={self.mu4} is below the floor (tr W)^2/n = {floor}")

    def with_M(self, M):
        return HeavyTailBoundInputs(self.base.with_M(M), self.mu4)


def build_inputs(A, B, Q, R, W, K0, K1, M, t=None, rho_margin=0.01, cert0=None):
    """Assemble certificates and derived matrices for the gap bounds.

    With ``t=None`` the dwell time comes from the common-Lyapunov search.
    A user-supplied ``t`` is checked against the common-Lyapunov condition
    and ``dwell_ok`` records the outcome.  The contraction factor is raised
    to at least ``RHO_FLOOR``, which keeps the certificate valid.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    K0 = np.atleast_2d(np.asarray(K0, dtype=float))
    K1 = np.atleast_2d(np.asarray(K1, dtype=float))
    Q, R, W = as_spd(Q, "Q"), as_spd(R, "R"), as_spd(W, "W")
    A0 = A + B @ K0
    A1 = A + B @ K1
    if cert0 is None:
        cert0 = certify_fallback(A, B, K0, Q, R, margin=rho_margin)
    certC = find_common_lyapunov(A1, A0, rho_margin=rho_margin)
    if certC.rho < RHO_FLOOR:
        certC = certC.with_rho(RHO_FLOOR)
    dwell_ok = True
    if t is not None and int(t) != certC.t:
        certC = CommonLyapunovCertificate(certC.P, certC.rho, int(t))
        dwell_ok = not certC.violations(A1, A0)
    return GaussianBoundInputs(
        cert0=cert0,
        certC=certC,
        Wtilde=noise_gramian(A0, W),
        Kdiff=_norm2(K1 - K0),
        M=float(M),
        n=A.shape[0],
        B=B,
        R=R,
        W=W,
        Q1=Q + K1.T @ R @ K1,
        A1=A1,
        Delta1=B @ (K0 - K1),
        Delta2=K0.T @ R @ K0 - K1.T @ R @ K1,
        dwell_ok=dwell_ok,
    )


def _norm_consts(inp):
    P = inp.certC.P
    Wt = inp.Wtilde
    return {
        "Wt_norm": _norm2(Wt),
        "P_norm": _norm2(P),
        "Pinv_norm": _norm2(np.linalg.inv(P)),
        "trWtP": float(np.trace(Wt @ P)),
        "P_Wtinv": weighted_matrix_norm(P, np.linalg.inv(Wt)),
        "P0_Wtinv": weighted_matrix_norm(inp.cert0.P0, np.linalg.inv(Wt)),
        "P0_P": weighted_matrix_norm(inp.cert0.P0, P),
        "P_P0": weighted_matrix_norm(P, inp.cert0.P0),
    }


def escape_threshold(inp):
    """``a0``: smallest normalised threshold for which the Gaussian bounds hold."""
    c = _norm_consts(inp)
    rho = inp.certC.rho
    return math.sqrt(8 * inp.n * c["Wt_norm"] * c["P_norm"] * c["Pinv_norm"]) \
        / (1 - rho**0.25)


def escape_probability(inp, a):
    """Gaussian escape function: bounds ``P(||x_j|| >= a)`` along the collapsed sequence."""
    c = _norm_consts(inp)
    rho, n = inp.certC.rho, inp.n
    expo = (1 - rho**0.25) ** 2 / (2 * n * c["Wt_norm"] * c["P_norm"] * c["Pinv_norm"])
    return 4 * n / (rho**-0.5 - 1) * np.exp(-expo * np.asarray(a, dtype=float) ** 2)


@dataclass(frozen=True)
class SwitchBoundResult:
    fourth_moment_bound: float
    a0: float
    switch_prob_bound: float
    Q_const: float
    valid: bool
    escape_fn: object = field(repr=False, compare=False)


def _gaussian_Q(inp, c):
    rho, n = inp.certC.rho, inp.n
    return (6 * rho * c["trWtP"] ** 2 + (1 - rho) * (n**2 + 2 * n) * c["P_Wtinv"] ** 2) \
        / ((1 - rho) * (1 - rho**2))


def _normalised_threshold(inp):
    if inp.Kdiff == 0:
        return math.inf
    return inp.M / inp.Kdiff


def theorem3_gaussian(inp):
    """Fourth-moment and fallback-probability bounds under Gaussian noise.

    ``valid`` is false when ``M < a0 * ||K1 - K0||`` or the dwell time fails
    the common-Lyapunov condition; the numbers are still returned.
    """
    c = _norm_consts(inp)
    n = inp.n
    Qc = _gaussian_Q(inp, c)
    fourth = 8 * (Qc * c["P0_P"] ** 2 + (n**2 + 2 * n) * c["P0_Wtinv"] ** 2)
    a0 = escape_threshold(inp)
    a = _normalised_threshold(inp)
    switch = 0.0 if math.isinf(a) else inp.certC.t * float(escape_probability(inp, a))
    valid = inp.dwell_ok and inp.M >= a0 * inp.Kdiff

    def escape_fn(x):
        return escape_probability(inp, x)

    return SwitchBoundResult(fourth, a0, switch, Qc, bool(valid), escape_fn)


def _gap_constants(inp):
    if spectral_radius(inp.A1) >= 1.0 - TAU_SPEC:
        raise Unstable("primary loop A + B K1 is not Schur-stable", spectral_radius(inp.A1))
    P, rho = inp.certC.P, inp.certC.rho
    P0 = inp.cert0.P0
    C1 = math.sqrt(float(np.trace(inp.W @ P)) * weighted_matrix_norm(inp.Q1, P) / (1 - rho))
    series = certified_power_series(inp.A1, inp.Q1, rho, P)
    C2 = _norm2(inp.Delta1) * weighted_matrix_norm(inp.Q1, P0) * series
    C3 = _norm2(inp.Delta2) * _norm2(np.linalg.inv(P0))
    return C1, C2, C3


@dataclass(frozen=True)
class GapResult:
    gap_bound: float
    C1: float
    C2: float
    C3: float
    C4: float
    G: float
    valid: bool


def theorem4_gap_bound(inp):
    """Bound on the extra LQ cost caused by switching, Gaussian noise."""
    C1, C2, C3 = _gap_constants(inp)
    th3 = theorem3_gaussian(inp)
    c = _norm_consts(inp)
    n = inp.n
    C4 = 2**0.75 * (th3.Q_const * c["P0_P"] ** 2 + (n**2 + 2 * n) * c["P0_Wtinv"] ** 2) ** 0.25
    G = C4 * th3.switch_prob_bound**0.25
    gap = 2 * C1 * C2 * G + (C2**2 + C3) * G**2
    return GapResult(gap, C1, C2, C3, C4, G, th3.valid)


def corollary1_rate_constant(inp):
    """Rate ``c`` in the ``t^{1/4} exp(-c M^2)`` decay of the Gaussian gap."""
    if inp.Kdiff == 0:
        raise DegenerateGains("K1 == K0: the decay rate is undefined")
    c = _norm_consts(inp)
    rho = inp.certC.rho
    return (1 - rho**0.25) ** 2 / (16 * c["Wt_norm"] * c["P_norm"] * c["Pinv_norm"]
                                   * inp.Kdiff**2)


def gap_decay_exponent(inp):
    """Exact ``M^2`` coefficient in the exponent of the Gaussian gap bound's leading term.

    Equals ``corollary1_rate_constant`` when ``n == 2``; in general it is
    ``2 c / n``.
    """
    if inp.Kdiff == 0:
        raise DegenerateGains("K1 == K0: the decay rate is undefined")
    c = _norm_consts(inp)
    rho = inp.certC.rho
    return (1 - rho**0.25) ** 2 / (8 * inp.n * c["Wt_norm"] * c["P_norm"] * c["Pinv_norm"]
                                   * inp.Kdiff**2)


def heavytail_mu4tilde(cert0, W, mu4):
    """Fourth-moment bound for the noise accumulated over a fallback block."""
    P0, rho0 = cert0.P0, cert0.rho0
    return _norm2(P0) ** 2 * mu4 / (1 - rho0**2) \
        + 2 * rho0 * float(np.trace(W @ P0)) / ((1 - rho0**2) * (1 - rho0))


@dataclass(frozen=True)
class HeavyTailBoundResult:
    fourth_moment_bound: float
    switch_prob_bound: float
    switch_prob_bound_raw: float
    mu4tilde: float
    Qtilde: float
    P_fn: object = field(repr=False, compare=False)


def _heavy_consts(hin):
    inp = hin.base
    c = _norm_consts(inp)
    rho = inp.certC.rho
    mu4t = heavytail_mu4tilde(inp.cert0, inp.W, hin.mu4)
    Qt = (6 * rho * c["trWtP"] ** 2 + (1 - rho) * c["P_P0"] ** 2 * mu4t) \
        / ((1 - rho) * (1 - rho**2))
    return c, mu4t, Qt


def polynomial_escape(hin, a):
    c, mu4t, _ = _heavy_consts(hin)
    rho = hin.base.certC.rho
    a = np.asarray(a, dtype=float)
    return c["P_P0"] ** 2 * mu4t / ((1 - rho**0.25) ** 4 * (1 - rho) * a**4)


def theorem5_heavytail(hin):
    """Fourth-moment and fallback-probability bounds with finite-fourth-moment noise."""
    inp = hin.base
    c, mu4t, Qt = _heavy_consts(hin)
    fourth = 8 * (Qt * c["P0_P"] ** 2 + mu4t)
    a = _normalised_threshold(inp)
    raw = 0.0 if math.isinf(a) else inp.certC.t * float(polynomial_escape(hin, a))

    def P_fn(x):
        return polynomial_escape(hin, x)

    return HeavyTailBoundResult(fourth, min(raw, 1.0), raw, mu4t, Qt, P_fn)


@dataclass(frozen=True)
class HeavyGapResult:
    gap_bound: float
    Gtilde: float
    C1: float
    C2: float
    C3: float


def theorem6_gap_bound(hin):
    """Bound on the switching gap under finite-fourth-moment noise."""
    inp = hin.base
    C1, C2, C3 = _gap_constants(inp)
    c, mu4t, Qt = _heavy_consts(hin)
    th5 = theorem5_heavytail(hin)
    Gt = 2**0.75 * (Qt * c["P0_P"] ** 2 + mu4t) ** 0.25 * th5.switch_prob_bound_raw**0.25
    return HeavyGapResult(2 * C1 * C2 * Gt + (C2**2 + C3) * Gt**2, Gt, C1, C2, C3)


REPORT_FIELDS = (
    "M", "t", "n", "K_diff", "rho0", "rho", "a0", "certified", "dwell_ok",
    "cost_cap", "ev_bound", "Q_const", "fourth_moment_bound", "switch_prob_bound",
    "C1", "C2", "C3", "C4", "G", "gap_bound", "c_rate", "gap_decay_exponent",
    "mu4", "mu4tilde", "Qtilde", "heavy_fourth_moment_bound", "heavy_switch_prob_bound",
    "heavy_switch_prob_bound_raw", "Gtilde", "heavy_gap_bound",
)


@dataclass(frozen=True)
class BoundReport:
    """Every evaluated constant and headline bound, keyed by ``REPORT_FIELDS``."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def as_text(self):
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in REPORT_FIELDS)

    def csv_header(self):
        return ",".join(REPORT_FIELDS)

    def csv_row(self):
        return ",".join(_fmt(self.values[k]) for k in REPORT_FIELDS)

    @classmethod
    def from_text(cls, text):
        vals = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            vals[k] = _parse(v)
        return cls(vals)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return "nan"
    return f"{float(v):.12e}"


def _parse(v):
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        return float(v)


def bound_report(inp, mu4=None):
    """Evaluate every bound for ``inp``; ``mu4`` enables the heavy-tail fields.

    Gap-related fields are NaN when the primary loop is unstable.
    """
    th3 = theorem3_gaussian(inp)
    vals = {
        "M": inp.M, "t": inp.certC.t, "n": inp.n, "K_diff": inp.Kdiff,
        "rho0": inp.cert0.rho0, "rho": inp.certC.rho, "a0": th3.a0,
        "certified": th3.valid, "dwell_ok": inp.dwell_ok,
        "cost_cap": theorem1_cost_cap(inp.cert0, inp.B, inp.R, inp.W, inp.M),
        "ev_bound": lemma1_ev_bound(inp.cert0, inp.B, inp.W, inp.M),
        "Q_const": th3.Q_const,
        "fourth_moment_bound": th3.fourth_moment_bound,
        "switch_prob_bound": th3.switch_prob_bound,
    }
    nan = math.nan
    try:
        g = theorem4_gap_bound(inp)
        vals.update(C1=g.C1, C2=g.C2, C3=g.C3, C4=g.C4, G=g.G, gap_bound=g.gap_bound)
    except Unstable:
        vals.update(C1=nan, C2=nan, C3=nan, C4=nan, G=nan, gap_bound=nan)
    if inp.Kdiff > 0:
        vals["c_rate"] = corollary1_rate_constant(inp)
        vals["gap_decay_exponent"] = gap_decay_exponent(inp)
    else:
        vals["c_rate"] = vals["gap_decay_exponent"] = nan
    heavy = dict.fromkeys(("mu4", "mu4tilde", "Qtilde", "heavy_fourth_moment_bound",
                           "heavy_switch_prob_bound", "heavy_switch_prob_bound_raw",
                           "Gtilde", "heavy_gap_bound"), nan)
    if mu4 is not None:
        hin = HeavyTailBoundInputs(inp, mu4)
        th5 = theorem5_heavytail(hin)
        heavy.update(mu4=mu4, mu4tilde=th5.mu4tilde, Qtilde=th5.Qtilde,
                     heavy_fourth_moment_bound=th5.fourth_moment_bound,
                     heavy_switch_prob_bound=th5.switch_prob_bound,
                     heavy_switch_prob_bound_raw=th5.switch_prob_bound_raw)
        try:
            g6 = theorem6_gap_bound(hin)
            heavy.update(Gtilde=g6.Gtilde, heavy_gap_bound=g6.gap_bound)
        except Unstable:
            pass
    vals.update(heavy)
    return BoundReport(vals)


def cost_cap_report(cert0, B, R, W, M, t, n, Kdiff):
    """Report for a destabilizing primary gain: only the cost cap is defined."""
    vals = dict.fromkeys(REPORT_FIELDS, math.nan)
    vals.update(M=float(M), t=int(t), n=int(n), K_diff=float(Kdiff), rho0=cert0.rho0,
                certified=False, dwell_ok=False,
                cost_cap=theorem1_cost_cap(cert0, B, R, W, M),
                ev_bound=lemma1_ev_bound(cert0, B, W, M))
    return BoundReport(vals)


def stationary_cost(sys, K):
    """``tr(W P_K)``: long-run cost of the linear law ``u = K x``."""
    K = np.atleast_2d(K)
    Acl = sys.A + sys.B @ K
    PK = solve_discrete_lyapunov(Acl, sys.Q + K.T @ sys.R @ K)
    return float(np.trace(sys.W @ PK))
