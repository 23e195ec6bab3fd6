"""Experiment drivers behind the ``certify``, ``simulate``, ``sweep`` and ``verify`` commands."""

import csv
import datetime
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import bounds as bd
from .errors import DimensionMismatch, SafeSwitchError, Unstable, ValidationError
from .linalg import (
    TAU_SPEC,
    find_common_lyapunov,
    lyapunov_residual,
    solve_dare,
    spectral_radius,
)
from .policy import ControllerParams
from .simulate import (
    LinearController,
    LinearSystem,
    NoiseModel,
    SwitchingController,
    exp_weighted_sum_tail_experiment,
    monte_carlo,
    rollout,
    write_trajectories_csv,
)
from .surrogate import builtin_surrogate, surrogate_alpha

DEFAULT_ALPHA = 0.33


def _read_matrix_file(path):
    with open(path) as fh:
        return yaml.safe_load(fh)


def random_stable_system(seed, n, m, radius):
    rng = np.random.default_rng([int(seed), n, m])
    A = rng.standard_normal((n, n))
    A *= radius / spectral_radius(A)
    B = rng.standard_normal((n, m)) / math.sqrt(n)
    return LinearSystem(A, B, np.eye(n), np.eye(n), np.eye(m))


def build_system(cfg_sys):
    src = cfg_sys["source"]
    if src == "builtin":
        return builtin_surrogate()
    if src == "random":
        return random_stable_system(cfg_sys["seed"], cfg_sys["n"], cfg_sys["m"],
                                    cfg_sys["spectral_radius"])
    d = _read_matrix_file(cfg_sys["path"])
    A = np.atleast_2d(np.array(d["A"], dtype=float))
    B = np.atleast_2d(np.array(d["B"], dtype=float))
    n, m = A.shape[0], B.shape[1]
    return LinearSystem(A, B, np.array(d.get("W", np.eye(n)), dtype=float),
                        np.array(d.get("Q", np.eye(n)), dtype=float),
                        np.array(d.get("R", np.eye(m)), dtype=float))


def _gain_from_file(path, shape, field):
    d = _read_matrix_file(path)
    K = np.atleast_2d(np.array(d["K"] if isinstance(d, dict) else d, dtype=float))
    if K.shape != shape:
        raise ValidationError([(field, f"gain has shape {K.shape}, expected {shape}")])
    return K


@dataclass
class Setup:
    """System, gains and noise model derived from a resolved configuration."""

    sys: LinearSystem
    K0: np.ndarray
    K1: np.ndarray
    Kstar: np.ndarray
    Pstar: np.ndarray
    noise: NoiseModel
    t: int
    rho_margin: float

    @property
    def J_star(self):
        return float(np.trace(self.sys.W @ self.Pstar))

    @property
    def k1_stable(self):
        return spectral_radius(self.sys.closed_loop(self.K1)) < 1.0 - TAU_SPEC

    def params(self, M):
        return ControllerParams(self.K0, self.K1, M, self.t)


def _gains(data, sys):
    ctl = data["controller"]
    Pstar, Kstar = solve_dare(sys.A, sys.B, sys.Q, sys.R)
    shape = (sys.m, sys.n)
    if ctl["K0"] == "zero":
        K0 = np.zeros(shape)
    elif ctl["K0"] == "dare":
        K0 = Kstar.copy()
    else:
        K0 = _gain_from_file(ctl["K0_path"], shape, "controller.K0_path")
    if ctl["K1"] == "dare":
        K1 = Kstar.copy()
    elif ctl["K1"] == "dare_plus_rank_one":
        K1 = Kstar + ctl["alpha"] * np.ones(shape)
    else:
        K1 = _gain_from_file(ctl["K1_path"], shape, "controller.K1_path")
    return K0, K1, Kstar, Pstar


def resolve_dwell_and_alpha(data):
    """Fill in the rank-one coefficient and the automatic dwell time in place."""
    ctl = data["controller"]
    try:
        sys = build_system(data["system"])
    except (DimensionMismatch, ValueError, KeyError) as exc:
        raise ValidationError([("system", str(exc))]) from None
    if ctl["K1"] == "dare_plus_rank_one" and ctl["alpha"] is None:
        ctl["alpha"] = surrogate_alpha() if data["system"]["source"] == "builtin" else DEFAULT_ALPHA
    if ctl["t"] == "auto":
        K0, K1, _, _ = _gains(data, sys)
        try:
            ctl["t"] = find_common_lyapunov(sys.closed_loop(K1), sys.closed_loop(K0),
                                            rho_margin=ctl["rho_margin"]).t
        except Unstable:
            ctl["t"] = 10


def make_setup(cfg):
    sys = build_system(cfg["system"])
    K0, K1, Kstar, Pstar = _gains(cfg.data, sys)
    nz = cfg["noise"]
    noise = NoiseModel(nz["kind"], sys.W, dof=float(nz["dof"]))
    ctl = cfg["controller"]
    return Setup(sys, K0, K1, Kstar, Pstar, noise, int(ctl["t"]), float(ctl["rho_margin"]))


def _open_out(cfg, name):
    os.makedirs(cfg.out_dir, exist_ok=True)
    return open(os.path.join(cfg.out_dir, name), "w", newline="")


def _stamp(cfg):
    if not cfg["output"]["timestamp"]:
        return ""
    now = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return f"# generated {now}\n"


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.12e}"


def certify(setup, M):
    """Bound report for threshold ``M``; only the cost cap if ``K1`` is destabilizing."""
    s = setup.sys
    cert0 = bd.certify_fallback(s.A, s.B, setup.K0, s.Q, s.R, margin=setup.rho_margin)
    if not setup.k1_stable:
        return bd.cost_cap_report(cert0, s.B, s.R, s.W, M, setup.t, s.n,
                                  float(np.linalg.norm(setup.K1 - setup.K0, 2)))
    inp = bd.build_inputs(s.A, s.B, s.Q, s.R, s.W, setup.K0, setup.K1, M, t=setup.t,
                          rho_margin=setup.rho_margin, cert0=cert0)
    return bd.bound_report(inp, mu4=setup.noise.mu4)


def cmd_certify(cfg):
    setup = make_setup(cfg)
    M = cfg["controller"]["M"]
    try:
        report = certify(setup, M)
    except Unstable as exc:
        raise Unstable(f"{exc}; choose a stabilizing fallback gain K0",
                       exc.spectral_radius) from None
    with _open_out(cfg, "report.txt") as fh:
        fh.write(_stamp(cfg) + report.as_text())
    with _open_out(cfg, "report.csv") as fh:
        fh.write(_stamp(cfg) + report.csv_header() + "\n" + report.csv_row() + "\n")
    return report


def cmd_simulate(cfg):
    """Paired switched and unswitched rollouts under one noise realisation."""
    setup = make_setup(cfg)
    sim = cfg["simulation"]
    M = cfg["controller"]["M"]
    T = sim["baseline_T"]
    sw = rollout(setup.sys, SwitchingController(setup.params(M)), setup.noise, T, sim["seed"])
    un = rollout(setup.sys, LinearController(setup.K1), setup.noise, T, sim["seed"])
    with _open_out(cfg, "trajectory_switched.csv") as fh:
        fh.write(_stamp(cfg))
        write_trajectories_csv([sw], fh)
    with _open_out(cfg, "trajectory_unswitched.csv") as fh:
        fh.write(_stamp(cfg))
        write_trajectories_csv([un], fh)
    with _open_out(cfg, "state_norms.csv") as fh:
        fh.write(_stamp(cfg))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "norm_switched", "norm_unswitched"])
        for k in range(T + 1):
            a = np.linalg.norm(sw.states[k]) if k < len(sw.states) else math.nan
            b = np.linalg.norm(un.states[k]) if k < len(un.states) else math.nan
            w.writerow([k, _fmt(a), _fmt(b)])
    summary = {
        "rho_A_BK1": spectral_radius(setup.sys.closed_loop(setup.K1)),
        "rho_A_BK0": spectral_radius(setup.sys.closed_loop(setup.K0)),
        "M": M,
        "t": setup.t,
        "T": T,
        "switched_cost": float(np.mean(sw.stage_costs)),
        "switched_fallback_fraction": float(np.mean(sw.fallback_flags)),
        "switched_exploded": sw.exploded,
        "unswitched_cost": float(np.mean(un.stage_costs)),
        "unswitched_exploded": un.exploded,
        "unswitched_steps": un.T,
    }
    with _open_out(cfg, "simulate_summary.txt") as fh:
        fh.write(_stamp(cfg) + "".join(f"{k} = {_fmt(v)}\n" for k, v in summary.items()))
    return summary, sw, un


SWEEP_COLUMNS = (
    "M", "log_M", "empirical_cost", "stderr", "J_star", "relative_gap", "log_relative_gap",
    "paired_gap", "paired_gap_stderr", "gap_bound", "switch_freq", "switch_freq_stderr",
    "switch_bound", "certified", "n_exploded", "error",
)


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
        return buf.getvalue()


def _mc(setup, controller, sim, T=None, n_traj=None, **kw):
    return monte_carlo(setup.sys, controller, setup.noise, T or sim["T"],
                       n_traj or sim["n_traj"], sim["seed"], workers=sim["workers"],
                       chunk_size=sim["chunk_size"], **kw)


def run_sweep(setup, sim, M_grid):
    """Monte-Carlo cost, paired gap and certified bounds for every ``M``.

    The unswitched ``K1`` baseline shares the noise of every switched run,
    so ``paired_gap`` is a common-random-numbers estimate of the gap.
    """
    result = SweepResult()
    J = setup.J_star
    base = _mc(setup, LinearController(setup.K1), sim) if setup.k1_stable else None
    inp = None
    if setup.k1_stable:
        s = setup.sys
        inp = bd.build_inputs(s.A, s.B, s.Q, s.R, s.W, setup.K0, setup.K1, M_grid[0],
                              t=setup.t, rho_margin=setup.rho_margin)
    gaussian = setup.noise.kind == "gaussian"
    for M in M_grid:
        row = dict.fromkeys(SWEEP_COLUMNS, math.nan)
        row.update(M=M, log_M=math.log(M), J_star=J, certified=False, n_exploded=0, error="")
        try:
            st = _mc(setup, SwitchingController(setup.params(M)), sim)
            est = st.cost()
            rel = (est.mean - J) / J
            freq, freq_se = st.switch_frequency()
            row.update(empirical_cost=est.mean, stderr=est.stderr, relative_gap=rel,
                       log_relative_gap=math.log(rel) if rel > 0 else math.nan,
                       switch_freq=freq, switch_freq_stderr=freq_se,
                       n_exploded=est.n_exploded)
            if base is not None:
                d = st.costs - base.costs
                row.update(paired_gap=float(np.mean(d)),
                           paired_gap_stderr=float(np.std(d, ddof=1) / math.sqrt(d.size)))
            if inp is not None:
                inM = inp.with_M(M)
                if gaussian:
                    g = bd.theorem4_gap_bound(inM)
                    row.update(gap_bound=g.gap_bound, certified=g.valid,
                               switch_bound=bd.theorem3_gaussian(inM).switch_prob_bound)
                else:
                    hin = bd.HeavyTailBoundInputs(inM, setup.noise.mu4)
                    row.update(gap_bound=bd.theorem6_gap_bound(hin).gap_bound,
                               certified=inM.dwell_ok,
                               switch_bound=bd.theorem5_heavytail(hin).switch_prob_bound)
        except SafeSwitchError as exc:
            row["error"] = str(exc).replace(",", ";")
        result.rows.append(row)
    return result


def cmd_sweep(cfg):
    setup = make_setup(cfg)
    result = run_sweep(setup, cfg["simulation"], cfg.M_values)
    with _open_out(cfg, "sweep.csv") as fh:
        fh.write(_stamp(cfg) + result.to_csv())
    return result


@dataclass
class Check:
    name: str
    measured: float
    certified: float
    tolerance: float
    passed: bool
    note: str = ""


@dataclass
class VerifyReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def add(self, name, measured, certified, tolerance=0.0, note=""):
        ok = bool(measured <= certified + tolerance)
        self.checks.append(Check(name, float(measured), float(certified), float(tolerance),
                                 ok, note))
        return ok

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "measured", "certified", "tolerance", "passed", "note"])
        for c in self.checks:
            w.writerow([c.name, _fmt(c.measured), _fmt(c.certified), _fmt(c.tolerance),
                        _fmt(c.passed), c.note])
        return buf.getvalue()


def verify(setup, sim, M, rho0_override=None, tail_samples=200_000):
    """Compare Monte-Carlo statistics against every applicable certified bound.

    Statistical checks pass when ``measured <= certified + 3 * stderr``.
    The Gaussian suite runs at ``max(M, a0 * ||K1 - K0||)`` so that its
    threshold condition holds; the heavy-tail suite runs at ``M``.
    """
    rep = VerifyReport()
    s = setup.sys
    A0 = s.closed_loop(setup.K0)
    cert0 = bd.certify_fallback(s.A, s.B, setup.K0, s.Q, s.R, margin=setup.rho_margin)
    if rho0_override is not None:
        cert0 = bd.StabilityCertificate(cert0.P0, float(rho0_override))
    S0 = s.Q + setup.K0.T @ s.R @ setup.K0
    gap = cert0.rho0 * cert0.P0 - A0.T @ cert0.P0 @ A0
    rep.add("fallback_contraction", -float(np.linalg.eigvalsh(0.5 * (gap + gap.T))[0]),
            0.0, 1e-9, "max eigenvalue of A0'P0A0 - rho0 P0")
    rep.add("fallback_lyapunov_residual", lyapunov_residual(A0, cert0.P0, S0), 1e-8)

    cap = bd.theorem1_cost_cap(cert0, s.B, s.R, s.W, M)
    st = _mc(setup, SwitchingController(setup.params(M)), sim, P0=cert0.P0,
             fourth_start_fraction=sim["fourth_start_fraction"])
    est = st.cost()
    rep.add("cost_cap", est.mean, cap, 3 * est.stderr)

    if setup.k1_stable:
        inp = bd.build_inputs(s.A, s.B, s.Q, s.R, s.W, setup.K0, setup.K1, M, t=setup.t,
                              rho_margin=setup.rho_margin, cert0=cert0)
        rep.add("common_lyapunov", float(len(inp.certC.violations(inp.A1, A0))), 0.0,
                note="number of violated inequalities")
        base = _mc(setup, LinearController(setup.K1), sim)
        if setup.noise.kind == "gaussian":
            a0K = bd.escape_threshold(inp) * inp.Kdiff
            Mg = max(M, a0K)
            g_inp = inp.with_M(Mg)
            stg = st if Mg == M else _mc(setup, SwitchingController(setup.params(Mg)), sim,
                                         P0=cert0.P0,
                                         fourth_start_fraction=sim["fourth_start_fraction"])
            th3 = bd.theorem3_gaussian(g_inp)
            th4 = bd.theorem4_gap_bound(g_inp)
            note = f"M={Mg:.6g}"
            f, fse = stg.switch_frequency()
            rep.add("gaussian_switch_probability", f, th3.switch_prob_bound, 3 * fse, note)
            m4, m4se = stg.fourth_moment()
            rep.add("gaussian_fourth_moment", m4, th3.fourth_moment_bound, 3 * m4se, note)
            d = stg.costs - base.costs
            rep.add("gaussian_gap", float(np.mean(d)), th4.gap_bound,
                    3 * float(np.std(d, ddof=1) / math.sqrt(d.size)), note)
        else:
            hin = bd.HeavyTailBoundInputs(inp, setup.noise.mu4)
            th5 = bd.theorem5_heavytail(hin)
            th6 = bd.theorem6_gap_bound(hin)
            f, fse = st.switch_frequency()
            rep.add("heavy_switch_probability", f, th5.switch_prob_bound, 3 * fse)
            m4, m4se = st.fourth_moment()
            rep.add("heavy_fourth_moment", m4, th5.fourth_moment_bound, 3 * m4se)
            d = st.costs - base.costs
            rep.add("heavy_gap", float(np.mean(d)), th6.gap_bound,
                    3 * float(np.std(d, ddof=1) / math.sqrt(d.size)))

    for varrho in (0.25, 0.5, 0.81):
        C1t, C2t, a_min = bd.theorem2_tail_constants(1.0, 0.5, varrho)
        grid = a_min * np.array([1.0, 1.25, 1.5, 2.0])
        for dist in ("gaussian", "gaussian_ar1"):
            tc = exp_weighted_sum_tail_experiment(varrho, dist, 60, tail_samples, grid,
                                                  sim["seed"])
            excess = tc.prob - (C1t * np.exp(-C2t * grid**2) + 3 * tc.stderr())
            worst = int(np.argmax(excess))
            rep.add(f"tail_{dist}_rho{varrho}", tc.prob[worst],
                    C1t * math.exp(-C2t * grid[worst] ** 2), 3 * tc.stderr()[worst])
    return rep


def cmd_verify(cfg):
    setup = make_setup(cfg)
    v = cfg["verify"]
    rep = verify(setup, cfg["simulation"], cfg["controller"]["M"],
                 rho0_override=v["rho0_override"], tail_samples=v["tail_samples"])
    with _open_out(cfg, "verify.csv") as fh:
        fh.write(_stamp(cfg) + rep.to_csv())
    return rep
