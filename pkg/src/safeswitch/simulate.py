"""Seeded closed-loop rollouts, noise models and Monte-Carlo estimators.

Every trajectory draws its noise from its own generator keyed by
``(master seed, trajectory index)``, so results do not depend on how
trajectories are grouped into chunks or spread across worker processes.
"""

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InconsistentDwell, InvalidDof
from .linalg import as_spd, spd_sqrt
from .policy import ControllerParams, switch_step_batch

EXPLOSION_LIMIT = 1e15
NOISE_KINDS = ("gaussian", "student_t", "laplace_product", "bounded_mixture")


@dataclass(frozen=True)
class LinearSystem:
    """Plant ``x+ = A x + B u + w`` with noise covariance ``W`` and LQ weights."""

    A: np.ndarray
    B: np.ndarray
    W: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise DimensionMismatch(f"B has {B.shape[0]} rows, expected {n}")
        m = B.shape[1]
        W = as_spd(self.W, "W")
        Q = as_spd(self.Q, "Q")
        R = as_spd(self.R, "R")
        if W.shape != (n, n) or Q.shape != (n, n) or R.shape != (m, m):
            raise DimensionMismatch(
                f"W {W.shape}, Q {Q.shape} must be {n}x{n} and R {R.shape} {m}x{m}")
        for name, val in (("A", A), ("B", B), ("W", W), ("Q", Q), ("R", R)):
            object.__setattr__(self, name, val)

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    def closed_loop(self, K):
        return self.A + self.B @ np.atleast_2d(K)


def _component_kurtosis(kind, dof=None, p=None, ratio=None):
    if kind == "gaussian":
        return 3.0
    if kind == "student_t":
        return 3.0 + 6.0 / (dof - 4.0)
    if kind == "laplace_product":
        return 6.0
    if kind == "bounded_mixture":
        # half-widths 1 (prob p) and ratio (prob 1-p)
        m2 = (p + (1 - p) * ratio**2) / 3.0
        m4 = (p + (1 - p) * ratio**4) / 5.0
        return m4 / m2**2
    raise ValueError(f"unknown noise kind {kind!r}")


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean i.i.d. noise ``w = W^{1/2} z`` with standardized components ``z``.

    ``kind`` selects the component law: ``gaussian``, ``student_t`` (rescaled
    to unit variance, ``dof >= 5``), ``laplace_product`` (independent unit
    variance Laplace components) or ``bounded_mixture`` (mixture of two
    centred uniforms, bounded support).
    """

    kind: str
    W: np.ndarray
    dof: float = 5.0
    mix_p: float = 0.9
    mix_ratio: float = 4.0
    shaping: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.kind == "student_t" and not self.dof >= 5:
            raise InvalidDof(f"student_t needs dof >= 5 for a finite fourth moment, got {self.dof}")
        W = as_spd(self.W, "W")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "shaping", spd_sqrt(W))

    @classmethod
    def gaussian(cls, W):
        return cls("gaussian", W)

    @property
    def n(self):
        return self.W.shape[0]

    @property
    def kurtosis(self):
        return _component_kurtosis(self.kind, self.dof, self.mix_p, self.mix_ratio)

    @property
    def mu4(self):
        """``E||w||^4`` for componentwise i.i.d. ``z`` with the given kurtosis."""
        W = self.W
        return float(np.trace(W) ** 2 + 2.0 * np.trace(W @ W)
                     + (self.kurtosis - 3.0) * np.sum(np.diag(W) ** 2))

    def standard(self, rng, count):
        n = self.n
        if self.kind == "gaussian":
            return rng.standard_normal((count, n))
        if self.kind == "student_t":
            nu = self.dof
            return rng.standard_t(nu, (count, n)) / math.sqrt(nu / (nu - 2.0))
        if self.kind == "laplace_product":
            return rng.laplace(0.0, 1.0 / math.sqrt(2.0), (count, n))
        p, r = self.mix_p, self.mix_ratio
        scale = math.sqrt(3.0 / (p + (1 - p) * r**2))
        width = np.where(rng.random((count, n)) < p, 1.0, r)
        return rng.uniform(-1.0, 1.0, (count, n)) * width * scale

    def sample(self, rng, count):
        return self.standard(rng, count) @ self.shaping


def sample_noise(model, count, seed):
    """``count`` i.i.d. draws from ``model``, deterministic in ``seed``."""
    return model.sample(np.random.default_rng(seed), count)


def trajectory_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def trajectory_noise(model, T, seed, index):
    return model.sample(trajectory_rng(seed, index), T)


@dataclass(frozen=True)
class LinearController:
    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))


@dataclass(frozen=True)
class SwitchingController:
    params: ControllerParams


def _check_controller(sys, controller):
    if isinstance(controller, SwitchingController):
        shape = controller.params.K0.shape
    elif isinstance(controller, LinearController):
        shape = controller.K.shape
    else:
        raise TypeError(f"unsupported controller {controller!r}")
    if shape != (sys.m, sys.n):
        raise DimensionMismatch(f"gain shape {shape} does not match system ({sys.m}, {sys.n})")


@dataclass
class Trajectory:
    """States ``x_0..x_T``, inputs and fallback flags of one rollout.

    When the state blows up the arrays stop at the explosion step and
    ``exploded`` is set.
    """

    states: np.ndarray
    inputs: np.ndarray
    fallback_flags: np.ndarray
    stage_costs: np.ndarray
    seed: int
    index: int = 0
    exploded: bool = False

    @property
    def T(self):
        return len(self.inputs)


def _stage_costs(X, U, Q, R):
    return np.einsum("bi,ij,bj->b", X, Q, X) + np.einsum("bi,ij,bj->b", U, R, U)


def _step(sys, controller, X, xi):
    if isinstance(controller, SwitchingController):
        return switch_step_batch(X, xi, controller.params)
    U = X @ controller.K.T
    return U, xi, np.zeros(X.shape[0], dtype=bool)


def rollout(sys, controller, noise, T, seed, index=0):
    """Simulate one trajectory from ``x_0 = 0`` for ``T`` steps."""
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    _check_controller(sys, controller)
    if noise.n != sys.n:
        raise DimensionMismatch("noise dimension does not match the system")
    w = trajectory_noise(noise, T, seed, index)
    X = np.zeros((1, sys.n))
    xi = np.zeros(1, dtype=np.int64)
    states = [X[0].copy()]
    inputs, flags, costs = [], [], []
    exploded = False
    for k in range(T):
        U, xi, fb = _step(sys, controller, X, xi)
        inputs.append(U[0])
        flags.append(bool(fb[0]))
        costs.append(_stage_costs(X, U, sys.Q, sys.R)[0])
        X = X @ sys.A.T + U @ sys.B.T + w[k]
        states.append(X[0].copy())
        if not np.all(np.abs(X) <= EXPLOSION_LIMIT):
            exploded = True
            break
    return Trajectory(
        states=np.array(states),
        inputs=np.array(inputs).reshape(-1, sys.m),
        fallback_flags=np.array(flags, dtype=bool),
        stage_costs=np.array(costs),
        seed=int(seed),
        index=int(index),
        exploded=exploded,
    )


def empirical_cost(traj):
    """Time-average stage cost of a trajectory."""
    if traj.T < 1:
        raise ValueError("trajectory has no steps")
    return float(np.mean(traj.stage_costs))


def empirical_switch_frequency(trajs):
    flags = [np.asarray(tr.fallback_flags, dtype=bool) for tr in trajs]
    if not flags:
        raise ValueError("no trajectories")
    total = sum(f.size for f in flags)
    return float(sum(int(f.sum()) for f in flags) / total)


def empirical_weighted_fourth_moment(trajs, P0, start_fraction=0.5):
    """Average of ``||x_k||_{P0}^4`` over steps ``k >= start_fraction * T``."""
    P0 = as_spd(P0, "P0")
    vals = []
    for tr in trajs:
        X = tr.states[int(start_fraction * tr.T):tr.T]
        vals.append(np.einsum("ki,ij,kj->k", X, P0, X) ** 2)
    return float(np.mean(np.concatenate(vals)))


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    n_exploded: int = 0

    def __iter__(self):
        return iter((self.mean, self.stderr))


@dataclass
class MonteCarloStats:
    """Per-trajectory summaries from a batch of rollouts, in index order."""

    T: int
    cost_sum: np.ndarray
    steps: np.ndarray
    n_fallback: np.ndarray
    fourth_sum: np.ndarray
    fourth_count: np.ndarray
    exceed_step: np.ndarray
    explode_step: np.ndarray

    @classmethod
    def concat(cls, parts):
        return cls(parts[0].T, *(np.concatenate([getattr(p, f) for p in parts])
                                 for f in ("cost_sum", "steps", "n_fallback", "fourth_sum",
                                           "fourth_count", "exceed_step", "explode_step")))

    @property
    def n_traj(self):
        return self.cost_sum.size

    @property
    def exploded(self):
        return self.explode_step >= 0

    @property
    def costs(self):
        """Time-average cost per trajectory; ``inf`` for exploded ones."""
        out = self.cost_sum / np.maximum(self.steps, 1)
        return np.where(self.exploded, np.inf, out)

    def cost(self):
        ok = ~self.exploded
        c = self.costs[ok]
        se = float(np.std(c, ddof=1) / math.sqrt(c.size)) if c.size > 1 else math.nan
        return CostEstimate(float(np.mean(c)) if c.size else math.nan, se,
                            int(self.exploded.sum()))

    def switch_frequency(self):
        """Fraction of fallback steps and its standard error across trajectories."""
        frac = self.n_fallback / np.maximum(self.steps, 1)
        return float(self.n_fallback.sum() / self.steps.sum()), _se(frac)

    def fourth_moment(self):
        per = self.fourth_sum / np.maximum(self.fourth_count, 1)
        return float(self.fourth_sum.sum() / self.fourth_count.sum()), _se(per)


def _se(values):
    return float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.nan


def _run_chunk(sys, controller, noise, T, seed, start, stop, P0, fourth_from, cost_cap):
    b = stop - start
    w = np.stack([trajectory_noise(noise, T, seed, i) for i in range(start, stop)])
    X = np.zeros((b, sys.n))
    xi = np.zeros(b, dtype=np.int64)
    alive = np.ones(b, dtype=bool)
    cost_sum = np.zeros(b)
    steps = np.zeros(b, dtype=np.int64)
    n_fb = np.zeros(b, dtype=np.int64)
    f_sum = np.zeros(b)
    f_cnt = np.zeros(b, dtype=np.int64)
    exceed = np.full(b, -1, dtype=np.int64)
    explode = np.full(b, -1, dtype=np.int64)
    for k in range(T):
        U, xi, fb = _step(sys, controller, X, xi)
        c = _stage_costs(X, U, sys.Q, sys.R)
        cost_sum += np.where(alive, c, 0.0)
        steps += alive
        n_fb += alive & fb
        if P0 is not None and k >= fourth_from:
            f_sum += np.where(alive, np.einsum("bi,ij,bj->b", X, P0, X) ** 2, 0.0)
            f_cnt += alive
        if cost_cap is not None:
            hit = alive & (exceed < 0) & (cost_sum > cost_cap * (k + 1))
            exceed[hit] = k
        X = X @ sys.A.T + U @ sys.B.T + w[:, k]
        blown = alive & ~np.all(np.abs(X) <= EXPLOSION_LIMIT, axis=1)
        if blown.any():
            explode[blown] = k + 1
            alive &= ~blown
            X[blown] = 0.0
    return MonteCarloStats(T, cost_sum, steps, n_fb, f_sum, f_cnt, exceed, explode)


def _run_chunk_args(args):
    return _run_chunk(*args)


def monte_carlo(sys, controller, noise, T, n_traj, seed, *, workers=1, chunk_size=250,
                P0=None, fourth_start_fraction=0.5, cost_cap=None):
    """Run ``n_traj`` seeded rollouts and collect per-trajectory statistics.

    Chunks have a fixed size independent of ``workers`` so the numbers are
    bit-identical for any degree of parallelism.  ``P0`` enables the
    weighted fourth-moment accumulator over steps ``k >= fourth_start_fraction*T``;
    ``cost_cap`` records the first step where the running average cost
    exceeds the cap.
    """
    if T < 1 or n_traj < 1:
        raise ValueError("T and n_traj must be positive")
    _check_controller(sys, controller)
    if P0 is not None:
        P0 = as_spd(P0, "P0")
    fourth_from = int(fourth_start_fraction * T)
    jobs = [(sys, controller, noise, T, seed, s, min(s + chunk_size, n_traj), P0,
             fourth_from, cost_cap) for s in range(0, n_traj, chunk_size)]
    if workers <= 1 or len(jobs) == 1:
        parts = [_run_chunk(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_chunk_args, jobs))
    return MonteCarloStats.concat(parts)


def monte_carlo_cost(sys, controller, noise, T, n_traj, seed, **kwargs):
    """Mean and standard error of the time-average cost over ``n_traj`` rollouts."""
    if n_traj < 2:
        raise ValueError("n_traj must be >= 2")
    return monte_carlo(sys, controller, noise, T, n_traj, seed, **kwargs).cost()


def transformed_subsequence(traj, t):
    """Indices that collapse every ``t``-step fallback block into one step.

    Returns ``(indices, labels)``: after a step taken with the primary gain
    the next index is one step later, after a trigger it is ``t`` steps
    later.  Labels are ``"primary"`` or ``"fallback_block"``.
    """
    flags = np.asarray(traj.fallback_flags, dtype=bool)
    T = flags.size
    indices, labels = [], []
    i = 0
    while i < T:
        indices.append(i)
        if flags[i]:
            block = flags[i:i + t]
            if not block.all():
                raise InconsistentDwell(
                    f"trigger at step {i} is not followed by {t} fallback steps")
            labels.append("fallback_block")
            i += t
        else:
            labels.append("primary")
            i += 1
    return np.array(indices, dtype=np.int64), labels


@dataclass(frozen=True)
class TailCurve:
    a: np.ndarray
    prob: np.ndarray
    count: np.ndarray
    n_samples: int
    C1: float
    C2: float

    def stderr(self):
        p = self.prob
        return np.sqrt(np.maximum(p * (1 - p), 0.0) / self.n_samples)


TAIL_DISTRIBUTIONS = ("gaussian", "rademacher", "gaussian_ar1")


def exp_weighted_sum_tail_experiment(varrho, distribution, k, n_samples, a_grid, seed,
                                     phi=0.9, batch=200_000):
    """Empirical ``P(S_k >= a)`` for ``S_k = sum_i varrho^(k-i) X_i``.

    Each ``X_i`` has a standard-normal-dominated tail, so
    ``P(X_i >= a) <= exp(-a^2/2)`` and the envelope is ``(C1, C2) = (1, 1/2)``.
    ``gaussian_ar1`` makes the sequence Markov-dependent with lag-one
    correlation ``phi``.
    """
    if not 0.0 < varrho < 1.0:
        raise ValueError("varrho must lie in (0, 1)")
    if distribution not in TAIL_DISTRIBUTIONS:
        raise ValueError(f"distribution must be one of {TAIL_DISTRIBUTIONS}")
    a_grid = np.asarray(a_grid, dtype=float)
    rng = np.random.default_rng(seed)
    counts = np.zeros(a_grid.size, dtype=np.int64)
    done = 0
    innov = math.sqrt(1.0 - phi**2)
    while done < n_samples:
        b = min(batch, n_samples - done)
        S = np.zeros(b)
        X = None
        for _ in range(k + 1):
            if distribution == "gaussian":
                X = rng.standard_normal(b)
            elif distribution == "rademacher":
                X = rng.choice((-1.0, 1.0), b)
            elif X is None:
                X = rng.standard_normal(b)
            else:
                X = phi * X + innov * rng.standard_normal(b)
            S = varrho * S + X
        counts += (S[:, None] >= a_grid[None, :]).sum(axis=0)
        done += b
    return TailCurve(a_grid, counts / n_samples, counts, n_samples, 1.0, 0.5)


def trajectory_header(n, m, with_id=False):
    cols = ["trajectory_id"] if with_id else []
    cols += ["k"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{j + 1}" for j in range(m)]
    return cols + ["fallback_flag", "stage_cost"]


def _fmt(v):
    return f"{v:.12e}"


def write_trajectories_csv(trajs, fh, long_format=None):
    """Write trajectories as CSV rows ``k, x_*, u_*, fallback_flag, stage_cost``.

    With several trajectories (or ``long_format=True``) a leading
    ``trajectory_id`` column is added.
    """
    trajs = list(trajs)
    long_format = len(trajs) > 1 if long_format is None else long_format
    n = trajs[0].states.shape[1]
    m = trajs[0].inputs.shape[1]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(trajectory_header(n, m, long_format))
    for tid, tr in enumerate(trajs):
        for k in range(tr.T):
            row = [tid] if long_format else []
            row += [k] + [_fmt(v) for v in tr.states[k]] + [_fmt(v) for v in tr.inputs[k]]
            row += [int(tr.fallback_flags[k]), _fmt(tr.stage_costs[k])]
            writer.writerow(row)
