"""Pinned open-loop-stable plant with 8 states and 4 inputs.

The matrices live in ``data/surrogate.json``; ``generate_surrogate``
rebuilds them from the recorded generator seed.
"""

import json
from importlib import resources

import numpy as np

from .linalg import solve_dare, spectral_radius
from .simulate import LinearSystem

SURROGATE_VERSION = 1
N_STATES, N_INPUTS = 8, 4
TARGET_OPEN_LOOP_RADIUS = 0.92
TARGET_DESTABILIZED_RADIUS = 1.01


def controllable(A, B, tol=1e-9):
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return np.linalg.matrix_rank(np.hstack(blocks), tol) == n


def rank_one_radius(A, B, K, alpha):
    ones = np.ones((B.shape[1], A.shape[0]))
    return spectral_radius(A + B @ (K + alpha * ones))


def tune_rank_one(A, B, K, target=TARGET_DESTABILIZED_RADIUS, alpha_max=10.0, grid=2001):
    """Smallest ``alpha > 0`` with ``rho(A + B (K + alpha 11^T))`` equal to ``target``.

    Scans a grid for the first crossing then bisects.
    """
    alphas = np.linspace(0.0, alpha_max, grid)
    radii = [rank_one_radius(A, B, K, a) for a in alphas]
    for lo, hi, rlo, rhi in zip(alphas, alphas[1:], radii, radii[1:]):
        if rlo < target <= rhi:
            break
    else:
        raise ValueError("no positive rank-one perturbation reaches the target radius")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if rank_one_radius(A, B, K, mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def generate_surrogate(seed):
    """Random stable ``(A, B)`` plus the tuned rank-one coefficient."""
    rng = np.random.default_rng(seed)
    while True:
        A = rng.standard_normal((N_STATES, N_STATES))
        A *= TARGET_OPEN_LOOP_RADIUS / spectral_radius(A)
        B = rng.standard_normal((N_STATES, N_INPUTS)) / np.sqrt(N_STATES)
        if not controllable(A, B):
            continue
        I8, I4 = np.eye(N_STATES), np.eye(N_INPUTS)
        _, K = solve_dare(A, B, I8, I4)
        try:
            alpha = tune_rank_one(A, B, K)
        except ValueError:
            continue
        return A, B, alpha


def _load():
    text = resources.files("safeswitch").joinpath("data/surrogate.json").read_text()
    return json.loads(text)


def surrogate_metadata():
    d = _load()
    return {k: v for k, v in d.items() if k not in ("A", "B")}


def builtin_surrogate():
    """The pinned plant with ``W = Q = I8`` and ``R = I4``."""
    d = _load()
    A = np.array(d["A"], dtype=float)
    B = np.array(d["B"], dtype=float)
    return LinearSystem(A, B, np.eye(N_STATES), np.eye(N_STATES), np.eye(N_INPUTS))


def surrogate_alpha():
    """Rank-one coefficient that destabilizes the optimal gain of the surrogate."""
    return float(_load()["alpha"])


def write_surrogate(path, seed):
    A, B, alpha = generate_surrogate(seed)
    _, K = solve_dare(A, B, np.eye(N_STATES), np.eye(N_INPUTS))
    data = {
        "version": SURROGATE_VERSION,
        "generator_seed": seed,
        "open_loop_radius": spectral_radius(A),
        "alpha": alpha,
        "destabilized_radius": rank_one_radius(A, B, K, alpha),
        "A": A.tolist(),
        "B": B.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")
    return data
