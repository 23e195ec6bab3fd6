"""The switched feedback law: primary gain with a dwell-time fallback."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

UNBOUNDED = math.inf


@dataclass(frozen=True)
class ControllerParams:
    """Gains, threshold and dwell time of the switching controller.

    ``M = UNBOUNDED`` disables switching entirely.
    """

    K0: np.ndarray
    K1: np.ndarray
    M: float
    t: int

    def __post_init__(self):
        K0 = np.atleast_2d(np.asarray(self.K0, dtype=float))
        K1 = np.atleast_2d(np.asarray(self.K1, dtype=float))
        if K0.shape != K1.shape:
            raise DimensionMismatch(f"K0 {K0.shape} and K1 {K1.shape} differ")
        if not (self.M >= 0):
            raise ValueError(f"threshold M must be >= 0, got {self.M}")
        if int(self.t) != self.t or self.t < 1:
            raise ValueError(f"dwell time must be a positive integer, got {self.t}")
        object.__setattr__(self, "K0", K0)
        object.__setattr__(self, "K1", K1)
        object.__setattr__(self, "M", float(self.M))
        object.__setattr__(self, "t", int(self.t))

    @property
    def Kdiff(self):
        return self.K1 - self.K0


def linear_step(x, K):
    K = np.atleast_2d(K)
    x = np.asarray(x, dtype=float)
    if K.shape[1] != x.shape[-1]:
        raise DimensionMismatch(f"gain {K.shape} cannot act on state of size {x.shape[-1]}")
    return x @ K.T


def switch_step(x, xi, params):
    """One step of the switching logic.

    Returns ``(u, xi_next, fallback_active)``.  While the counter is
    positive the fallback gain is held; otherwise the fallback is triggered
    (and the counter reset to ``t``) whenever ``||(K1 - K0) x|| >= M``.
    ``fallback_active`` reports whether the fallback branch was taken.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != params.K0.shape[1]:
        raise DimensionMismatch(
            f"state of shape {x.shape} incompatible with gains {params.K0.shape}")
    if not 0 <= xi <= params.t:
        raise ValueError(f"counter {xi} outside [0, {params.t}]")
    if xi > 0:
        u = linear_step(x, params.K0)
        fallback = True
    elif np.linalg.norm(linear_step(x, params.Kdiff)) >= params.M:
        xi = params.t
        u = linear_step(x, params.K0)
        fallback = True
    else:
        u = linear_step(x, params.K1)
        fallback = False
    return u, max(xi - 1, 0), fallback


def switch_step_batch(X, xi, params):
    """Vectorised ``switch_step`` over the rows of ``X``.

    ``xi`` is an integer array of counters, one per row.  The per-row
    arithmetic matches ``switch_step``.
    """
    held = xi > 0
    dev = np.linalg.norm(X @ params.Kdiff.T, axis=1)
    trigger = ~held & (dev >= params.M)
    fallback = held | trigger
    U = np.where(fallback[:, None], X @ params.K0.T, X @ params.K1.T)
    xi = np.where(trigger, params.t, xi)
    return U, np.maximum(xi - 1, 0), fallback
