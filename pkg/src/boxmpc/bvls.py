"""Bounded-variable least squares on the operator view of J.

Primal active-set method: the free-variable subproblem is solved through
the recursive thin QR factorization, infeasible steps are clipped to the
first blocking bound, and bound variables with the most negative multiplier
are released one at a time. Warm starts reuse the partition of a previous
solve; the factorization itself is rebuilt per call because J changes
between outer linearizations.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .recqr import RANK_TOL_REL, RankDeficientError


@dataclass
class ActiveSetState:
    """Partition of the variables plus the iterate that produced it."""

    flags: np.ndarray  # -1 lower, 0 free, +1 upper
    x: np.ndarray
    qr_arrays: tuple = None

    @property
    def F(self):
        return tuple(int(j) + 1 for j in np.flatnonzero(self.flags == 0))

    @property
    def L(self):
        return tuple(int(j) + 1 for j in np.flatnonzero(self.flags == -1))

    @property
    def U(self):
        return tuple(int(j) + 1 for j in np.flatnonzero(self.flags == 1))


@dataclass
class BvlsResult:
    dz: np.ndarray
    lambda_lower: np.ndarray
    lambda_upper: np.ndarray
    state: ActiveSetState
    gradient: np.ndarray
    converged: bool
    stalled: bool
    iterations: int
    inner_solves: int
    n_changes: int

    def __iter__(self):
        return iter((self.dz, self.lambda_lower, self.lambda_upper, self.state))


def solve_bvls(view, b, pbar, qbar, warm=None, tol=1e-8, max_iter=None,
               structured=True, dense_j=None):
    """Minimize ||J dz + b||^2 over pbar <= dz <= qbar.

    ``warm`` is an ActiveSetState (or plain flags vector) from a related
    solve. Raises RankDeficientError when a free column set loses rank.
    Pass ``structured=False`` together with an explicit ``dense_j`` to run
    the dense reference path on identical logic.
    """
    view = view.materialized()
    d = view.dims
    n, m = d.n, d.m
    b = np.ascontiguousarray(np.asarray(b, dtype=float))
    pbar = np.ascontiguousarray(np.asarray(pbar, dtype=float))
    qbar = np.ascontiguousarray(np.asarray(qbar, dtype=float))
    if b.shape != (m,):
        raise ValueError(f"b must have length {m}")
    if pbar.shape != (n,) or qbar.shape != (n,):
        raise ValueError(f"bounds must have length {n}")
    if np.any(pbar > qbar):
        raise ValueError("lower bounds exceed upper bounds")
    if max_iter is None:
        max_iter = 10 * n

    if warm is None:
        flags = np.zeros(n, dtype=np.int8)
        x = np.zeros(n)
        # honor bounds that exclude zero
        up = pbar > 0.0
        dn = qbar < 0.0
        flags[up] = -1
        flags[dn] = 1
    else:
        wf = warm.flags if isinstance(warm, ActiveSetState) else warm
        flags = np.array(wf, dtype=np.int8).copy()
        if flags.shape != (n,):
            raise ValueError(f"warm flags must have length {n}")
        x = np.zeros(n)

    if structured:
        Jd = kernels._EMPTY_DENSE
        Aa, Bb = view.A, view.B
    else:
        if dense_j is None:
            raise ValueError("dense mode needs the explicit Jacobian")
        Jd = np.ascontiguousarray(dense_j)
        Aa, Bb = kernels._EMPTY_COEF4, kernels._EMPTY_COEF4

    max_norm = np.sqrt(float(np.max(view.col_norms_sq())))
    rank_tol = RANK_TOL_REL * max_norm

    (status, bad_col, outer, inner_solves, n_changes, g, lam_lo, lam_hi,
     Q, R, u, Farr, Bhi, k) = kernels.bvls_solve(
        b, pbar, qbar, flags, x, tol, max_iter, structured, rank_tol,
        view.w, Aa, Bb, d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np, Jd)

    if status == 2:
        raise RankDeficientError(int(bad_col) + 1)
    state = ActiveSetState(flags=flags, x=x, qr_arrays=(Q, R, u, Farr, Bhi, k))
    return BvlsResult(dz=x, lambda_lower=lam_lo, lambda_upper=lam_hi,
                      state=state, gradient=g, converged=(status == 0),
                      stalled=(status == 3), iterations=outer,
                      inner_solves=inner_solves, n_changes=n_changes)
