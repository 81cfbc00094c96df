"""Outer solver: Gauss-Newton over the box with backtracking.

Each iteration linearizes the prediction model along the current
trajectory, checks first-order optimality from the operator-computed
gradient, takes a bounded least-squares step and backtracks until the
sufficient-decrease test passes. The accepted residual is reused for the
next linearization. An outer multiplier loop (``blm_solve``) drives the
equality violation below a target when a single large-penalty solve is not
accurate enough.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .bvls import solve_bvls
from .dense import build_dense_jacobian
from .problem import (alm_residual, build_equality_residual,
                      build_full_residual, jacobian_view)

ALPHA_MIN = 1e-12


@dataclass
class SolveReport:
    """Solution, multipliers and counters of one solve."""

    z_star: np.ndarray
    Phi: float
    lambda_p: np.ndarray
    lambda_q: np.ndarray
    iters: int
    ls_backtracks: int
    converged: bool
    bvls_solves: int = 0
    stalled: bool = False
    clipped_start: bool = False
    kkt_violation: float = 0.0
    h_inf: float = 0.0
    last_alpha: float = 1.0
    bvls_inner_iters: int = 0
    solve_time: float = 0.0
    cost_trace: list = field(default_factory=list)
    active_flags: np.ndarray = None


def kkt_check(d, L, U, gamma):
    """First-order test on the gradient d = J^T b.

    L and U are boolean masks of variables sitting at their bounds. Returns
    (optimal, worst violation): at lower bounds the multiplier d(j) may not
    be below -gamma, at upper bounds -d(j) may not be, and free entries of
    d must vanish to within gamma.
    """
    d = np.asarray(d, dtype=float)
    L = np.asarray(L, dtype=bool)
    U = np.asarray(U, dtype=bool)
    worst = 0.0
    if L.any():
        worst = max(worst, float(np.max(-d[L])))
    if U.any():
        worst = max(worst, float(np.max(d[U])))
    free = ~(L | U)
    if free.any():
        worst = max(worst, float(np.max(np.abs(d[free]))))
    return worst <= gamma, worst


def backtrack(residual_fn, z, dz, psi, dTdz, c, tau, alpha_min=ALPHA_MIN):
    """Step-size search of the accepted-decrease loop.

    The threshold follows the printed update rule: theta starts at
    c*alpha*dTdz and is rescaled by the new alpha after every cut, which is
    slightly more permissive than the plain Armijo product after the first
    cut. Returns (alpha, residual, cost, cuts, stalled).
    """
    alpha = 1.0
    theta = c * alpha * dTdz
    b = residual_fn(z + dz)
    phi = float(b @ b)
    cuts = 0
    while phi > psi + theta:
        alpha *= tau
        theta *= alpha
        if alpha < alpha_min:
            return alpha, b, phi, cuts, True
        b = residual_fn(z + alpha * dz)
        phi = float(b @ b)
        cuts += 1
    return alpha, b, phi, cuts, False


def solve_bvnlls(z0, ic, model, cfg, Lambda=None, rho_i=None,
                 warm_flags=None, structured=True):
    """Solve the penalized tracking problem from a feasible guess.

    With ``Lambda``/``rho_i`` set, the multiplier-shifted residual is
    minimized instead (same Jacobian structure, rescaled weights). The
    guess is clipped into the box if needed and flagged in the report.
    ``structured=False`` runs the identical iteration on explicitly
    constructed dense Jacobians.
    """
    t0 = time.perf_counter()
    ic = ic.validated(model, cfg.Np)
    shifted = Lambda is not None
    if shifted:
        rho_i = cfg.rho if rho_i is None else float(rho_i)
        Lambda = np.asarray(Lambda, dtype=float)
        w_eff = cfg.w * np.sqrt(cfg.rho / rho_i)

        def residual(z):
            return alm_residual(z, ic, model, cfg, Lambda, rho_i).r
    else:
        w_eff = cfg.w

        def residual(z):
            return build_full_residual(z, ic, model, cfg).r

    z = np.asarray(z0, dtype=float).copy()
    clipped = bool(np.any(z < cfg.p) or np.any(z > cfg.q))
    np.clip(z, cfg.p, cfg.q, out=z)

    n = cfg.n
    b = residual(z)
    flags = warm_flags
    trace = []
    backtracks = 0
    bvls_solves = 0
    bvls_inner = 0
    converged = False
    stalled = False
    iters = 0
    d_vec = np.zeros(n)
    L = U = None
    worst = np.inf

    for _ in range(cfg.max_iters):
        iters += 1
        view = jacobian_view(z, ic, model, cfg, w=w_eff)
        dense_j = None if structured else build_dense_jacobian(view)
        L = z <= cfg.p
        U = z >= cfg.q
        if structured:
            d_vec = view.gradient(b)
        else:
            d_vec = dense_j.T @ b
        ok, worst = kkt_check(d_vec, L, U, cfg.gamma)
        if ok:
            converged = True
            break
        res = solve_bvls(view, b, cfg.p - z, cfg.q - z, warm=flags,
                         tol=cfg.bvls_tol, structured=structured,
                         dense_j=dense_j)
        flags = res.state.flags
        bvls_solves += 1
        bvls_inner += res.inner_solves
        dz = res.dz
        dTdz = float(d_vec @ dz)
        psi = float(b @ b)
        alpha, b_new, phi, cuts, stall = backtrack(
            residual, z, dz, psi, dTdz, cfg.c, cfg.tau)
        backtracks += cuts
        maxviol = float(max(np.max(cfg.p - z), np.max(z - cfg.q)))
        trace.append((psi, phi, alpha, dTdz, maxviol))
        if stall:
            stalled = True
            break
        z = z + alpha * dz
        b = b_new
    else:
        # iteration cap: refresh the gradient so the multipliers are honest
        view = jacobian_view(z, ic, model, cfg, w=w_eff)
        L = z <= cfg.p
        U = z >= cfg.q
        if structured:
            d_vec = view.gradient(b)
        else:
            d_vec = build_dense_jacobian(view).T @ b
        converged, worst = kkt_check(d_vec, L, U, cfg.gamma)

    lam_p = np.where(L, d_vec, 0.0)
    lam_q = np.where(U, -d_vec, 0.0)
    h = b[n:] if not shifted else b[n:] - Lambda / rho_i
    return SolveReport(
        z_star=z, Phi=float(b @ b), lambda_p=lam_p, lambda_q=lam_q,
        iters=iters, ls_backtracks=backtracks, converged=converged,
        bvls_solves=bvls_solves, stalled=stalled, clipped_start=clipped,
        kkt_violation=float(worst), h_inf=float(np.max(np.abs(h))) if h.size else 0.0,
        last_alpha=trace[-1][2] if trace else 1.0,
        bvls_inner_iters=bvls_inner, solve_time=time.perf_counter() - t0,
        cost_trace=trace, active_flags=flags)


@dataclass
class BlmReport:
    """Final inner report plus the multiplier / feasibility history."""

    report: SolveReport
    lambda_star: np.ndarray
    lambda_trace: list
    rho_trace: list
    feas_trace: list
    outer_iters: int
    converged: bool


def blm_solve(z0, ic, model, cfg, outer_cap=20, feas_target=1e-8,
              rho0=None, rho_factor=10.0, structured=True):
    """Multiplier outer loop around the shifted-residual solves.

    Repeats solve_bvnlls on the multiplier-shifted residual, updating
    Lambda <- Lambda + rho_i * h(z*) and growing the penalty by rho_factor,
    until the equality violation drops below feas_target. With the default
    rho0 = cfg.rho and one outer iteration this reduces to the plain
    single-penalty solve.
    """
    ic = ic.validated(model, cfg.Np)
    rho_i = cfg.rho if rho0 is None else float(rho0)
    Lambda = np.zeros(cfg.m - cfg.n)
    z = np.asarray(z0, dtype=float)
    flags = None
    lam_trace, rho_trace, feas_trace = [], [], []
    report = None
    converged = False
    outer = 0
    for _ in range(outer_cap):
        outer += 1
        report = solve_bvnlls(z, ic, model, cfg, Lambda=Lambda, rho_i=rho_i,
                              warm_flags=flags, structured=structured)
        z = report.z_star
        flags = report.active_flags
        h = build_equality_residual(z, ic, model, cfg)
        feas = float(np.max(np.abs(h))) if h.size else 0.0
        lam_trace.append(Lambda.copy())
        rho_trace.append(rho_i)
        feas_trace.append(feas)
        if feas <= feas_target:
            converged = True
            break
        Lambda = Lambda + rho_i * h
        rho_i *= rho_factor
    return BlmReport(report=report, lambda_star=Lambda, lambda_trace=lam_trace,
                     rho_trace=rho_trace, feas_trace=feas_trace,
                     outer_iters=outer, converged=converged)
