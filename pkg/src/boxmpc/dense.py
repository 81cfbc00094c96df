"""Dense-matrix reference implementations.

Everything here forms the Jacobian explicitly and leans on numpy's linear
algebra. These routines exist to cross-check the matrix-free solver path
(the ``check`` harness command) and as an independently-coded oracle in the
test suite; they share no index arithmetic with the operator kernels. The
Jacobian is assembled row-block by row-block from the stage coefficients,
whereas the operators walk it column by column.
"""

import numpy as np

from .problem import build_full_residual


def _u_cols(beta, nu, ny, Nu):
    beta = min(beta, Nu - 1)
    off = beta * (nu + ny)
    return off, off + nu


def _y_cols(beta, nu, ny, Nu):
    if beta < Nu:
        off = beta * (nu + ny) + nu
    else:
        off = Nu * (nu + ny) + (beta - Nu) * ny
    return off, off + ny


def build_dense_jacobian(view):
    """Explicit m-by-n residual Jacobian from a stored JacobianView."""
    d = view.dims
    if not view.stored:
        view = view.materialized()
    na, nb, nu, ny, Nu, Np = d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np
    n, m = d.n, d.m
    J = np.zeros((m, n))
    J[:n, :n] = np.diag(view.w)
    for s in range(1, Np + 1):
        rows = slice(n + (s - 1) * ny, n + s * ny)
        for j in range(0, na + 1):
            t = s - j  # predicted output y_{k+t}
            if t >= 1:
                c0, c1 = _y_cols(t - 1, nu, ny, Nu)
                J[rows, c0:c1] += view.A[s - 1, j]
        for j in range(1, nb + 1):
            t = s - j  # input u_{k+t}; moves beyond the horizon are blocked
            if t >= 0:
                c0, c1 = _u_cols(t, nu, ny, Nu)
                J[rows, c0:c1] += view.B[s - 1, j - 1]
    return J


def bvls_dense(J, b, lb, ub, tol=1e-10, max_iter=None):
    """Primal active-set solve of min ||J x + b|| s.t. lb <= x <= ub.

    Plain numpy implementation: the free subproblem is solved with lstsq
    from scratch at every active-set change. Returns (x, lam_lo, lam_hi,
    converged).
    """
    m, n = J.shape
    if max_iter is None:
        max_iter = 30 * (n + 1)
    x = np.clip(np.zeros(n), lb, ub)
    state = np.zeros(n, dtype=int)  # -1 lower, 0 free, +1 upper
    state[x <= lb] = -1
    state[x >= ub] = 1
    x[state == -1] = lb[state == -1]
    x[state == 1] = ub[state == 1]
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        # inner: free least squares, clip to first blocking bound
        for _ in range(2 * n + 2):
            free = np.flatnonzero(state == 0)
            if free.size == 0:
                break
            offset = b.copy()
            bound = np.flatnonzero(state != 0)
            if bound.size:
                offset += J[:, bound] @ x[bound]
            zf = np.linalg.lstsq(J[:, free], -offset, rcond=None)[0]
            lo_v = zf < lb[free]
            hi_v = zf > ub[free]
            if not lo_v.any() and not hi_v.any():
                x[free] = zf
                break
            alphas = np.full(free.size, np.inf)
            tgt = np.where(lo_v, lb[free], np.where(hi_v, ub[free], 0.0))
            viol = lo_v | hi_v
            den = zf - x[free]
            with np.errstate(divide="ignore", invalid="ignore"):
                a = (tgt - x[free]) / den
            alphas[viol] = np.maximum(a[viol], 0.0)
            kblk = int(np.argmin(alphas))
            alpha = alphas[kblk]
            if alpha > 0:
                x[free] += alpha * (zf - x[free])
            jb = free[kblk]
            if lo_v[kblk]:
                x[jb] = lb[jb]
                state[jb] = -1
            else:
                x[jb] = ub[jb]
                state[jb] = 1
        r = J @ x + b
        g = J.T @ r
        freeg = np.abs(g[state == 0]).max() if (state == 0).any() else 0.0
        viol = np.zeros(n)
        viol[state == -1] = -g[state == -1]
        viol[state == 1] = g[state == 1]
        if freeg <= tol and viol.max(initial=0.0) <= tol:
            converged = True
            break
        t = int(np.argmax(viol))
        state[t] = 0
    lam_lo = np.zeros(n)
    lam_hi = np.zeros(n)
    r = J @ x + b
    g = J.T @ r
    lam_lo[state == -1] = g[state == -1]
    lam_hi[state == 1] = -g[state == 1]
    return x, lam_lo, lam_hi, converged


def solve_bvnlls_dense(z0, ic, model, cfg, residual_fn=None):
    """Dense re-implementation of the outer solver for cross-checking.

    Same iteration as the operator path (linearize, box least-squares step,
    backtracking) but with an explicitly constructed Jacobian and numpy
    linear algebra throughout.
    """
    from .problem import jacobian_view

    if residual_fn is None:
        residual_fn = lambda z: build_full_residual(z, ic, model, cfg).r
    z = np.clip(np.asarray(z0, dtype=float), cfg.p, cfg.q)
    b = residual_fn(z)
    iters = 0
    bvls_solves = 0
    converged = False
    for _ in range(cfg.max_iters):
        iters += 1
        view = jacobian_view(z, ic, model, cfg)
        J = build_dense_jacobian(view)
        L = z <= cfg.p
        U = z >= cfg.q
        d = J.T @ b
        lam_p = np.where(L, d, 0.0)
        lam_q = np.where(U, -d, 0.0)
        free = ~(L | U)
        if (lam_p[L] >= -cfg.gamma).all() and (lam_q[U] >= -cfg.gamma).all() \
                and (np.abs(d[free]) <= cfg.gamma).all():
            converged = True
            break
        dz, _, _, _ = bvls_dense(J, b, cfg.p - z, cfg.q - z, tol=cfg.bvls_tol)
        bvls_solves += 1
        alpha = 1.0
        theta = cfg.c * alpha * (d @ dz)
        psi = b @ b
        b_new = residual_fn(z + dz)
        phi = b_new @ b_new
        stalled = False
        while phi > psi + theta:
            alpha *= cfg.tau
            theta *= alpha
            if alpha < 1e-12:
                stalled = True
                break
            b_new = residual_fn(z + alpha * dz)
            phi = b_new @ b_new
        if stalled:
            break
        z = z + alpha * dz
        b = b_new
    return {
        "z": z, "phi": float(b @ b), "iters": iters,
        "bvls_solves": bvls_solves, "converged": converged,
    }
