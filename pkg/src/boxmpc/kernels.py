"""Compiled kernels for the matrix-free residual Jacobian and its thin QR factors.

Conventions used by every kernel in this module:

- Decision variables are 0-indexed columns ``i`` in ``[0, n)`` with
  ``n = Nu*nu + Np*ny``; residual rows are ``[0, m)`` with ``m = n + Np*ny``.
  Rows ``[0, n)`` hold the diagonal weight block, rows ``[n, m)`` the stacked
  equality blocks (one block of ``ny`` rows per prediction step).
- ``A`` has shape ``(Np, na+1, ny, ny)``: ``A[s-1, j]`` is the coefficient of
  the output lagged ``j`` steps in the equality block of prediction step ``s``.
- ``B`` has shape ``(Np, nb, ny, nu)``: ``B[s-1, j-1]`` is the coefficient of
  the input lagged ``j`` steps.
- ``w`` is the diagonal of the weight block (penalty scaling already folded in).
- Inputs beyond the control horizon are blocked to the last move, which turns
  the columns of the last input stage into running sums of B coefficients.

The QR kernels maintain a thin factorization of the free-column submatrix with
arithmetic restricted to the predicted nonzero pattern: column ``j`` of Q can
only be nonzero on the free rows ``Farr[0..j]`` and on the contiguous band
``[lo0, Bhi[j])``, where ``lo0`` is the band start of the first free column.
Entries outside that pattern cancel in exact arithmetic; the update kernels
zero them explicitly after Givens sweeps.

Passing ``structured=False`` switches every kernel to full-range arithmetic on
an explicitly formed Jacobian ``Jd``; this is the dense reference path used
for benchmarking. The dummy arrays (``_EMPTY_*``) stand in for whichever of
the two representations is unused.
"""

import numpy as np
from numba import njit

_EMPTY_DENSE = np.zeros((1, 1))
_EMPTY_COEF4 = np.zeros((1, 1, 1, 1))


@njit(cache=True)
def decode_col(i, nu, ny, Nu):
    """Map column i -> (stage beta, channel eta0); eta0 < nu means input."""
    blk = nu + ny
    lim = Nu * blk
    if i < lim:
        beta = i // blk
        eta0 = i - beta * blk
    else:
        r = i - lim
        beta = Nu + r // ny
        eta0 = nu + r % ny
    return beta, eta0


@njit(cache=True)
def col_band(i, na, nb, nu, ny, Nu, Np):
    """Nonzero band [lo, hi) of column i inside the equality rows."""
    n = Nu * nu + Np * ny
    m = n + Np * ny
    beta, eta0 = decode_col(i, nu, ny, Nu)
    lo = Nu * nu + (Np + beta) * ny
    if beta == Nu - 1 and eta0 < nu:
        hi = m
    elif eta0 >= nu:
        hi = min(lo + (na + 1) * ny, m)
    else:
        hi = min(lo + nb * ny, m)
    return lo, hi


@njit(cache=True)
def jix_acc(v, i, x, w, A, B, na, nb, nu, ny, Nu, Np):
    """v += x * (column i of J). Returns the touched band [lo, hi)."""
    n = Nu * nu + Np * ny
    m = n + Np * ny
    v[i] += w[i] * x
    beta, eta0 = decode_col(i, nu, ny, Nu)
    lo = Nu * nu + (Np + beta) * ny
    if beta == Nu - 1 and eta0 < nu:
        hi = m
        j = 0
        for jp in range(lo, m, ny):
            j += 1
            nsum = min(j, nb)
            for jj in range(ny):
                acc = 0.0
                for ip in range(nsum):
                    acc += B[beta + j - 1, ip, jj, eta0]
                v[jp + jj] += x * acc
    elif eta0 >= nu:
        c = eta0 - nu
        hi = min(lo + (na + 1) * ny, m)
        j = 0
        for jp in range(lo, hi, ny):
            for jj in range(ny):
                v[jp + jj] += x * A[beta + j, j, jj, c]
            j += 1
    else:
        hi = min(lo + nb * ny, m)
        j = 0
        for jp in range(lo, hi, ny):
            for jj in range(ny):
                v[jp + jj] += x * B[beta + j, j, jj, eta0]
            j += 1
    return lo, hi


@njit(cache=True)
def jtix_dot(i, X, w, A, B, na, nb, nu, ny, Nu, Np):
    """Inner product of column i of J with X, touching only its nonzeros."""
    n = Nu * nu + Np * ny
    m = n + Np * ny
    acc = w[i] * X[i]
    beta, eta0 = decode_col(i, nu, ny, Nu)
    lo = Nu * nu + (Np + beta) * ny
    if beta == Nu - 1 and eta0 < nu:
        j = 0
        for jp in range(lo, m, ny):
            j += 1
            nsum = min(j, nb)
            for jj in range(ny):
                bb = 0.0
                for ip in range(nsum):
                    bb += B[beta + j - 1, ip, jj, eta0]
                acc += X[jp + jj] * bb
    elif eta0 >= nu:
        c = eta0 - nu
        hi = min(lo + (na + 1) * ny, m)
        j = 0
        for jp in range(lo, hi, ny):
            for jj in range(ny):
                acc += X[jp + jj] * A[beta + j, j, jj, c]
            j += 1
    else:
        hi = min(lo + nb * ny, m)
        j = 0
        for jp in range(lo, hi, ny):
            for jj in range(ny):
                acc += X[jp + jj] * B[beta + j, j, jj, eta0]
            j += 1
    return acc


@njit(cache=True)
def colnorm_sq(i, w, A, B, na, nb, nu, ny, Nu, Np):
    """Squared 2-norm of column i of J."""
    n = Nu * nu + Np * ny
    m = n + Np * ny
    acc = w[i] * w[i]
    beta, eta0 = decode_col(i, nu, ny, Nu)
    lo = Nu * nu + (Np + beta) * ny
    if beta == Nu - 1 and eta0 < nu:
        j = 0
        for jp in range(lo, m, ny):
            j += 1
            nsum = min(j, nb)
            for jj in range(ny):
                bb = 0.0
                for ip in range(nsum):
                    bb += B[beta + j - 1, ip, jj, eta0]
                acc += bb * bb
    elif eta0 >= nu:
        c = eta0 - nu
        hi = min(lo + (na + 1) * ny, m)
        j = 0
        for jp in range(lo, hi, ny):
            for jj in range(ny):
                a = A[beta + j, j, jj, c]
                acc += a * a
            j += 1
    else:
        hi = min(lo + nb * ny, m)
        j = 0
        for jp in range(lo, hi, ny):
            for jj in range(ny):
                b = B[beta + j, j, jj, eta0]
                acc += b * b
            j += 1
    return acc


@njit(cache=True)
def fetch_col(v, i, x, structured, w, A, B, na, nb, nu, ny, Nu, Np, Jd):
    """Overwrite v's nonzero slots with x * (column i); return band [lo, hi)."""
    if structured:
        lo, hi = col_band(i, na, nb, nu, ny, Nu, Np)
        v[i] = 0.0
        for r in range(lo, hi):
            v[r] = 0.0
        jix_acc(v, i, x, w, A, B, na, nb, nu, ny, Nu, Np)
        return lo, hi
    m = Jd.shape[0]
    n = Jd.shape[1]
    for r in range(m):
        v[r] = x * Jd[r, i]
    return n, m


@njit(cache=True)
def acc_col(v, i, x, structured, w, A, B, na, nb, nu, ny, Nu, Np, Jd):
    """v += x * (column i), structured or dense."""
    if structured:
        jix_acc(v, i, x, w, A, B, na, nb, nu, ny, Nu, Np)
    else:
        for r in range(Jd.shape[0]):
            v[r] += x * Jd[r, i]


@njit(cache=True)
def dot_col(i, X, structured, w, A, B, na, nb, nu, ny, Nu, Np, Jd):
    """Column i of J dotted with X, structured or dense."""
    if structured:
        return jtix_dot(i, X, w, A, B, na, nb, nu, ny, Nu, Np)
    acc = 0.0
    for r in range(Jd.shape[0]):
        acc += Jd[r, i] * X[r]
    return acc


# --- thin QR on the free columns ------------------------------------------

@njit(cache=True)
def _q_dot(Q, col, x, Farr, ntop, lo, hi, structured, n):
    s = 0.0
    if structured:
        for jj in range(ntop):
            r = Farr[jj]
            s += Q[r, col] * x[r]
    else:
        for r in range(n):
            s += Q[r, col] * x[r]
    for r in range(lo, hi):
        s += Q[r, col] * x[r]
    return s


@njit(cache=True)
def _q_axpy(Q, col, a, x, Farr, ntop, lo, hi, structured, n):
    if structured:
        for jj in range(ntop):
            r = Farr[jj]
            x[r] += a * Q[r, col]
    else:
        for r in range(n):
            x[r] += a * Q[r, col]
    for r in range(lo, hi):
        x[r] += a * Q[r, col]


@njit(cache=True)
def _rot_pair(Q, R, u, k, col0, r, c, s, Farr, ntop, lo, hi, skip_row,
              structured, n):
    """Apply a Givens rotation to R rows (r, r+1) from column col0 on,
    Q columns (r, r+1) and the rhs coefficient pair."""
    for col in range(col0, k):
        x1 = R[r, col]
        x2 = R[r + 1, col]
        R[r, col] = c * x1 + s * x2
        R[r + 1, col] = -s * x1 + c * x2
    if structured:
        for jj in range(ntop):
            row = Farr[jj]
            if row == skip_row:
                continue
            x1 = Q[row, r]
            x2 = Q[row, r + 1]
            Q[row, r] = c * x1 + s * x2
            Q[row, r + 1] = -s * x1 + c * x2
    else:
        for row in range(n):
            if row == skip_row:
                continue
            x1 = Q[row, r]
            x2 = Q[row, r + 1]
            Q[row, r] = c * x1 + s * x2
            Q[row, r + 1] = -s * x1 + c * x2
    for row in range(lo, hi):
        x1 = Q[row, r]
        x2 = Q[row, r + 1]
        Q[row, r] = c * x1 + s * x2
        Q[row, r + 1] = -s * x1 + c * x2
    x1 = u[r]
    x2 = u[r + 1]
    u[r] = c * x1 + s * x2
    u[r + 1] = -s * x1 + c * x2


@njit(cache=True)
def _flip_sign(Q, R, u, k, r, Farr, ntop, lo, hi, structured, n):
    for col in range(r, k):
        R[r, col] = -R[r, col]
    if structured:
        for jj in range(ntop):
            Q[Farr[jj], r] = -Q[Farr[jj], r]
    else:
        for row in range(n):
            Q[row, r] = -Q[row, r]
    for row in range(lo, hi):
        Q[row, r] = -Q[row, r]
    u[r] = -u[r]


@njit(cache=True)
def qr_insert(Q, R, u, cres, Farr, Bhi, k, t, have_rhs, structured,
              rank_tol, w, A, B, na, nb, nu, ny, Nu, Np, Jd):
    """Insert column t into the factorization, keeping free indices sorted.

    Returns (k_new, pos, n_skipped, status); status 1 flags rank deficiency.
    New columns are orthogonalized by modified Gram-Schmidt with one automatic
    reorthogonalization pass when the norm drops below half (two passes at
    most, after which the column is declared dependent).
    """
    n = Nu * nu + Np * ny
    m = Q.shape[0]

    pos = 0
    while pos < k and Farr[pos] < t:
        pos += 1

    work = np.zeros(m)
    if structured:
        lo_t, hi_t = col_band(t, na, nb, nu, ny, Nu, Np)
        jix_acc(work, t, 1.0, w, A, B, na, nb, nu, ny, Nu, Np)
    else:
        lo_t, hi_t = n, m
        for r in range(m):
            work[r] = Jd[r, t]

    # working support: all current free rows plus t, band [wlo, whi)
    if structured:
        if k > 0:
            lo0 = col_band(Farr[0], na, nb, nu, ny, Nu, Np)[0]
            wlo = min(lo0, lo_t)
            whi = max(Bhi[k - 1], hi_t)
        else:
            lo0 = lo_t
            wlo, whi = lo_t, hi_t
    else:
        lo0 = n
        wlo, whi = n, m

    anorm = 0.0
    if structured:
        anorm += work[t] * work[t]
        for r in range(lo_t, hi_t):
            anorm += work[r] * work[r]
    else:
        for r in range(m):
            anorm += work[r] * work[r]
    anorm = np.sqrt(anorm)

    rcol = np.zeros(k + 1)
    # leading columns whose band ends before this one starts give exact zeros
    n_skipped = 0
    jstart = 0
    if structured:
        while jstart < k and Bhi[jstart] <= lo_t:
            jstart += 1
        n_skipped = jstart
    for j in range(jstart, k):
        hi_j = Bhi[j] if structured else m
        rj = _q_dot(Q, j, work, Farr, j + 1, lo0, hi_j, structured, n)
        rcol[j] = rj
        _q_axpy(Q, j, -rj, work, Farr, j + 1, lo0, hi_j, structured, n)

    def _wnorm():
        s = 0.0
        if structured:
            for jj in range(k):
                r = Farr[jj]
                s += work[r] * work[r]
            s += work[t] * work[t]
        else:
            for r in range(n):
                s += work[r] * work[r]
        for r in range(wlo, whi):
            s += work[r] * work[r]
        return np.sqrt(s)

    nrm = _wnorm()
    if nrm < 0.5 * anorm:
        # reorthogonalize: corrections may fill R entries skipped above
        for j in range(k):
            hi_j = Bhi[j] if structured else m
            dr = _q_dot(Q, j, work, Farr, j + 1, lo0, hi_j, structured, n)
            rcol[j] += dr
            _q_axpy(Q, j, -dr, work, Farr, j + 1, lo0, hi_j, structured, n)
        nrm2 = _wnorm()
        if nrm2 < 0.5 * nrm or nrm2 <= rank_tol:
            return k, pos, n_skipped, 1
        nrm = nrm2
    if nrm <= rank_tol:
        return k, pos, n_skipped, 1

    inv = 1.0 / nrm
    if structured:
        for jj in range(k):
            r = Farr[jj]
            Q[r, k] = work[r] * inv
        Q[t, k] = work[t] * inv
    else:
        for r in range(n):
            Q[r, k] = work[r] * inv
    for r in range(wlo, whi):
        Q[r, k] = work[r] * inv
    rcol[k] = nrm

    if have_rhs:
        # t is not yet in Farr; fold it in by direct indexing
        un = 0.0
        if structured:
            for jj in range(k):
                r = Farr[jj]
                un += Q[r, k] * cres[r]
            un += Q[t, k] * cres[t]
            for r in range(wlo, whi):
                un += Q[r, k] * cres[r]
            for jj in range(k):
                r = Farr[jj]
                cres[r] -= un * Q[r, k]
            cres[t] -= un * Q[t, k]
            for r in range(wlo, whi):
                cres[r] -= un * Q[r, k]
        else:
            for r in range(m):
                un += Q[r, k] * cres[r]
            for r in range(m):
                cres[r] -= un * Q[r, k]
        u[k] = un
    else:
        u[k] = 0.0

    # splice the structure sets at the sorted position
    oldBhi_last = Bhi[k - 1] if k > 0 else 0
    for j in range(k, pos, -1):
        Farr[j] = Farr[j - 1]
    Farr[pos] = t
    kk = k + 1
    prev = Bhi[pos - 1] if pos > 0 else 0
    for j in range(pos, kk):
        if structured:
            hj = col_band(Farr[j], na, nb, nu, ny, Nu, Np)[1]
        else:
            hj = m
        prev = max(prev, hj)
        Bhi[j] = prev

    if pos < k:
        # move the appended R column into place and restore triangularity
        for col in range(k, pos, -1):
            for row in range(kk):
                R[row, col] = R[row, col - 1]
        for row in range(k):
            R[row, pos] = rcol[row]
        R[k, pos] = rcol[k]
        for row in range(k + 1, kk):
            R[row, pos] = 0.0
        for r in range(k - 1, pos - 1, -1):
            a_ = R[r, pos]
            b_ = R[r + 1, pos]
            h = np.hypot(a_, b_)
            if h == 0.0:
                continue
            c = a_ / h
            s = b_ / h
            # the spike column sits left of the triangular sweep range
            R[r, pos] = h
            R[r + 1, pos] = 0.0
            _rot_pair(Q, R, u, kk, r + 1, r, c, s, Farr, kk, wlo, whi, -1,
                      structured, n)
        for r in range(pos, kk):
            if R[r, r] < 0.0:
                _flip_sign(Q, R, u, kk, r, Farr, kk, wlo, whi, structured, n)
        if structured:
            # rotations smear roundoff outside the predicted pattern; zero it
            for c in range(pos, kk):
                for r in range(Bhi[c], whi):
                    Q[r, c] = 0.0
                for jj in range(c + 1, kk):
                    Q[Farr[jj], c] = 0.0
    else:
        for row in range(k):
            R[row, k] = rcol[row]
        R[k, k] = rcol[k]

    return kk, pos, n_skipped, 0


@njit(cache=True)
def qr_delete(Q, R, u, cres, Farr, Bhi, k, pos, have_rhs, ctop_val,
              structured, na, nb, nu, ny, Nu, Np):
    """Remove the column at factor position pos; returns the new size.

    The vacated row of Q is zeroed rather than rotated, and the dropped
    basis direction is folded back into the right-hand-side residual.
    """
    n = Nu * nu + Np * ny
    m = Q.shape[0]
    t = Farr[pos]
    old_lo0 = col_band(Farr[0], na, nb, nu, ny, Nu, Np)[0] if structured else n

    oldBhi = np.empty(k, dtype=np.int64)
    for j in range(k):
        oldBhi[j] = Bhi[j]

    kk = k - 1
    for col in range(pos, kk):
        for row in range(k):
            R[row, col] = R[row, col + 1]
    for r in range(pos, kk):
        a_ = R[r, r]
        b_ = R[r + 1, r]
        h = np.hypot(a_, b_)
        if h != 0.0:
            c = a_ / h
            s = b_ / h
            hi_r = oldBhi[r + 1] if structured else m
            _rot_pair(Q, R, u, kk, r, r, c, s, Farr, min(r + 2, k), old_lo0,
                      hi_r, t, structured, n)
            R[r, r] = h
            R[r + 1, r] = 0.0

    if have_rhs:
        ud = u[kk]
        if structured:
            for jj in range(k):
                row = Farr[jj]
                if row != t:
                    cres[row] += ud * Q[row, kk]
            for row in range(old_lo0, oldBhi[kk]):
                cres[row] += ud * Q[row, kk]
        else:
            for row in range(m):
                if row != t:
                    cres[row] += ud * Q[row, kk]
        cres[t] = ctop_val

    # drop the last column, zero the vacated row and stale entries
    if structured:
        for jj in range(k):
            Q[Farr[jj], kk] = 0.0
        for row in range(old_lo0, oldBhi[kk]):
            Q[row, kk] = 0.0
    else:
        for row in range(m):
            Q[row, kk] = 0.0
    for row in range(k):
        R[row, kk] = 0.0
    u[kk] = 0.0
    for c in range(pos, kk):
        Q[t, c] = 0.0

    for j in range(pos, kk):
        Farr[j] = Farr[j + 1]
    Farr[kk] = 0
    prev = Bhi[pos - 1] if pos > 0 else 0
    for j in range(pos, kk):
        if structured:
            hj = col_band(Farr[j], na, nb, nu, ny, Nu, Np)[1]
        else:
            hj = m
        prev = max(prev, hj)
        Bhi[j] = prev
    Bhi[kk] = 0

    if structured and kk > 0:
        new_lo0 = col_band(Farr[0], na, nb, nu, ny, Nu, Np)[0]
        if new_lo0 > old_lo0:
            for c in range(kk):
                for row in range(old_lo0, new_lo0):
                    Q[row, c] = 0.0
        for c in range(pos, kk):
            for row in range(Bhi[c], oldBhi[c + 1]):
                Q[row, c] = 0.0
        for r in range(pos, kk):
            if R[r, r] < 0.0:
                _flip_sign(Q, R, u, kk, r, Farr, kk, new_lo0, Bhi[kk - 1],
                           structured, n)
    elif not structured:
        for r in range(pos, kk):
            if R[r, r] < 0.0:
                _flip_sign(Q, R, u, kk, r, Farr, kk, n, m, structured, n)
    return kk


@njit(cache=True)
def qr_set_rhs(Q, u, cres, ctop, c_full, Farr, Bhi, k, structured,
               na, nb, nu, ny, Nu, Np):
    """Orthogonalize a fresh right-hand side against the current basis."""
    n = Nu * nu + Np * ny
    m = Q.shape[0]
    for r in range(n):
        ctop[r] = c_full[r]
    for r in range(m):
        cres[r] = c_full[r]
    lo0 = col_band(Farr[0], na, nb, nu, ny, Nu, Np)[0] if (structured and k > 0) else n
    for j in range(k):
        uj = _q_dot(Q, j, cres, Farr, j + 1, lo0, Bhi[j] if structured else m,
                    structured, n)
        _q_axpy(Q, j, -uj, cres, Farr, j + 1, lo0, Bhi[j] if structured else m,
                structured, n)
        u[j] = uj


@njit(cache=True)
def qr_add_rhs_offset(R, u, ctop, k, pos, var, s, wvar):
    """Account a change c <- c + s * J_var while var sits at factor position pos."""
    for j in range(k):
        u[j] += s * R[j, pos]
    ctop[var] += s * wvar


@njit(cache=True)
def qr_solve(R, u, k, x):
    """Back-substitute R x = -u; returns 1 on a vanishing pivot."""
    tiny = 1e-300
    for i in range(k - 1, -1, -1):
        s = -u[i]
        for j in range(i + 1, k):
            s -= R[i, j] * x[j]
        if abs(R[i, i]) <= tiny:
            return 1
        x[i] = s / R[i, i]
    return 0


@njit(cache=True)
def grad_all(X, w, A, B, na, nb, nu, ny, Nu, Np):
    """All n column-with-X inner products (the full gradient J^T X)."""
    n = Nu * nu + Np * ny
    d = np.empty(n)
    for i in range(n):
        d[i] = jtix_dot(i, X, w, A, B, na, nb, nu, ny, Nu, Np)
    return d


@njit(cache=True)
def colnorm_all(w, A, B, na, nb, nu, ny, Nu, Np):
    """Squared 2-norms of all n columns."""
    n = Nu * nu + Np * ny
    out = np.empty(n)
    for i in range(n):
        out[i] = colnorm_sq(i, w, A, B, na, nb, nu, ny, Nu, Np)
    return out


# --- bounded-variable least squares ----------------------------------------

@njit(cache=True)
def bvls_solve(b, pbar, qbar, flags, x, tol, max_iter, structured, rank_tol,
               w, A, B, na, nb, nu, ny, Nu, Np, Jd):
    """Primal active-set solve of min ||J x + b|| s.t. pbar <= x <= qbar.

    ``flags`` carries the warm-started partition (-1 lower, 0 free, +1
    upper) and is updated in place together with ``x``. The free-column
    thin QR is built once and then updated recursively; the free-variable
    subproblem right-hand side is maintained through the factorization.

    Returns (status, bad_col, outer_iters, inner_solves, n_changes, g,
    lam_lo, lam_hi, Q, R, u, Farr, Bhi, k). Status: 0 converged, 1 iteration
    cap, 2 rank deficiency in column bad_col, 3 stalled on the anti-cycling
    guard.
    """
    n = Nu * nu + Np * ny
    m = n + Np * ny
    Q = np.zeros((m, n))
    R = np.zeros((n, n))
    u = np.zeros(n)
    cres = np.zeros(m)
    ctop = np.zeros(n)
    Farr = np.zeros(n, dtype=np.int64)
    Bhi = np.zeros(n, dtype=np.int64)
    g = np.zeros(n)
    lam_lo = np.zeros(n)
    lam_hi = np.zeros(n)
    zf = np.zeros(n)
    r = np.zeros(m)
    banned = np.zeros(n, dtype=np.uint8)

    k = 0
    for j in range(n):
        if flags[j] == -1:
            x[j] = pbar[j]
        elif flags[j] == 1:
            x[j] = qbar[j]
        else:
            if x[j] < pbar[j]:
                x[j] = pbar[j]
            elif x[j] > qbar[j]:
                x[j] = qbar[j]
    for j in range(n):
        if flags[j] == 0:
            k, pos, skipped, st = qr_insert(
                Q, R, u, cres, Farr, Bhi, k, j, False, structured, rank_tol,
                w, A, B, na, nb, nu, ny, Nu, Np, Jd)
            if st != 0:
                return (2, j, 0, 0, 0, g, lam_lo, lam_hi, Q, R, u, Farr,
                        Bhi, k)

    ceff = np.zeros(m)
    for row in range(m):
        ceff[row] = b[row]
    for j in range(n):
        if flags[j] != 0 and x[j] != 0.0:
            acc_col(ceff, j, x[j], structured, w, A, B, na, nb, nu, ny,
                    Nu, Np, Jd)
    qr_set_rhs(Q, u, cres, ctop, ceff, Farr, Bhi, k, structured,
               na, nb, nu, ny, Nu, Np)

    status = 1
    bad_col = -1
    outer = 0
    inner_solves = 0
    n_changes = 0
    last_released = -1
    while outer < max_iter:
        outer += 1
        # inner loop: free least squares, step to the first blocking bound
        guard = 0
        while guard <= n + 2:
            guard += 1
            if k == 0:
                break
            if qr_solve(R, u, k, zf) != 0:
                return (2, int(Farr[0]), outer, inner_solves, n_changes, g,
                        lam_lo, lam_hi, Q, R, u, Farr, Bhi, k)
            inner_solves += 1
            alpha = np.inf
            blk = -1
            blk_side = 0
            for jj in range(k):
                var = Farr[jj]
                zv = zf[jj]
                xv = x[var]
                if zv < pbar[var]:
                    a = (pbar[var] - xv) / (zv - xv)
                    if a < 0.0:
                        a = 0.0
                    if a < alpha:
                        alpha = a
                        blk = jj
                        blk_side = -1
                elif zv > qbar[var]:
                    a = (qbar[var] - xv) / (zv - xv)
                    if a < 0.0:
                        a = 0.0
                    if a < alpha:
                        alpha = a
                        blk = jj
                        blk_side = 1
            if blk < 0:
                for jj in range(k):
                    x[Farr[jj]] = zf[jj]
                break
            if alpha > 0.0:
                for jj in range(k):
                    var = Farr[jj]
                    x[var] += alpha * (zf[jj] - x[var])
            var = Farr[blk]
            bval = pbar[var] if blk_side == -1 else qbar[var]
            x[var] = bval
            flags[var] = blk_side
            n_changes += 1
            if var == last_released and alpha < 1e-12:
                banned[var] = 1
            if bval != 0.0:
                qr_add_rhs_offset(R, u, ctop, k, blk, var, bval, w[var])
            k = qr_delete(Q, R, u, cres, Farr, Bhi, k, blk, True, ctop[var],
                          structured, na, nb, nu, ny, Nu, Np)

        # gradient at the new iterate and first-order test
        for row in range(m):
            r[row] = b[row]
        for j in range(n):
            if x[j] != 0.0:
                acc_col(r, j, x[j], structured, w, A, B, na, nb, nu, ny,
                        Nu, Np, Jd)
        for j in range(n):
            g[j] = dot_col(j, r, structured, w, A, B, na, nb, nu, ny,
                           Nu, Np, Jd)
        free_ok = True
        worst = 0.0
        cand = -1
        any_viol = False
        for j in range(n):
            if flags[j] == 0:
                if abs(g[j]) > tol:
                    free_ok = False
            elif flags[j] == -1:
                if g[j] < -tol:
                    any_viol = True
                    if banned[j] == 0 and -g[j] > worst:
                        worst = -g[j]
                        cand = j
            else:
                if g[j] > tol:
                    any_viol = True
                    if banned[j] == 0 and g[j] > worst:
                        worst = g[j]
                        cand = j
        if free_ok and not any_viol:
            status = 0
            break
        if cand < 0:
            status = 3
            break
        flags[cand] = 0
        n_changes += 1
        k, pos, skipped, st = qr_insert(
            Q, R, u, cres, Farr, Bhi, k, cand, True, structured, rank_tol,
            w, A, B, na, nb, nu, ny, Nu, Np, Jd)
        if st != 0:
            return (2, cand, outer, inner_solves, n_changes, g, lam_lo,
                    lam_hi, Q, R, u, Farr, Bhi, k)
        if x[cand] != 0.0:
            qr_add_rhs_offset(R, u, ctop, k, pos, cand, -x[cand], w[cand])
        last_released = cand

    for j in range(n):
        if flags[j] == -1:
            lam_lo[j] = g[j]
        elif flags[j] == 1:
            lam_hi[j] = -g[j]
    return (status, bad_col, outer, inner_solves, n_changes, g, lam_lo,
            lam_hi, Q, R, u, Farr, Bhi, k)
