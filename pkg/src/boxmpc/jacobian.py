"""Matrix-free access to the residual Jacobian J = [W; Jh].

The Jacobian of the penalized residual is never formed: its top block is the
diagonal of folded weights and the bottom block holds the per-step model
coefficients laid out by stage. ``JacobianView`` serves single columns
(``jix``), transposed-row inner products (``jtix``) and column norms
(``col_norm_sq``) straight from the coefficient arrays.

Column indices in the public methods are 1-based, matching the stage
arithmetic ``i = beta*ny + nu*min(beta, Nu-1) + eta``.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Dims:
    """Model orders and horizons that fix the sparsity pattern."""

    n_a: int
    n_b: int
    n_u: int
    n_y: int
    Nu: int
    Np: int

    @property
    def n(self):
        return self.Nu * self.n_u + self.Np * self.n_y

    @property
    def m(self):
        return self.n + self.Np * self.n_y


def column_range(dims, i):
    """Band (nbar, min(mbar, m)] of equality rows hit by column i (1-based).

    Returned as a half-open 0-based range [lo, hi); ``lo`` equals the count
    of rows above the first possible nonzero, so the numbers coincide with
    the 1-based exclusive/inclusive convention.
    """
    if not 1 <= i <= dims.n:
        raise IndexError(f"column {i} out of range [1, {dims.n}]")
    return kernels.col_band(i - 1, dims.n_a, dims.n_b, dims.n_u, dims.n_y,
                            dims.Nu, dims.Np)


def pack_stage_coefficients(stages, dims):
    """Stack per-step linearizations into (A, B, affine) coefficient arrays."""
    na, nb, nu, ny = dims.n_a, dims.n_b, dims.n_u, dims.n_y
    if len(stages) != dims.Np:
        raise ValueError(f"expected {dims.Np} stage linearizations, got {len(stages)}")
    A = np.empty((dims.Np, na + 1, ny, ny))
    B = np.empty((dims.Np, nb, ny, nu))
    aff = np.empty((dims.Np, ny))
    for s, lin in enumerate(stages):
        for j in range(na + 1):
            A[s, j] = lin.A[j]
        for j in range(nb):
            B[s, j] = lin.B[j]
        aff[s] = lin.affine_term
    return A, B, aff


class JacobianView:
    """Operator view of J for one linearization of the horizon.

    Coefficients are either stored up front (default) or generated on demand
    from a per-step callback, trading memory for repeated linearization work.
    The solver kernels require the stored form; ``materialized()`` converts.
    """

    def __init__(self, w, dims, stages=None, stage_fn=None, packed=None):
        self.dims = dims
        w = np.ascontiguousarray(np.asarray(w, dtype=float))
        if w.shape != (dims.n,):
            raise ValueError(f"weight vector must have length {dims.n}, got {w.shape}")
        self.w = w
        if sum(x is not None for x in (stages, stage_fn, packed)) != 1:
            raise ValueError("provide exactly one of stages, stage_fn or packed")
        self._stage_fn = stage_fn
        if stages is not None:
            self.A, self.B, self.affine = pack_stage_coefficients(stages, dims)
        elif packed is not None:
            A, B = packed[0], packed[1]
            aff = packed[2] if len(packed) > 2 else None
            na, nb, nu, ny = dims.n_a, dims.n_b, dims.n_u, dims.n_y
            A = np.ascontiguousarray(np.asarray(A, dtype=float))
            B = np.ascontiguousarray(np.asarray(B, dtype=float))
            if A.shape != (dims.Np, na + 1, ny, ny):
                raise ValueError(f"packed A must be {(dims.Np, na + 1, ny, ny)}")
            if B.shape != (dims.Np, nb, ny, nu):
                raise ValueError(f"packed B must be {(dims.Np, nb, ny, nu)}")
            self.A, self.B = A, B
            self.affine = None if aff is None else np.asarray(aff, dtype=float)
        else:
            self.A = self.B = self.affine = None

    @property
    def stored(self):
        return self.A is not None

    @property
    def n(self):
        return self.dims.n

    @property
    def m(self):
        return self.dims.m

    def materialized(self):
        """Stored-mode copy of this view (no-op when already stored)."""
        if self.stored:
            return self
        stages = [self._stage_fn(s) for s in range(1, self.dims.Np + 1)]
        return JacobianView(self.w, self.dims, stages=stages)

    def _stage(self, step):
        """Linearization for prediction step ``step`` (1-based), lazy mode."""
        return self._stage_fn(step)

    def jix(self, i, x, out=None):
        """x times column i of J, written into ``out`` (zeroed first).

        Returns ``(v, lo, hi)`` where ``[lo, hi)`` is the band of equality
        rows that can be nonzero; rows outside it and off the diagonal slot
        are guaranteed zero so callers may skip them.
        """
        d = self.dims
        if not 1 <= i <= d.n:
            raise IndexError(f"column {i} out of range [1, {d.n}]")
        if out is None:
            out = np.zeros(d.m)
        else:
            out[:] = 0.0
        if self.stored:
            lo, hi = kernels.jix_acc(out, i - 1, float(x), self.w, self.A,
                                     self.B, d.n_a, d.n_b, d.n_u, d.n_y,
                                     d.Nu, d.Np)
        else:
            lo, hi = self._jix_py(out, i - 1, float(x))
        return out, lo, hi

    def jtix(self, i, X):
        """Inner product of row i of J^T (= column i of J) with X."""
        d = self.dims
        if not 1 <= i <= d.n:
            raise IndexError(f"column {i} out of range [1, {d.n}]")
        X = np.asarray(X, dtype=float)
        if X.shape != (d.m,):
            raise ValueError(f"X must have length {d.m}")
        if self.stored:
            return kernels.jtix_dot(i - 1, X, self.w, self.A, self.B,
                                    d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np)
        return self._jtix_py(i - 1, X)

    def col_norm_sq(self, i):
        """Squared 2-norm of column i, touching each nonzero once."""
        d = self.dims
        if not 1 <= i <= d.n:
            raise IndexError(f"column {i} out of range [1, {d.n}]")
        if self.stored:
            return kernels.colnorm_sq(i - 1, self.w, self.A, self.B,
                                      d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np)
        v, lo, hi = self.jix(i, 1.0)
        return float(v[i - 1] ** 2 + np.dot(v[lo:hi], v[lo:hi]))

    def gradient(self, X):
        """J^T X for the full residual vector X (n column walks at once)."""
        d = self.dims
        X = np.ascontiguousarray(np.asarray(X, dtype=float))
        if X.shape != (d.m,):
            raise ValueError(f"X must have length {d.m}")
        if self.stored:
            return kernels.grad_all(X, self.w, self.A, self.B,
                                    d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np)
        return np.array([self.jtix(i, X) for i in range(1, d.n + 1)])

    def col_norms_sq(self):
        """Squared 2-norms of every column."""
        d = self.dims
        if self.stored:
            return kernels.colnorm_all(self.w, self.A, self.B,
                                       d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np)
        return np.array([self.col_norm_sq(i) for i in range(1, d.n + 1)])

    # pure-python walk for the on-demand mode; mirrors the stored kernel
    def _jix_py(self, out, i0, x):
        d = self.dims
        na, nb, nu, ny, Nu, Np = d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np
        out[i0] = self.w[i0] * x
        beta, eta0 = kernels.decode_col(i0, nu, ny, Nu)
        lo, hi = kernels.col_band(i0, na, nb, nu, ny, Nu, Np)
        if beta == Nu - 1 and eta0 < nu:
            j = 0
            for jp in range(lo, hi, ny):
                j += 1
                lin = self._stage(beta + j)
                bb = np.zeros(ny)
                for ip in range(min(j, nb)):
                    bb += lin.B[ip][:, eta0]
                out[jp:jp + ny] = x * bb
        elif eta0 >= nu:
            j = 0
            for jp in range(lo, hi, ny):
                lin = self._stage(beta + j + 1)
                out[jp:jp + ny] = x * lin.A[j][:, eta0 - nu]
                j += 1
        else:
            j = 0
            for jp in range(lo, hi, ny):
                lin = self._stage(beta + j + 1)
                out[jp:jp + ny] = x * lin.B[j][:, eta0]
                j += 1
        return lo, hi

    def _jtix_py(self, i0, X):
        v, lo, hi = self.jix(i0 + 1, 1.0)
        return float(v[i0] * X[i0] + np.dot(v[lo:hi], X[lo:hi]))
