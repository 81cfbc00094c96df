"""Recursive thin QR factorization of free-column subsets of J.

The factorization tracks a sorted set of free columns. Insertions run
modified Gram-Schmidt against the current basis (with an automatic
reorthogonalization pass) followed by a short Givens sweep that restores the
sorted column order; deletions rotate the factors and simply zero the
vacated row. All arithmetic is confined to an analytically predicted
nonzero pattern: column i of Q lives on the free rows up to position i plus
one contiguous band of equality rows whose end is the running maximum of the
inserted columns' band ends.

The right-hand side is carried through the factorization as an extra
orthogonalized column, so least-squares solves are a single back
substitution against maintained coefficients.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .jacobian import column_range


class RankDeficientError(RuntimeError):
    """A free column became numerically dependent on the basis."""

    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column} is numerically rank deficient")


RANK_TOL_REL = 1e-13


@dataclass(frozen=True)
class StructureSets:
    """Predicted nonzero pattern: free columns F, band ends Bmax, band start.

    ``Bmax[i]`` is the largest possibly-nonzero equality row (1-based,
    equivalently the 0-based exclusive end) of Q column i; ``nbar_first``
    is the number of rows above the first column's band.
    """

    F: tuple
    Bmax: tuple
    nbar_first: int


def predict_insert(structure, t, dims):
    """Structure sets after inserting free column t (1-based), F kept sorted."""
    if t in structure.F:
        raise ValueError(f"column {t} is already free")
    lo_t, hi_t = column_range(dims, t)
    F = sorted(structure.F + (t,))
    Bmax = []
    prev = 0
    for f in F:
        hi = hi_t if f == t else column_range(dims, f)[1]
        prev = max(prev, hi)
        Bmax.append(prev)
    nbar = column_range(dims, F[0])[0]
    return StructureSets(F=tuple(F), Bmax=tuple(Bmax), nbar_first=nbar)


def empty_structure():
    return StructureSets(F=(), Bmax=(), nbar_first=0)


class ThinQRState:
    """Owner of the Q/R factors, structure sets and right-hand-side state."""

    def __init__(self, view, reorth_threshold=0.5):
        view = view.materialized()
        self.view = view
        d = view.dims
        self.dims = d
        m, n = d.m, d.n
        self.Q = np.zeros((m, n))
        self.R = np.zeros((n, n))
        self.u = np.zeros(n)
        self.cres = np.zeros(m)
        self.ctop = np.zeros(n)
        self.Farr = np.zeros(n, dtype=np.int64)
        self.Bhi = np.zeros(n, dtype=np.int64)
        self.k = 0
        self.have_rhs = False
        self.reorth_threshold = reorth_threshold
        self.skipped_r_entries = 0
        self._max_colnorm = 0.0

    # -- bookkeeping -------------------------------------------------------

    @property
    def free(self):
        """Current free columns, 1-based and ascending."""
        return tuple(int(f) + 1 for f in self.Farr[:self.k])

    @property
    def structure(self):
        if self.k == 0:
            return empty_structure()
        nbar = column_range(self.dims, int(self.Farr[0]) + 1)[0]
        return StructureSets(F=self.free,
                             Bmax=tuple(int(b) for b in self.Bhi[:self.k]),
                             nbar_first=nbar)

    def q_dense(self):
        """Dense copy of Q (test hook)."""
        return self.Q[:, :self.k].copy()

    def r_dense(self):
        """Dense copy of R (test hook)."""
        return np.triu(self.R[:self.k, :self.k]).copy()

    def _rank_tol(self, anorm):
        self._max_colnorm = max(self._max_colnorm, anorm)
        return RANK_TOL_REL * self._max_colnorm

    def _kernel_args(self):
        d = self.dims
        return d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np

    # -- updates -----------------------------------------------------------

    def insert_column(self, t):
        """Grow the factorization by column t (1-based), keeping F sorted."""
        if not 1 <= t <= self.dims.n:
            raise IndexError(f"column {t} out of range [1, {self.dims.n}]")
        t0 = t - 1
        if t0 in self.Farr[:self.k]:
            raise ValueError(f"column {t} is already free")
        anorm = np.sqrt(self.view.col_norm_sq(t))
        k, pos, skipped, status = kernels.qr_insert(
            self.Q, self.R, self.u, self.cres, self.Farr, self.Bhi, self.k,
            t0, self.have_rhs, True, self._rank_tol(anorm), self.view.w,
            self.view.A, self.view.B, *self._kernel_args(),
            kernels._EMPTY_DENSE)
        if status != 0:
            raise RankDeficientError(t)
        self.k = k
        self.skipped_r_entries += skipped
        return pos

    def delete_column(self, t):
        """Drop free column t (1-based) from the factorization."""
        t0 = t - 1
        pos = -1
        for j in range(self.k):
            if self.Farr[j] == t0:
                pos = j
                break
        if pos < 0:
            raise ValueError(f"column {t} is not free")
        ctop_val = self.ctop[t0] if self.have_rhs else 0.0
        self.k = kernels.qr_delete(
            self.Q, self.R, self.u, self.cres, self.Farr, self.Bhi, self.k,
            pos, self.have_rhs, ctop_val, True, *self._kernel_args())
        return pos

    def set_rhs(self, b):
        """Install b of min ||J_F x + b||, orthogonalized against the basis."""
        b = np.asarray(b, dtype=float)
        if b.shape != (self.dims.m,):
            raise ValueError(f"rhs must have length {self.dims.m}")
        kernels.qr_set_rhs(self.Q, self.u, self.cres, self.ctop, b,
                           self.Farr, self.Bhi, self.k, True,
                           *self._kernel_args())
        self.have_rhs = True

    def solve_ls(self):
        """argmin ||J_F x + b|| over the free columns, in F order."""
        if not self.have_rhs:
            raise RuntimeError("no right-hand side installed")
        if self.k == 0:
            return np.zeros(0)
        x = np.zeros(self.k)
        if kernels.qr_solve(self.R, self.u, self.k, x) != 0:
            raise RankDeficientError(self.free[0])
        return x


def factorize(view, free):
    """Thin QR of the columns listed in ``free`` (1-based, any order)."""
    state = ThinQRState(view)
    for t in sorted(free):
        state.insert_column(t)
    return state


def insert_column(state, view, t):
    """Module-level alias of ThinQRState.insert_column."""
    del view
    state.insert_column(t)
    return state


def delete_column(state, t):
    """Module-level alias of ThinQRState.delete_column."""
    state.delete_column(t)
    return state


def solve_ls(state):
    return state.solve_ls()
