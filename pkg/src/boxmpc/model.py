"""Nonlinear parameter-varying input/output prediction models.

A model is the implicit difference equation ``M(Y, U, S) = 0`` relating the
current output to lagged outputs, lagged inputs and an optional exogenous
signal. Histories are stored oldest first, so ``Y[-1]`` is the current
output ``y_k``, ``U[-1]`` is ``u_{k-1}`` and ``S[-1]`` is ``s_{k-1}``.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class IllPosedModelError(ValueError):
    """The leading output coefficient is numerically singular."""


# reciprocal condition of A_0 below this is treated as ill posed; forward
# prediction has to divide by A_0
RCOND_MIN = 1e-12

FD_STEP = 1e-6


@dataclass
class StageLinearizations:
    """First-order model coefficients at one trajectory point.

    ``A[j]`` is the Jacobian of M w.r.t. the output lagged j steps
    (j = 0..n_a), ``B[j-1]`` w.r.t. the input lagged j steps (j = 1..n_b);
    lags beyond the model order are identically zero and never stored.
    ``affine_term`` is the model residual at the linearization point.
    """

    A: list
    B: list
    affine_term: np.ndarray


@dataclass
class ModelDef:
    """Model orders, channel counts and evaluation callbacks.

    ``residual_fn(Y, U, S)`` returns the length-``n_y`` residual of the
    difference equation. ``jacobian_fn``, when given, returns the analytic
    ``StageLinearizations``; otherwise central finite differences are used.

    The optional batch hooks evaluate a whole horizon of stage points at
    once (leading axis = stage): ``batch_residual_fn(Ys, Us, Ss)`` returns
    an (S, n_y) array, ``batch_jacobian_fn`` the packed coefficient arrays
    (A of shape (S, n_a+1, n_y, n_y), B of shape (S, n_b, n_y, n_u)). They
    only speed up horizon assembly; per-point evaluation stays canonical.
    """

    n_a: int
    n_b: int
    n_u: int
    n_y: int
    residual_fn: Callable
    jacobian_fn: Optional[Callable] = None
    n_c: int = 0
    n_s: int = 0
    name: str = ""
    batch_residual_fn: Optional[Callable] = None
    batch_jacobian_fn: Optional[Callable] = None

    def __post_init__(self):
        if min(self.n_a, self.n_b, self.n_u, self.n_y) < 1:
            raise ValueError("n_a, n_b, n_u, n_y must all be at least 1")
        if self.n_c < 0 or self.n_s < 0:
            raise ValueError("n_c and n_s must be nonnegative")


def _check_histories(model, Y, U, S):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if Y.shape != (model.n_a + 1, model.n_y):
        raise ValueError(
            f"Y must hold {model.n_a + 1} outputs of width {model.n_y}, got {Y.shape}")
    if U.shape != (model.n_b, model.n_u):
        raise ValueError(
            f"U must hold {model.n_b} inputs of width {model.n_u}, got {U.shape}")
    if model.n_c == 0:
        S = np.zeros((0, model.n_s))
    else:
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if S.shape != (model.n_c, model.n_s):
            raise ValueError(
                f"S must hold {model.n_c} samples of width {model.n_s}, got {S.shape}")
    return Y, U, S


def eval_residual(model, Y, U, S=None):
    """Evaluate M(Y, U, S); zero on any trajectory satisfying the model."""
    Y, U, S = _check_histories(model, Y, U, S)
    r = np.asarray(model.residual_fn(Y, U, S), dtype=float).reshape(-1)
    if r.shape != (model.n_y,):
        raise ValueError(f"residual_fn returned length {r.size}, expected {model.n_y}")
    return r


def _fd_linearize(model, Y, U, S):
    """Central-difference stage coefficients, step max(1e-6, 1e-6|x|)."""
    ny = model.n_y
    A = [np.zeros((ny, ny)) for _ in range(model.n_a + 1)]
    B = [np.zeros((ny, model.n_u)) for _ in range(model.n_b)]
    for j in range(model.n_a + 1):
        row = model.n_a - j  # y_{k-j} stored oldest first
        for c in range(ny):
            h = max(FD_STEP, FD_STEP * abs(Y[row, c]))
            Yp = Y.copy(); Yp[row, c] += h
            Ym = Y.copy(); Ym[row, c] -= h
            A[j][:, c] = (model.residual_fn(Yp, U, S)
                          - model.residual_fn(Ym, U, S)) / (2 * h)
    for j in range(1, model.n_b + 1):
        row = model.n_b - j
        for c in range(model.n_u):
            h = max(FD_STEP, FD_STEP * abs(U[row, c]))
            Up = U.copy(); Up[row, c] += h
            Um = U.copy(); Um[row, c] -= h
            B[j - 1][:, c] = (model.residual_fn(Y, Up, S)
                              - model.residual_fn(Y, Um, S)) / (2 * h)
    return StageLinearizations(A=A, B=B, affine_term=np.zeros(ny))


def linearize(model, Y, U, S=None):
    """Stage coefficients A_j, B_j and the affine term at (Y, U, S).

    Raises IllPosedModelError when A_0 is singular to within RCOND_MIN;
    everything downstream assumes the model can be solved for y_k.
    """
    Y, U, S = _check_histories(model, Y, U, S)
    if model.jacobian_fn is not None:
        lin = model.jacobian_fn(Y, U, S)
    else:
        lin = _fd_linearize(model, Y, U, S)
    lin.affine_term = eval_residual(model, Y, U, S)
    A0 = np.asarray(lin.A[0], dtype=float)
    if model.n_y == 1:
        rc = abs(A0[0, 0])
    else:
        try:
            rc = 1.0 / np.linalg.cond(A0, 1)
        except np.linalg.LinAlgError:
            rc = 0.0
    if not np.isfinite(rc) or rc < RCOND_MIN:
        raise IllPosedModelError(
            f"A_0 is singular to working precision (rcond ~ {rc:.2e})")
    return lin


def check_jacobian(model, Y, U, S=None, step=1e-6):
    """Max abs deviation between the analytic and finite-difference coefficients."""
    if model.jacobian_fn is None:
        raise ValueError("model has no jacobian_fn to check")
    if step <= 0:
        raise ValueError("step must be positive")
    Y, U, S = _check_histories(model, Y, U, S)
    ana = model.jacobian_fn(Y, U, S)

    dev = 0.0
    ny = model.n_y
    for j in range(model.n_a + 1):
        row = model.n_a - j
        fd = np.zeros((ny, ny))
        for c in range(ny):
            Yp = Y.copy(); Yp[row, c] += step
            Ym = Y.copy(); Ym[row, c] -= step
            fd[:, c] = (model.residual_fn(Yp, U, S)
                        - model.residual_fn(Ym, U, S)) / (2 * step)
        dev = max(dev, float(np.max(np.abs(np.asarray(ana.A[j]) - fd))))
    for j in range(1, model.n_b + 1):
        row = model.n_b - j
        fd = np.zeros((ny, model.n_u))
        for c in range(model.n_u):
            Up = U.copy(); Up[row, c] += step
            Um = U.copy(); Um[row, c] -= step
            fd[:, c] = (model.residual_fn(Y, Up, S)
                        - model.residual_fn(Y, Um, S)) / (2 * step)
        dev = max(dev, float(np.max(np.abs(np.asarray(ana.B[j - 1]) - fd))))
    return dev
