"""Assembly of the penalized tracking problem over the horizon.

Decision variables are ordered stage by stage,
``z = (u_k, y_{k+1}, u_{k+1}, y_{k+2}, ..., u_{k+Nu-1}, y_{k+Nu},
y_{k+Nu+1}, ..., y_{k+Np})``; inputs past the control horizon are blocked to
the last move and never stored. The residual stacks the weighted tracking
deviations (penalty scaling folded into the weights) on top of the equality
blocks of the prediction model, one per step.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from . import kernels
from .jacobian import Dims, JacobianView
from .model import StageLinearizations, eval_residual, linearize


@dataclass
class MPCConfig:
    """Horizons, folded weights, bounds, references and solver constants.

    ``w`` holds the diagonal tracking weights in decision order with the
    1/sqrt(rho) penalty factor already folded in and the last-move input
    weight pre-scaled by sqrt(Np - Nu + 1). Use :func:`make_config` unless
    you are building these vectors yourself.
    """

    Np: int
    Nu: int
    w: np.ndarray
    rho: float
    p: np.ndarray
    q: np.ndarray
    z_ref: np.ndarray
    dims: Dims
    gamma: float = 1e-6
    c: float = 1e-4
    tau: float = 0.5
    max_iters: int = 100
    bvls_tol: float = 1e-8

    def __post_init__(self):
        n = self.dims.n
        for name in ("w", "p", "q", "z_ref"):
            v = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=float))
            if v.shape != (n,):
                raise ValueError(f"{name} must have length {n}, got {v.shape}")
            setattr(self, name, v)
        if not (1 <= self.Nu <= self.Np):
            raise ValueError(f"need 1 <= Nu <= Np, got Nu={self.Nu}, Np={self.Np}")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if np.any(self.p > self.q):
            raise ValueError("lower bounds exceed upper bounds")
        if not 0 < self.c < 0.5:
            raise ValueError("c must lie in (0, 0.5)")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    @property
    def n(self):
        return self.dims.n

    @property
    def m(self):
        return self.dims.m


BIG = np.finfo(float).max


def make_config(model, Np, Nu=None, wy=None, wu=None, sqrt_rho=1e4,
                y_ref=None, u_ref=None, umin=None, umax=None,
                ymin=None, ymax=None, gamma=1e-6, c=1e-4, tau=0.5,
                max_iters=100, bvls_tol=1e-8):
    """Build an MPCConfig from per-channel weights, bounds and references.

    Weight vectors must be 1-D (diagonal weights only); references may be
    constant per channel or trajectories of shape (Np, n_y) / (Nu, n_u).
    Missing bounds default to the largest finite magnitudes, a missing input
    reference to zero.
    """
    if Nu is None:
        Nu = Np
    dims = Dims(model.n_a, model.n_b, model.n_u, model.n_y, Nu, Np)
    nu, ny = model.n_u, model.n_y

    def _chan(v, width, name, default):
        if v is None:
            v = np.full(width, float(default))
        v = np.asarray(v, dtype=float)
        if v.ndim != 1 or v.shape != (width,):
            raise ValueError(f"{name} must be a vector of length {width}")
        return v

    wy = _chan(wy, ny, "wy", 1.0)
    wu = _chan(wu, nu, "wu", 0.0)
    umin = _chan(umin, nu, "umin", -BIG)
    umax = _chan(umax, nu, "umax", BIG)
    ymin = _chan(ymin, ny, "ymin", -BIG)
    ymax = _chan(ymax, ny, "ymax", BIG)

    def _traj(ref, steps, width, name, default):
        if ref is None:
            return np.full((steps, width), float(default))
        ref = np.asarray(ref, dtype=float)
        if ref.ndim == 1 and ref.shape == (width,):
            return np.tile(ref, (steps, 1))
        if ref.shape == (steps, width):
            return ref.copy()
        raise ValueError(f"{name} must have shape ({width},) or ({steps}, {width})")

    yref = _traj(y_ref, Np, ny, "y_ref", 0.0)
    uref = _traj(u_ref, Nu, nu, "u_ref", 0.0)

    n = dims.n
    u_slots, y_slots = stage_slots(dims)
    w = np.empty(n)
    zref = np.empty(n)
    p = np.empty(n)
    q = np.empty(n)
    wu_stages = np.tile(wu, (Nu, 1))
    wu_stages[Nu - 1] *= np.sqrt(Np - Nu + 1)
    w[u_slots] = wu_stages.ravel()
    w[y_slots] = np.tile(wy, Np)
    zref[u_slots] = uref.ravel()
    zref[y_slots] = yref.ravel()
    p[u_slots] = np.tile(umin, Nu)
    q[u_slots] = np.tile(umax, Nu)
    p[y_slots] = np.tile(ymin, Np)
    q[y_slots] = np.tile(ymax, Np)
    w /= sqrt_rho
    return MPCConfig(Np=Np, Nu=Nu, w=w, rho=sqrt_rho ** 2, p=p, q=q,
                     z_ref=zref, dims=dims, gamma=gamma, c=c, tau=tau,
                     max_iters=max_iters, bvls_tol=bvls_tol)


def update_y_ref(cfg, y_ref):
    """In-place swap of the per-stage output references in z_ref."""
    y_ref = np.asarray(y_ref, dtype=float)
    if y_ref.shape != (cfg.Np, cfg.dims.n_y):
        raise ValueError(f"y_ref must have shape ({cfg.Np}, {cfg.dims.n_y})")
    _, y_slots = stage_slots(cfg.dims)
    cfg.z_ref[y_slots] = y_ref.ravel()
    return cfg


@lru_cache(maxsize=64)
def stage_slots(dims):
    """Decision-vector positions of the input and output entries."""
    nu, ny = dims.n_u, dims.n_y
    u_slots = np.empty(dims.Nu * nu, dtype=np.int64)
    y_slots = np.empty(dims.Np * ny, dtype=np.int64)
    pos = 0
    for beta in range(dims.Np):
        if beta < dims.Nu:
            u_slots[beta * nu:(beta + 1) * nu] = np.arange(pos, pos + nu)
            pos += nu
        y_slots[beta * ny:(beta + 1) * ny] = np.arange(pos, pos + ny)
        pos += ny
    u_slots.setflags(write=False)
    y_slots.setflags(write=False)
    return u_slots, y_slots


@dataclass
class InitialCondition:
    """Past data the predictions hang off: inputs u_{k-n_b+1..k-1}, outputs
    y_{k-n_a+1..k} (both oldest first) and the exogenous samples covering
    the horizon, s_{k-n_c+1..k+Np-1}."""

    u_past: np.ndarray
    y_past: np.ndarray
    s_seq: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def validated(self, model, Np):
        u = np.atleast_2d(np.asarray(self.u_past, dtype=float))
        y = np.atleast_2d(np.asarray(self.y_past, dtype=float))
        if model.n_b == 1:
            u = u.reshape(0, model.n_u)
        if u.shape != (model.n_b - 1, model.n_u):
            raise ValueError(
                f"u_past must be ({model.n_b - 1}, {model.n_u}), got {u.shape}")
        if y.shape != (model.n_a, model.n_y):
            raise ValueError(
                f"y_past must be ({model.n_a}, {model.n_y}), got {y.shape}")
        if model.n_c == 0:
            s = np.zeros((0, model.n_s))
        else:
            s = np.atleast_2d(np.asarray(self.s_seq, dtype=float))
            need = model.n_c + Np - 1
            if s.shape != (need, model.n_s):
                raise ValueError(
                    f"s_seq must be ({need}, {model.n_s}), got {s.shape}")
        return InitialCondition(u, y, s)


@dataclass
class ResidualVector:
    """Stacked residual: n weighted tracking rows then Np*ny equality rows."""

    r: np.ndarray
    n: int
    m: int

    @property
    def tracking(self):
        return self.r[:self.n]

    @property
    def equality(self):
        return self.r[self.n:]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.r, dtype=dtype)


def decode_index(i, dims):
    """Stage and channel of 1-based column i: (beta, eta), eta <= n_u is an input."""
    if not 1 <= i <= dims.n:
        raise IndexError(f"index {i} out of range [1, {dims.n}]")
    beta, eta0 = kernels.decode_col(i - 1, dims.n_u, dims.n_y, dims.Nu)
    return int(beta), int(eta0) + 1


def encode_index(beta, eta, dims):
    """Inverse of decode_index."""
    return beta * dims.n_y + dims.n_u * min(beta, dims.Nu - 1) + eta


def _z_input(z, beta, dims):
    nu, ny = dims.n_u, dims.n_y
    beta = min(beta, dims.Nu - 1)
    off = beta * (nu + ny)
    return z[off:off + nu]


def _z_output(z, beta, dims):
    nu, ny = dims.n_u, dims.n_y
    if beta < dims.Nu:
        off = beta * (nu + ny) + nu
    else:
        off = dims.Nu * (nu + ny) + (beta - dims.Nu) * ny
    return z[off:off + ny]


def stage_histories(z, ic, model, cfg, j):
    """Histories (Y, U, S) feeding the equality block of prediction step j.

    Lagged values before the current time come from the initial condition,
    later ones from the decision vector; blocked inputs all read the last
    stored move.
    """
    d = cfg.dims
    na, nb, nc = model.n_a, model.n_b, model.n_c
    Y = np.empty((na + 1, model.n_y))
    for idx, t in enumerate(range(j - na, j + 1)):
        if t <= 0:
            Y[idx] = ic.y_past[t + na - 1]
        else:
            Y[idx] = _z_output(z, t - 1, d)
    U = np.empty((nb, model.n_u))
    for idx, t in enumerate(range(j - nb, j)):
        if t < 0:
            U[idx] = ic.u_past[t + nb - 1]
        else:
            U[idx] = _z_input(z, t, d)
    if nc == 0:
        S = np.zeros((0, model.n_s))
    else:
        S = ic.s_seq[j - 1:j - 1 + nc]
    return Y, U, S


def gather_horizon(z, ic, model, cfg):
    """Stage histories for the whole horizon as stacked arrays.

    Returns (Ys, Us, Ss) with shapes (Np, n_a+1, n_y), (Np, n_b, n_u) and
    (Np, n_c, n_s); row j-1 holds the histories feeding prediction step j.
    """
    d = cfg.dims
    na, nb, nc = model.n_a, model.n_b, model.n_c
    u_slots, y_slots = stage_slots(d)
    z = np.asarray(z, dtype=float)
    # absolute time axes: outputs y_{k-na+1 .. k+Np}, inputs u_{k-nb+1 .. k+Np-1}
    y_ext = np.concatenate([ic.y_past, z[y_slots].reshape(d.Np, d.n_y)])
    u_dec = z[u_slots].reshape(d.Nu, d.n_u)
    if d.Np > d.Nu:
        u_dec = np.concatenate([u_dec,
                                np.tile(u_dec[-1], (d.Np - d.Nu, 1))])
    u_ext = np.concatenate([ic.u_past, u_dec])
    sw = np.lib.stride_tricks.sliding_window_view
    Ys = sw(y_ext, na + 1, axis=0).transpose(0, 2, 1)[:d.Np]
    Us = sw(u_ext, nb, axis=0).transpose(0, 2, 1)[:d.Np]
    if nc == 0:
        Ss = np.zeros((d.Np, 0, model.n_s))
    else:
        Ss = sw(ic.s_seq, nc, axis=0).transpose(0, 2, 1)[:d.Np]
    return Ys, Us, Ss


def build_equality_residual(z, ic, model, cfg):
    """Stacked model residuals h(z, phi) over the horizon, one block per step."""
    ic = ic.validated(model, cfg.Np)
    ny = model.n_y
    if model.batch_residual_fn is not None:
        Ys, Us, Ss = gather_horizon(z, ic, model, cfg)
        h = np.asarray(model.batch_residual_fn(Ys, Us, Ss), dtype=float)
        if h.shape != (cfg.Np, ny):
            raise ValueError(f"batch_residual_fn returned {h.shape}, "
                             f"expected {(cfg.Np, ny)}")
        return h.reshape(-1).copy()
    h = np.empty(cfg.Np * ny)
    for j in range(1, cfg.Np + 1):
        Y, U, S = stage_histories(z, ic, model, cfg, j)
        h[(j - 1) * ny:j * ny] = eval_residual(model, Y, U, S)
    return h


def build_full_residual(z, ic, model, cfg):
    """Penalized residual r(z) = [w*(z - z_ref); h(z, phi)]."""
    z = np.asarray(z, dtype=float)
    if z.shape != (cfg.n,):
        raise ValueError(f"z must have length {cfg.n}")
    r = np.empty(cfg.m)
    r[:cfg.n] = cfg.w * (z - cfg.z_ref)
    r[cfg.n:] = build_equality_residual(z, ic, model, cfg)
    return ResidualVector(r=r, n=cfg.n, m=cfg.m)


def alm_residual(z, ic, model, cfg, Lambda, rho_i):
    """Residual of the multiplier-shifted problem at penalty rho_i.

    The equality block is offset by Lambda/rho_i and the tracking block is
    rescaled to 1/sqrt(rho_i); with Lambda = 0 and rho_i = cfg.rho this is
    exactly build_full_residual.
    """
    if rho_i <= 0:
        raise ValueError("rho_i must be positive")
    Lambda = np.asarray(Lambda, dtype=float)
    if Lambda.shape != (cfg.m - cfg.n,):
        raise ValueError(f"Lambda must have length {cfg.m - cfg.n}")
    z = np.asarray(z, dtype=float)
    r = np.empty(cfg.m)
    scale = np.sqrt(cfg.rho / rho_i)
    r[:cfg.n] = scale * cfg.w * (z - cfg.z_ref)
    r[cfg.n:] = build_equality_residual(z, ic, model, cfg) + Lambda / rho_i
    return ResidualVector(r=r, n=cfg.n, m=cfg.m)


def linearize_horizon(z, ic, model, cfg):
    """Per-step linearizations along the trajectory stored in z."""
    ic = ic.validated(model, cfg.Np)
    stages = []
    for j in range(1, cfg.Np + 1):
        Y, U, S = stage_histories(z, ic, model, cfg, j)
        stages.append(linearize(model, Y, U, S))
    return stages


def jacobian_view(z, ic, model, cfg, w=None):
    """JacobianView of the residual at z (stored coefficients)."""
    weights = cfg.w if w is None else w
    if model.batch_jacobian_fn is not None:
        ic = ic.validated(model, cfg.Np)
        Ys, Us, Ss = gather_horizon(z, ic, model, cfg)
        A, B = model.batch_jacobian_fn(Ys, Us, Ss)
        return JacobianView(weights, cfg.dims, packed=(A, B))
    stages = linearize_horizon(z, ic, model, cfg)
    return JacobianView(weights, cfg.dims, stages=stages)


def shift_warm_start(z_prev, dims, p=None, q=None):
    """One-step-shifted copy of a previous solution, clipped into the box.

    Every stage takes the next stage's values; the last input and the last
    output repeat themselves.
    """
    z_prev = np.asarray(z_prev, dtype=float)
    if z_prev.shape != (dims.n,):
        raise ValueError(f"z_prev must have length {dims.n}")
    z0 = np.empty_like(z_prev)
    nu, ny = dims.n_u, dims.n_y
    for beta in range(dims.Np):
        src = min(beta + 1, dims.Np - 1)
        if beta < dims.Nu:
            _z_input(z0, beta, dims)[:] = _z_input(z_prev, min(src, dims.Nu - 1), dims)
        _z_output(z0, beta, dims)[:] = _z_output(z_prev, src, dims)
    if p is not None:
        np.clip(z0, p, q, out=z0)
    return z0


def shift_active_flags(flags, dims):
    """Stage-shift a bound-activity partition alongside shift_warm_start."""
    flags = np.asarray(flags)
    out = np.empty_like(flags)
    for beta in range(dims.Np):
        src = min(beta + 1, dims.Np - 1)
        if beta < dims.Nu:
            _z_input(out, beta, dims)[:] = _z_input(flags, min(src, dims.Nu - 1), dims)
        _z_output(out, beta, dims)[:] = _z_output(flags, src, dims)
    return out


def simulate_forward(ic, u_plan, model, cfg):
    """Forward-simulate the model to a consistent decision vector.

    ``u_plan`` has shape (Nu, n_u); the prediction model must be solvable
    for y_k, which is assumed explicit here (A_0 = I style models). Used to
    build feasible initial guesses and test fixtures.
    """
    d = cfg.dims
    z = np.zeros(d.n)
    for beta in range(d.Nu):
        _z_input(z, beta, d)[:] = u_plan[beta]
    from scipy.optimize import fsolve  # local import; cold path only

    for j in range(1, cfg.Np + 1):
        def fun(yj, j=j):
            _z_output(z, j - 1, d)[:] = yj
            Y, U, S = stage_histories(z, ic.validated(model, cfg.Np), model, cfg, j)
            return eval_residual(model, Y, U, S)

        guess = _z_output(z, j - 2, d).copy() if j > 1 else ic.y_past[-1].copy()
        sol = fsolve(fun, guess, full_output=False)
        _z_output(z, j - 1, d)[:] = sol
    return z
