"""Built-in prediction models and plants for the harness.

Two models are selectable by name: ``lti-arx-demo``, a stable second-order
ARX loop for smoke tests, and ``cstr``, a two-state exothermic continuous
stirred-tank reactor discretized with fixed-step RK4. The reactor
parameters follow the widely used benchmark formulation recorded in
docs/cstr.md; outputs are scaled to (concentration, temperature/100) and
the coolant flow input to flow/100 so all decision variables are O(1).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import fsolve

from .model import ModelDef, StageLinearizations
from .problem import InitialCondition


class IOPlant:
    """Difference-equation plant driven by an explicit one-step map.

    ``advance(y_hist, u_hist)`` receives the newest ``n_a`` outputs and
    ``n_b`` inputs (oldest first, the last input being the one just
    applied) and returns the next output.
    """

    def __init__(self, advance, y_past, u_past):
        self.advance = advance
        self.y_hist = [np.asarray(y, dtype=float) for y in y_past]
        self.u_hist = [np.asarray(u, dtype=float) for u in u_past]

    @property
    def y(self):
        return self.y_hist[-1]

    def step(self, u):
        u = np.asarray(u, dtype=float)
        y_new = self.advance(self.y_hist, self.u_hist + [u])
        self.u_hist = (self.u_hist + [u])[1:] if self.u_hist else []
        self.y_hist = self.y_hist[1:] + [np.asarray(y_new, dtype=float)]
        return self.y

    def initial_condition(self):
        if self.u_hist:
            u_past = np.array(self.u_hist, dtype=float).reshape(len(self.u_hist), -1)
        else:
            u_past = np.zeros((0, 1))
        return InitialCondition(u_past=u_past,
                                y_past=np.array(self.y_hist, dtype=float))


@dataclass
class BuiltinBundle:
    """Model plus a matching plant factory and harness defaults."""

    name: str
    model: ModelDef
    make_plant: callable
    defaults: dict = field(default_factory=dict)


# --- second-order ARX demo --------------------------------------------------

_ARX_A = (1.2, -0.4)
_ARX_B = (0.3, 0.2)


def _arx_advance(y_hist, u_hist):
    a1, a2 = _ARX_A
    b1, b2 = _ARX_B
    return np.array([a1 * y_hist[-1][0] + a2 * y_hist[-2][0]
                     + b1 * u_hist[-1][0] + b2 * u_hist[-2][0]])


def _arx_residual(Y, U, S):
    a1, a2 = _ARX_A
    b1, b2 = _ARX_B
    return np.array([Y[2, 0] - a1 * Y[1, 0] - a2 * Y[0, 0]
                     - b1 * U[1, 0] - b2 * U[0, 0]])


def _arx_jacobian(Y, U, S):
    a1, a2 = _ARX_A
    b1, b2 = _ARX_B
    return StageLinearizations(
        A=[np.array([[1.0]]), np.array([[-a1]]), np.array([[-a2]])],
        B=[np.array([[-b1]]), np.array([[-b2]])],
        affine_term=np.zeros(1))


def _arx_batch_residual(Ys, Us, Ss):
    a1, a2 = _ARX_A
    b1, b2 = _ARX_B
    return (Ys[:, 2] - a1 * Ys[:, 1] - a2 * Ys[:, 0]
            - b1 * Us[:, 1] - b2 * Us[:, 0])


def _arx_batch_jacobian(Ys, Us, Ss):
    a1, a2 = _ARX_A
    b1, b2 = _ARX_B
    S = Ys.shape[0]
    A = np.empty((S, 3, 1, 1))
    A[:, 0] = 1.0
    A[:, 1] = -a1
    A[:, 2] = -a2
    B = np.empty((S, 2, 1, 1))
    B[:, 0] = -b1
    B[:, 1] = -b2
    return A, B


def lti_arx_demo():
    model = ModelDef(n_a=2, n_b=2, n_u=1, n_y=1,
                     residual_fn=_arx_residual, jacobian_fn=_arx_jacobian,
                     batch_residual_fn=_arx_batch_residual,
                     batch_jacobian_fn=_arx_batch_jacobian,
                     name="lti-arx-demo")

    def make_plant(y0=0.0, u0=0.0):
        return IOPlant(_arx_advance,
                       y_past=[np.array([y0])] * 2,
                       u_past=[np.array([u0])])

    # tracking weights sized against the 1/sqrt(rho) folding: pure-tracking
    # gradients scale like (wy/sqrt(rho))^2 * deviation, so wy ~ O(1000)
    # keeps the stationarity test meaningful at these tolerances
    defaults = dict(
        Np=15, Nu=10, wy=[1000.0], wu=[0.1],
        umin=[-1.0], umax=[1.0],
        y_ref=[1.0], u_ref=[0.0],
        gamma=1e-8, bvls_tol=1e-8,
        sim_steps=40,
    )
    return BuiltinBundle("lti-arx-demo", model, make_plant, defaults)


# --- CSTR benchmark stand-in -------------------------------------------------

# reactor constants; see docs/cstr.md for provenance and units
CSTR_PARAMS = dict(
    q=100.0,      # feed flow, L/min
    V=100.0,      # reactor volume, L
    Caf=1.0,      # feed concentration, mol/L
    Tf=350.0,     # feed temperature, K
    Tcf=350.0,    # coolant feed temperature, K
    k0=7.2e10,    # Arrhenius prefactor, 1/min
    EoverR=1e4,   # activation temperature, K
    dH=-2e5,      # reaction enthalpy, cal/mol
    rho=1e3,      # density, g/L
    Cp=1.0,       # heat capacity, cal/(g K)
    hA=7e5,       # heat transfer coefficient, cal/(min K)
)
CSTR_TS = 0.1          # sample time, min
_Y_SCALE = np.array([1.0, 0.01])   # (Ca, T) -> (Ca, T/100)
_U_SCALE = 100.0                   # u -> qc = 100 u


def _cstr_ode(x, qc):
    p = CSTR_PARAMS
    Ca, T = x
    rate = p["k0"] * np.exp(-p["EoverR"] / T) * Ca
    cool = (p["rho"] * p["Cp"] / (p["rho"] * p["Cp"] * p["V"])) * qc \
        * (1.0 - np.exp(-p["hA"] / (qc * p["rho"] * p["Cp"])))
    f1 = p["q"] / p["V"] * (p["Caf"] - Ca) - rate
    f2 = p["q"] / p["V"] * (p["Tf"] - T) \
        + (-p["dH"] / (p["rho"] * p["Cp"])) * rate \
        + cool * (p["Tcf"] - T)
    return np.array([f1, f2])


def _cstr_ode_jac(x, qc):
    p = CSTR_PARAMS
    Ca, T = x
    ex = np.exp(-p["EoverR"] / T)
    r_Ca = p["k0"] * ex
    r_T = p["k0"] * ex * Ca * p["EoverR"] / T ** 2
    kheat = -p["dH"] / (p["rho"] * p["Cp"])
    k3 = p["hA"] / (p["rho"] * p["Cp"])
    e = np.exp(-k3 / qc)
    cool = qc * (1.0 - e) / p["V"]
    dcool_dqc = ((1.0 - e) - (k3 / qc) * e) / p["V"]
    Jx = np.array([
        [-p["q"] / p["V"] - r_Ca, -r_T],
        [kheat * r_Ca, -p["q"] / p["V"] + kheat * r_T - cool],
    ])
    Ju = np.array([[0.0], [dcool_dqc * (p["Tcf"] - T)]])
    return Jx, Ju


def cstr_rk4(x, qc, h=CSTR_TS):
    """One RK4 step of the reactor in raw units."""
    k1 = _cstr_ode(x, qc)
    k2 = _cstr_ode(x + 0.5 * h * k1, qc)
    k3 = _cstr_ode(x + 0.5 * h * k2, qc)
    k4 = _cstr_ode(x + h * k3, qc)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def cstr_rk4_tangent(x, qc, h=CSTR_TS):
    """RK4 step plus its derivatives w.r.t. state and input."""
    eye = np.eye(2)
    x1 = x
    k1 = _cstr_ode(x1, qc)
    J1x, J1u = _cstr_ode_jac(x1, qc)
    x2 = x + 0.5 * h * k1
    k2 = _cstr_ode(x2, qc)
    J2x, J2u = _cstr_ode_jac(x2, qc)
    x3 = x + 0.5 * h * k2
    k3 = _cstr_ode(x3, qc)
    J3x, J3u = _cstr_ode_jac(x3, qc)
    x4 = x + h * k3
    k4 = _cstr_ode(x4, qc)
    J4x, J4u = _cstr_ode_jac(x4, qc)

    D1 = J1x
    E1 = J1u
    D2 = J2x @ (eye + 0.5 * h * D1)
    E2 = J2x @ (0.5 * h * E1) + J2u
    D3 = J3x @ (eye + 0.5 * h * D2)
    E3 = J3x @ (0.5 * h * E2) + J3u
    D4 = J4x @ (eye + h * D3)
    E4 = J4x @ (h * E3) + J4u
    xn = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    Fx = eye + (h / 6.0) * (D1 + 2 * D2 + 2 * D3 + D4)
    Fu = (h / 6.0) * (E1 + 2 * E2 + 2 * E3 + E4)
    return xn, Fx, Fu


def _cstr_ode_batch(X, qc):
    """ODE right-hand side for stacked states X (S, 2) and flows qc (S,)."""
    p = CSTR_PARAMS
    Ca = X[:, 0]
    T = X[:, 1]
    rate = p["k0"] * np.exp(-p["EoverR"] / T) * Ca
    cool = qc * (1.0 - np.exp(-p["hA"] / (qc * p["rho"] * p["Cp"]))) / p["V"]
    f = np.empty_like(X)
    f[:, 0] = p["q"] / p["V"] * (p["Caf"] - Ca) - rate
    f[:, 1] = p["q"] / p["V"] * (p["Tf"] - T) \
        + (-p["dH"] / (p["rho"] * p["Cp"])) * rate + cool * (p["Tcf"] - T)
    return f


def _cstr_ode_jac_batch(X, qc):
    p = CSTR_PARAMS
    Ca = X[:, 0]
    T = X[:, 1]
    S = X.shape[0]
    ex = np.exp(-p["EoverR"] / T)
    r_Ca = p["k0"] * ex
    r_T = p["k0"] * ex * Ca * p["EoverR"] / T ** 2
    kheat = -p["dH"] / (p["rho"] * p["Cp"])
    k3 = p["hA"] / (p["rho"] * p["Cp"])
    e = np.exp(-k3 / qc)
    cool = qc * (1.0 - e) / p["V"]
    dcool = ((1.0 - e) - (k3 / qc) * e) / p["V"]
    Jx = np.empty((S, 2, 2))
    Jx[:, 0, 0] = -p["q"] / p["V"] - r_Ca
    Jx[:, 0, 1] = -r_T
    Jx[:, 1, 0] = kheat * r_Ca
    Jx[:, 1, 1] = -p["q"] / p["V"] + kheat * r_T - cool
    Ju = np.zeros((S, 2, 1))
    Ju[:, 1, 0] = dcool * (p["Tcf"] - T)
    return Jx, Ju


def _cstr_rk4_batch(X, qc, h=CSTR_TS):
    k1 = _cstr_ode_batch(X, qc)
    k2 = _cstr_ode_batch(X + 0.5 * h * k1, qc)
    k3 = _cstr_ode_batch(X + 0.5 * h * k2, qc)
    k4 = _cstr_ode_batch(X + h * k3, qc)
    return X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _cstr_rk4_tangent_batch(X, qc, h=CSTR_TS):
    S = X.shape[0]
    eye = np.broadcast_to(np.eye(2), (S, 2, 2))
    x1 = X
    k1 = _cstr_ode_batch(x1, qc)
    J1x, J1u = _cstr_ode_jac_batch(x1, qc)
    x2 = X + 0.5 * h * k1
    k2 = _cstr_ode_batch(x2, qc)
    J2x, J2u = _cstr_ode_jac_batch(x2, qc)
    x3 = X + 0.5 * h * k2
    k3 = _cstr_ode_batch(x3, qc)
    J3x, J3u = _cstr_ode_jac_batch(x3, qc)
    x4 = X + h * k3
    J4x, J4u = _cstr_ode_jac_batch(x4, qc)

    D1, E1 = J1x, J1u
    D2 = J2x @ (eye + 0.5 * h * D1)
    E2 = J2x @ (0.5 * h * E1) + J2u
    D3 = J3x @ (eye + 0.5 * h * D2)
    E3 = J3x @ (0.5 * h * E2) + J3u
    D4 = J4x @ (eye + h * D3)
    E4 = J4x @ (h * E3) + J4u
    Fx = eye + (h / 6.0) * (D1 + 2 * D2 + 2 * D3 + D4)
    Fu = (h / 6.0) * (E1 + 2 * E2 + 2 * E3 + E4)
    return Fx, Fu


def _cstr_batch_residual(Ys, Us, Ss):
    X_prev = Ys[:, 0, :] / _Y_SCALE
    qc = _U_SCALE * Us[:, 0, 0]
    return Ys[:, 1, :] - _Y_SCALE * _cstr_rk4_batch(X_prev, qc)


def _cstr_batch_jacobian(Ys, Us, Ss):
    X_prev = Ys[:, 0, :] / _Y_SCALE
    qc = _U_SCALE * Us[:, 0, 0]
    Fx, Fu = _cstr_rk4_tangent_batch(X_prev, qc)
    S = Ys.shape[0]
    Sm = np.diag(_Y_SCALE)
    Sinv = np.diag(1.0 / _Y_SCALE)
    A = np.empty((S, 2, 2, 2))
    A[:, 0] = np.eye(2)
    A[:, 1] = -(Sm @ Fx @ Sinv)
    B = np.empty((S, 1, 2, 1))
    B[:, 0] = -(Sm @ Fu) * _U_SCALE
    return A, B


def _cstr_residual(Y, U, S):
    x_prev = Y[0] / _Y_SCALE
    qc = _U_SCALE * U[0, 0]
    return Y[1] - _Y_SCALE * cstr_rk4(x_prev, qc)


def _cstr_jacobian(Y, U, S):
    x_prev = Y[0] / _Y_SCALE
    qc = _U_SCALE * U[0, 0]
    _, Fx, Fu = cstr_rk4_tangent(x_prev, qc)
    Sm = np.diag(_Y_SCALE)
    Sinv = np.diag(1.0 / _Y_SCALE)
    return StageLinearizations(
        A=[np.eye(2), -Sm @ Fx @ Sinv],
        B=[-Sm @ Fu * _U_SCALE],
        affine_term=np.zeros(2))


def cstr_steady_state(qc):
    """Steady reactor state (raw units) at a constant coolant flow."""
    x0 = np.array([0.09, 440.0])
    sol = fsolve(lambda x: _cstr_ode(x, qc), x0, full_output=False)
    return np.asarray(sol)


def cstr():
    model = ModelDef(n_a=1, n_b=1, n_u=1, n_y=2,
                     residual_fn=_cstr_residual, jacobian_fn=_cstr_jacobian,
                     batch_residual_fn=_cstr_batch_residual,
                     batch_jacobian_fn=_cstr_batch_jacobian,
                     name="cstr")

    x_ss = cstr_steady_state(100.0)
    x_hi = cstr_steady_state(105.0)
    y_ss = _Y_SCALE * x_ss
    y_hi = _Y_SCALE * x_hi

    def make_plant(x0=None):
        x = np.array(x_ss if x0 is None else x0, dtype=float)

        def advance(y_hist, u_hist):
            return _Y_SCALE * cstr_rk4(y_hist[-1] / _Y_SCALE,
                                       _U_SCALE * u_hist[-1][0])

        return IOPlant(advance, y_past=[_Y_SCALE * x], u_past=[])

    defaults = dict(
        Np=60, Nu=60, wy=[1000.0, 0.0], wu=[10.0],
        umin=[0.9], umax=[1.1],
        y_ref=list(y_ss), u_ref=[1.0],
        y_ref_after=list(y_hi), y_ref_switch_step=10,
        sim_steps=40,
    )
    return BuiltinBundle("cstr", model, make_plant, defaults)


BUILTIN_BUNDLES = {
    "lti-arx-demo": lti_arx_demo,
    "cstr": cstr,
}


def get_bundle(name):
    try:
        return BUILTIN_BUNDLES[name]()
    except KeyError:
        raise KeyError(f"unknown builtin model {name!r}; "
                       f"choose from {sorted(BUILTIN_BUNDLES)}") from None
