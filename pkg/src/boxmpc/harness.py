"""Closed-loop simulation, oracle cross-checks and timing sweeps.

The harness drives the receding-horizon loop: solve, apply the first
input, advance the plant, shift the plan. ``compare_dense_oracle``
re-derives everything the operator path computes with plain dense linear
algebra and reports worst-case deviations; ``benchmark`` times the
structure-exploiting and dense reference paths on identical problem
sequences.
"""

import time
from dataclasses import dataclass

import numpy as np

from .builtins import get_bundle
from .bvnlls import solve_bvnlls
from .dense import build_dense_jacobian, solve_bvnlls_dense
from .jacobian import Dims, JacobianView
from .model import ModelDef, StageLinearizations
from .problem import make_config, shift_active_flags, shift_warm_start
from .recqr import factorize


@dataclass
class TraceRow:
    """One closed-loop step."""

    step: int
    solve_time_us: float
    outer_iters: int
    inner_iters: int
    alpha: float
    phi: float
    h_inf: float
    converged: bool
    u: np.ndarray
    y: np.ndarray


def trace_header(n_u, n_y):
    cols = ["step", "solve_time_us", "outer_iters", "inner_iters", "alpha",
            "phi", "h_inf", "converged"]
    cols += [f"u_{i + 1}" for i in range(n_u)]
    cols += [f"y_{i + 1}" for i in range(n_y)]
    return cols


def trace_to_csv(rows, n_u, n_y):
    """Versioned CSV text; every float printed with full precision."""
    out = ["schema=1", ",".join(trace_header(n_u, n_y))]
    for r in rows:
        vals = [str(r.step), f"{r.solve_time_us:.3f}", str(r.outer_iters),
                str(r.inner_iters), f"{r.alpha:.17g}", f"{r.phi:.17g}",
                f"{r.h_inf:.17g}", "1" if r.converged else "0"]
        vals += [f"{v:.17g}" for v in np.atleast_1d(r.u)]
        vals += [f"{v:.17g}" for v in np.atleast_1d(r.y)]
        out.append(",".join(vals))
    return "\n".join(out) + "\n"


def _reference_window(sim, ny, k):
    """Per-stage output reference for the solve at closed-loop step k."""
    base = np.asarray(sim.y_ref, dtype=float)
    if sim.y_ref_after is None:
        return np.tile(base, (sim.Np, 1))
    after = np.asarray(sim.y_ref_after, dtype=float)
    ref = np.empty((sim.Np, ny))
    for j in range(1, sim.Np + 1):
        ref[j - 1] = after if (k + j) >= sim.y_ref_switch_step else base
    return ref


def _cold_start(cfg, ic, u_ref):
    """Hold the current output and the input reference across the horizon."""
    d = cfg.dims
    z = np.empty(d.n)
    y_now = ic.y_past[-1]
    pos = 0
    for beta in range(d.Np):
        if beta < d.Nu:
            z[pos:pos + d.n_u] = u_ref
            pos += d.n_u
        z[pos:pos + d.n_y] = y_now
        pos += d.n_y
    np.clip(z, cfg.p, cfg.q, out=z)
    return z


def run_closed_loop(sim, structured=True, collect_reports=False):
    """Receding-horizon simulation; returns the trace (and reports if asked).

    Each step solves from the shifted previous plan, applies the first
    input to the plant and logs one TraceRow. Non-convergence is flagged in
    the row and the loop continues with the incumbent solution.
    """
    bundle = get_bundle(sim.model)
    model = bundle.model
    plant = get_bundle(sim.plant).make_plant()
    if sim.y_ref is None:
        raise ValueError("simulation needs sim.y_ref (or model defaults)")

    kw = sim.mpc_kwargs()
    rows = []
    reports = []
    z = None
    flags = None
    cfg = None
    for k in range(sim.steps):
        ic = plant.initial_condition()
        kw["y_ref"] = _reference_window(sim, model.n_y, k)
        cfg = make_config(model, **kw)
        if z is None:
            z = _cold_start(cfg, ic, np.asarray(kw["u_ref"], dtype=float)
                            if kw["u_ref"] is not None else np.zeros(model.n_u))
        t0 = time.perf_counter_ns()
        rep = solve_bvnlls(z, ic, model, cfg, warm_flags=flags,
                           structured=structured)
        dt_us = (time.perf_counter_ns() - t0) / 1e3
        u_k = rep.z_star[:model.n_u].copy()
        plant.step(u_k)
        rows.append(TraceRow(step=k, solve_time_us=dt_us,
                             outer_iters=rep.iters,
                             inner_iters=rep.bvls_inner_iters,
                             alpha=rep.last_alpha, phi=rep.Phi,
                             h_inf=rep.h_inf, converged=rep.converged,
                             u=u_k, y=plant.y.copy()))
        if collect_reports:
            reports.append(rep)
        z = shift_warm_start(rep.z_star, cfg.dims, cfg.p, cfg.q)
        flags = shift_active_flags(rep.active_flags, cfg.dims) \
            if rep.active_flags is not None else None
    if collect_reports:
        return rows, reports
    return rows


# --- oracle cross-checks -----------------------------------------------------


def _random_view(rng, dims, scale=0.5):
    ny, nu = dims.n_y, dims.n_u
    stages = []
    for _ in range(dims.Np):
        stages.append(StageLinearizations(
            A=[np.eye(ny) if j == 0 else scale * rng.standard_normal((ny, ny))
               for j in range(dims.n_a + 1)],
            B=[scale * rng.standard_normal((ny, nu)) for _ in range(dims.n_b)],
            affine_term=np.zeros(ny)))
    w = rng.uniform(0.5, 2.0, dims.n)
    return JacobianView(w, dims, stages=stages)


def _random_linear_model(rng, n_a, n_b, n_u, n_y, scale=0.3):
    """Stable-ish random linear model in explicit form."""
    As = [scale * rng.standard_normal((n_y, n_y)) for _ in range(n_a)]
    Bs = [scale * rng.standard_normal((n_y, n_u)) for _ in range(n_b)]

    def res(Y, U, S):
        out = Y[-1].copy()
        for j in range(1, n_a + 1):
            out = out + As[j - 1] @ Y[n_a - j]
        for j in range(1, n_b + 1):
            out = out + Bs[j - 1] @ U[n_b - j]
        return out

    def jac(Y, U, S):
        return StageLinearizations(
            A=[np.eye(n_y)] + [a.copy() for a in As],
            B=[b.copy() for b in Bs],
            affine_term=np.zeros(n_y))

    return ModelDef(n_a=n_a, n_b=n_b, n_u=n_u, n_y=n_y,
                    residual_fn=res, jacobian_fn=jac)


def operator_deviation(view):
    """Worst relative deviation of the column operators against dense J."""
    J = build_dense_jacobian(view)
    scale = max(np.max(np.abs(J)), 1e-30)
    dims = view.dims
    rng = np.random.default_rng(12345)
    X = rng.standard_normal(dims.m)
    worst = 0.0
    for i in range(1, dims.n + 1):
        col, _, _ = view.jix(i, 1.0)
        worst = max(worst, np.max(np.abs(col - J[:, i - 1])) / scale)
        ref = J[:, i - 1] @ X
        den = max(abs(ref), scale)
        worst = max(worst, abs(view.jtix(i, X) - ref) / den)
        nrm = J[:, i - 1] @ J[:, i - 1]
        worst = max(worst, abs(view.col_norm_sq(i) - nrm) / max(nrm, 1e-30))
    return worst


def qr_deviation(view, rng):
    """Recursive thin QR vs the dense factorization on a random free set."""
    dims = view.dims
    size = int(rng.integers(max(2, dims.n // 3), dims.n + 1))
    free = sorted(rng.choice(dims.n, size=size, replace=False) + 1)
    st = factorize(view, free)
    J = build_dense_jacobian(view)
    Qo, Ro = np.linalg.qr(J[:, [f - 1 for f in free]])
    s = np.sign(np.diag(Ro))
    s[s == 0] = 1.0
    Qo = Qo * s
    Ro = (Ro.T * s).T
    dev = max(np.max(np.abs(st.q_dense() - Qo)), np.max(np.abs(st.r_dense() - Ro)))
    orth = np.max(np.abs(st.q_dense().T @ st.q_dense() - np.eye(len(free))))
    return max(dev, orth)


def solver_deviation(rng, n_a=2, n_b=2, n_u=1, n_y=2, Np=6, Nu=3):
    """Operator-path solve vs the dense re-implementation on a random problem."""
    from .problem import InitialCondition

    model = _random_linear_model(rng, n_a, n_b, n_u, n_y)
    cfg = make_config(model, Np=Np, Nu=Nu,
                      wy=list(rng.uniform(50.0, 150.0, n_y)),
                      wu=list(rng.uniform(0.5, 2.0, n_u)),
                      umin=[-1.0] * n_u, umax=[1.0] * n_u,
                      y_ref=list(rng.uniform(-0.5, 0.5, n_y)),
                      gamma=1e-10, bvls_tol=1e-10)
    ic = InitialCondition(
        u_past=0.1 * rng.standard_normal((n_b - 1, n_u)),
        y_past=0.1 * rng.standard_normal((n_a, n_y)))
    z0 = np.zeros(cfg.n)
    rep = solve_bvnlls(z0, ic, model, cfg)
    ref = solve_bvnlls_dense(z0, ic, model, cfg)
    if not (rep.converged and ref["converged"]):
        return np.inf
    return float(np.max(np.abs(rep.z_star - ref["z"])))


CHECK_TOL_OPS = 1e-12
CHECK_TOL_QR = 1e-9
CHECK_TOL_SOLVER = 1e-9


def compare_dense_oracle(instances=100, seed=0, dims_list=None,
                         solver_instances=None):
    """Max deviations of the operator path against dense references.

    Returns a dict with the three worst-case deviations and the elapsed
    time; the ``ok`` flag applies the check thresholds.
    """
    if dims_list is None:
        dims_list = [Dims(2, 4, 2, 2, 4, 10), Dims(2, 4, 2, 2, 30, 30)]
    if solver_instances is None:
        solver_instances = max(2, instances // 10)
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    dev_ops = 0.0
    dev_qr = 0.0
    for dims in dims_list:
        for _ in range(instances):
            view = _random_view(rng, dims)
            dev_ops = max(dev_ops, operator_deviation(view))
            dev_qr = max(dev_qr, qr_deviation(view, rng))
    dev_solver = 0.0
    for _ in range(solver_instances):
        dev_solver = max(dev_solver, solver_deviation(rng))
    elapsed = time.perf_counter() - t0
    return {
        "instances": instances,
        "dims": [tuple((d.n_a, d.n_b, d.n_u, d.n_y, d.Nu, d.Np))
                 for d in dims_list],
        "operator_dev": dev_ops,
        "qr_dev": dev_qr,
        "solver_dev": dev_solver,
        "elapsed_s": elapsed,
        "ok": bool(dev_ops <= CHECK_TOL_OPS and dev_qr <= CHECK_TOL_QR
                   and dev_solver <= CHECK_TOL_SOLVER),
    }


# --- timing sweeps -----------------------------------------------------------


def benchmark(sim, horizons=None, steps=None, agree_tol=1e-8):
    """Time both solver paths on identical closed-loop problem sequences.

    For every horizon the loop is driven by the structure-exploiting path;
    the dense reference path re-solves each instance from the same warm
    start so the timings cover the exact same problems. Solutions must
    agree before the timings mean anything, so the worst disagreement is
    reported alongside.
    """
    horizons = list(sim.horizons if horizons is None else horizons)
    steps = sim.bench_steps if steps is None else steps
    bundle = get_bundle(sim.model)
    model = bundle.model
    results = []
    for H in horizons:
        plant = get_bundle(sim.plant).make_plant()
        kw = sim.mpc_kwargs()
        kw["Np"] = kw["Nu"] = H
        sparse_times = []
        dense_times = []
        agree = 0.0
        z = None
        flags = None
        sim_H = _with_horizon(sim, H)
        for k in range(steps):
            ic = plant.initial_condition()
            kw["y_ref"] = _reference_window(sim_H, model.n_y, k)
            cfg = make_config(model, **kw)
            if z is None:
                z = _cold_start(cfg, ic,
                                np.asarray(kw["u_ref"], dtype=float)
                                if kw["u_ref"] is not None
                                else np.zeros(model.n_u))
            t0 = time.perf_counter_ns()
            rep = solve_bvnlls(z, ic, model, cfg, warm_flags=flags,
                               structured=True)
            sparse_times.append((time.perf_counter_ns() - t0) / 1e3)
            t0 = time.perf_counter_ns()
            rep_d = solve_bvnlls(z, ic, model, cfg, warm_flags=flags,
                                 structured=False)
            dense_times.append((time.perf_counter_ns() - t0) / 1e3)
            agree = max(agree, float(np.max(np.abs(rep.z_star - rep_d.z_star))))
            plant.step(rep.z_star[:model.n_u])
            z = shift_warm_start(rep.z_star, cfg.dims, cfg.p, cfg.q)
            flags = shift_active_flags(rep.active_flags, cfg.dims) \
                if rep.active_flags is not None else None
        results.append({
            "horizon": H,
            "n": cfg.n, "m": cfg.m,
            "sparse_median_us": float(np.median(sparse_times)),
            "sparse_worst_us": float(np.max(sparse_times)),
            "dense_median_us": float(np.median(dense_times)),
            "dense_worst_us": float(np.max(dense_times)),
            "max_z_dev": agree,
            "agree": bool(agree <= agree_tol),
        })
    return results


def _with_horizon(sim, H):
    import copy

    out = copy.copy(sim)
    out.Np = H
    out.Nu = H
    return out


def bench_to_csv(results):
    cols = ["horizon", "n", "m", "sparse_median_us", "sparse_worst_us",
            "dense_median_us", "dense_worst_us", "max_z_dev", "speedup_median"]
    out = ["schema=1", ",".join(cols)]
    for r in results:
        speedup = r["dense_median_us"] / r["sparse_median_us"]
        out.append(",".join([
            str(r["horizon"]), str(r["n"]), str(r["m"]),
            f"{r['sparse_median_us']:.3f}", f"{r['sparse_worst_us']:.3f}",
            f"{r['dense_median_us']:.3f}", f"{r['dense_worst_us']:.3f}",
            f"{r['max_z_dev']:.3e}", f"{speedup:.3f}"]))
    return "\n".join(out) + "\n"
