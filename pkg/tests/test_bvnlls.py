import numpy as np
import pytest

from boxmpc.builtins import lti_arx_demo
from boxmpc.bvnlls import backtrack, blm_solve, kkt_check, solve_bvnlls
from boxmpc.model import ModelDef, StageLinearizations
from boxmpc.problem import (InitialCondition, build_equality_residual,
                            make_config)


def demo_setup(**over):
    bundle = lti_arx_demo()
    d = dict(bundle.defaults)
    d.update(over)
    cfg = make_config(bundle.model, Np=d["Np"], Nu=d["Nu"], wy=d["wy"],
                      wu=d["wu"], umin=d["umin"], umax=d["umax"],
                      y_ref=d["y_ref"], u_ref=d["u_ref"], gamma=d["gamma"],
                      bvls_tol=d["bvls_tol"])
    plant = bundle.make_plant()
    return bundle.model, cfg, plant.initial_condition()


def parabola_model():
    """M = y_k - u_{k-1}^2, one step ahead."""
    def res(Y, U, S):
        return np.array([Y[1, 0] - U[0, 0] ** 2])

    def jac(Y, U, S):
        return StageLinearizations(
            A=[np.array([[1.0]]), np.array([[0.0]])],
            B=[np.array([[-2.0 * U[0, 0]]])], affine_term=np.zeros(1))

    return ModelDef(n_a=1, n_b=1, n_u=1, n_y=1, residual_fn=res, jacobian_fn=jac)


class TestKktCheck:
    def test_all_free_zero_gradient(self):
        ok, worst = kkt_check(np.zeros(4), np.zeros(4, bool), np.zeros(4, bool),
                              1e-6)
        assert ok and worst == 0.0

    def test_lower_bound_sign_convention(self):
        d = np.array([0.5, 0.0])
        L = np.array([True, False])
        U = np.zeros(2, bool)
        ok, worst = kkt_check(d, L, U, 1e-6)
        assert ok  # lambda_p = +0.5 >= -gamma

    def test_free_violation_reported(self):
        d = np.array([1e-3, 0.0])
        ok, worst = kkt_check(d, np.zeros(2, bool), np.zeros(2, bool), 1e-6)
        assert not ok
        assert worst == pytest.approx(1e-3)


class TestBacktrack:
    def test_linear_residual_full_step(self):
        A = np.array([[2.0, 0.0], [0.0, 1.0]])
        c0 = np.array([1.0, -2.0])

        def res(z):
            return A @ z + c0

        z = np.array([1.0, 1.0])
        b = res(z)
        J = A
        d = J.T @ b
        dz = np.linalg.solve(J, -b)  # lands exactly on the optimum
        alpha, b_new, phi, cuts, stalled = backtrack(
            res, z, dz, float(b @ b), float(d @ dz), c=1e-4, tau=0.5)
        assert alpha == 1.0 and cuts == 0 and not stalled
        assert phi <= 1e-20

    def test_scalar_quartic_needs_cuts(self):
        def res(z):
            return np.array([z[0] ** 2 - 1.0])

        z = np.array([2.0])
        b = res(z)
        J = np.array([[2.0 * z[0]]])
        dz = np.linalg.solve(J, -b)  # Gauss-Newton step: -3/4
        d = J.T @ b
        alpha, b_new, phi, cuts, stalled = backtrack(
            res, z, dz, float(b @ b), float(d @ dz), c=1e-4, tau=0.5)
        assert not stalled
        assert 0 < alpha <= 1.0
        # after k cuts the printed rule has shrunk theta by tau^(k(k+1)/2)
        theta = 1e-4 * float(d @ dz) * 0.5 ** (cuts * (cuts + 1) / 2)
        assert phi <= float(b @ b) + theta + 1e-18

    def test_larger_c_never_takes_longer_steps(self):
        def res(z):
            return np.array([z[0] ** 2 - 1.0])

        z = np.array([2.0])
        b = res(z)
        J = np.array([[4.0]])
        dz = np.linalg.solve(J, -b)
        d = J.T @ b
        a_small = backtrack(res, z, dz, float(b @ b), float(d @ dz),
                            c=1e-4, tau=0.5)[0]
        a_large = backtrack(res, z, dz, float(b @ b), float(d @ dz),
                            c=0.4999, tau=0.5)[0]
        assert a_large <= a_small


class TestSolveBvnlls:
    def test_linear_case_single_solve_full_step(self):
        model, cfg, ic = demo_setup()
        rep = solve_bvnlls(np.zeros(cfg.n), ic, model, cfg)
        assert rep.converged
        assert rep.bvls_solves == 1
        assert rep.last_alpha == 1.0
        assert rep.ls_backtracks == 0

    def test_optimal_start_takes_no_bvls_solves(self):
        model, cfg, ic = demo_setup()
        rep = solve_bvnlls(np.zeros(cfg.n), ic, model, cfg)
        rep2 = solve_bvnlls(rep.z_star, ic, model, cfg)
        assert rep2.converged
        assert rep2.bvls_solves == 0
        assert np.array_equal(rep2.z_star, rep.z_star)

    def test_multipliers_zero_off_active_sets(self):
        model, cfg, ic = demo_setup()
        rep = solve_bvnlls(np.zeros(cfg.n), ic, model, cfg)
        L = rep.z_star <= cfg.p
        U = rep.z_star >= cfg.q
        assert np.count_nonzero(rep.lambda_p[~L]) == 0
        assert np.count_nonzero(rep.lambda_q[~U]) == 0
        assert np.all(rep.lambda_p[L] >= -cfg.gamma)
        assert np.all(rep.lambda_q[U] >= -cfg.gamma)

    def test_solution_within_bounds_and_clipped_flagged(self):
        model, cfg, ic = demo_setup()
        z0 = 10.0 * np.ones(cfg.n)
        rep = solve_bvnlls(z0, ic, model, cfg)
        assert rep.clipped_start
        assert np.all(rep.z_star >= cfg.p - 1e-15)
        assert np.all(rep.z_star <= cfg.q + 1e-15)

    def test_scalar_toy_matches_grid_search(self):
        # one move, one step: z = (u, y1); M = y1 - u^2, track y to 0.5
        model = parabola_model()
        cfg = make_config(model, Np=1, Nu=1, wy=[1e4], wu=[1.0],
                          umin=[-1.0], umax=[1.0], ymin=[-1.0], ymax=[1.0],
                          y_ref=[0.5], gamma=1e-12, bvls_tol=1e-12)
        ic = InitialCondition(u_past=np.zeros((0, 1)), y_past=[[0.0]])
        rep = solve_bvnlls(np.array([0.1, 0.1]), ic, model, cfg)
        assert rep.converged
        from boxmpc.problem import build_full_residual
        us = np.linspace(-1, 1, 1001)
        ys = np.linspace(-1, 1, 1001)
        best = (np.inf, None)
        for u in us:
            # optimize y analytically per u: quadratic in y
            # cost = (wy/sr)^2 (y-.5)^2 + (wu/sr)^2 u^2 + (y-u^2)^2
            a = cfg.w[1] ** 2 + 1.0
            yopt = (cfg.w[1] ** 2 * 0.5 + u ** 2) / a
            yopt = min(max(yopt, -1.0), 1.0)
            z = np.array([u, yopt])
            r = build_full_residual(z, ic, model, cfg).r
            c = r @ r
            if c < best[0]:
                best = (c, z)
        assert rep.Phi <= best[0] + 1e-12
        # the cost is even in u, so compare up to the sign of the move
        assert abs(abs(rep.z_star[0]) - abs(best[1][0])) <= 2e-3  # grid pitch
        assert abs(rep.z_star[1] - best[1][1]) <= 2e-3

    def test_cost_trace_properties(self):
        model, cfg, ic = demo_setup()
        rep = solve_bvnlls(np.zeros(cfg.n), ic, model, cfg)
        for psi, phi, alpha, dTdz, maxviol in rep.cost_trace:
            assert dTdz < 0.0
            assert maxviol <= 1e-15
            assert phi <= psi + cfg.c * alpha * dTdz + 1e-18


class TestBlmSolve:
    def _toy(self):
        # one step, one move: equality y = 0.8 u + 0.1, track (u,y) references
        def res(Y, U, S):
            return np.array([Y[1, 0] - 0.8 * U[0, 0] - 0.1])

        def jac(Y, U, S):
            return StageLinearizations(
                A=[np.array([[1.0]]), np.array([[0.0]])],
                B=[np.array([[-0.8]])], affine_term=np.zeros(1))

        model = ModelDef(n_a=1, n_b=1, n_u=1, n_y=1, residual_fn=res,
                         jacobian_fn=jac)
        cfg = make_config(model, Np=1, Nu=1, wy=[1.0], wu=[2.0],
                          umin=[-5.0], umax=[5.0], ymin=[-5.0], ymax=[5.0],
                          y_ref=[1.0], u_ref=[-0.5], sqrt_rho=1.0,
                          gamma=1e-12, bvls_tol=1e-12)
        ic = InitialCondition(u_past=np.zeros((0, 1)), y_past=[[0.0]])
        return model, cfg, ic

    def _toy_kkt_solution(self):
        # minimize 0.5*(y-1)^2 + 0.5*4*(u+0.5)^2  s.t.  y = 0.8u + 0.1
        # substitute: phi(u) = 0.5(0.8u - 0.9)^2 + 2(u+0.5)^2
        # phi'(u) = 0.8(0.8u - 0.9) + 4(u + 0.5) = 0
        u = (0.8 * 0.9 - 2.0) / (0.64 + 4.0)
        return u, 0.8 * u + 0.1

    def test_single_iteration_equals_plain_solve(self):
        model, cfg, ic = self._toy()
        z0 = np.zeros(cfg.n)
        plain = solve_bvnlls(z0, ic, model, cfg)
        one = blm_solve(z0, ic, model, cfg, outer_cap=1, feas_target=0.0)
        assert np.array_equal(one.report.z_star, plain.z_star)

    def test_converges_to_hand_kkt_solution(self):
        model, cfg, ic = self._toy()
        out = blm_solve(np.zeros(cfg.n), ic, model, cfg, outer_cap=30,
                        feas_target=1e-9, rho0=100.0, rho_factor=10.0)
        u_star, y_star = self._toy_kkt_solution()
        assert out.converged
        assert out.feas_trace[-1] <= 1e-9
        assert out.report.z_star[0] == pytest.approx(u_star, abs=1e-7)
        assert out.report.z_star[1] == pytest.approx(y_star, abs=1e-7)

    def test_feasibility_improves_across_outer_iterations(self):
        model, cfg, ic = self._toy()
        out = blm_solve(np.zeros(cfg.n), ic, model, cfg, outer_cap=6,
                        feas_target=0.0, rho0=100.0, rho_factor=10.0)
        f = out.feas_trace
        assert all(b <= a * 1.01 for a, b in zip(f, f[1:]))
        assert f[-1] < f[0]

    def test_multiplier_trace_recorded(self):
        model, cfg, ic = self._toy()
        out = blm_solve(np.zeros(cfg.n), ic, model, cfg, outer_cap=4,
                        feas_target=0.0, rho0=10.0)
        assert len(out.lambda_trace) == 4
        assert len(out.rho_trace) == 4
        assert out.rho_trace[1] == pytest.approx(100.0)
