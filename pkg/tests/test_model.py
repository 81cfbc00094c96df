import numpy as np
import pytest

from boxmpc.builtins import cstr, cstr_steady_state, lti_arx_demo
from boxmpc.model import (IllPosedModelError, ModelDef, StageLinearizations,
                          check_jacobian, eval_residual, linearize)


def scalar_arx(a=0.5, b=0.2):
    """M = y_k - a*y_{k-1} - b*u_{k-1}."""
    def res(Y, U, S):
        return np.array([Y[1, 0] - a * Y[0, 0] - b * U[0, 0]])

    def jac(Y, U, S):
        return StageLinearizations(A=[np.array([[1.0]]), np.array([[-a]])],
                                   B=[np.array([[-b]])],
                                   affine_term=np.zeros(1))

    return ModelDef(n_a=1, n_b=1, n_u=1, n_y=1, residual_fn=res, jacobian_fn=jac)


def quad_model():
    """M = y_k - y_{k-1}^2 - u_{k-1}."""
    def res(Y, U, S):
        return np.array([Y[1, 0] - Y[0, 0] ** 2 - U[0, 0]])

    return ModelDef(n_a=1, n_b=1, n_u=1, n_y=1, residual_fn=res)


class TestEvalResidual:
    def test_trajectory_on_recursion_gives_zero(self):
        m = scalar_arx()
        r = eval_residual(m, Y=[[0.4], [0.2]], U=[[0.0]])
        assert r == pytest.approx([0.0], abs=0)

    def test_direct_substitution(self):
        m = scalar_arx()
        r = eval_residual(m, Y=[[1.0], [1.0]], U=[[1.0]])
        assert r == pytest.approx([0.3], abs=1e-15)

    def test_cstr_steady_state_is_a_model_zero(self):
        bundle = cstr()
        x = cstr_steady_state(100.0)
        y = np.array([1.0, 0.01]) * x
        r = eval_residual(bundle.model, Y=[y, y], U=[[1.0]])
        assert np.max(np.abs(r)) <= 1e-12

    def test_shape_mismatch_rejected(self):
        m = scalar_arx()
        with pytest.raises(ValueError):
            eval_residual(m, Y=[[0.4]], U=[[0.0]])
        with pytest.raises(ValueError):
            eval_residual(m, Y=[[0.4], [0.2]], U=[[0.0], [0.1]])

    def test_wrong_output_width_rejected(self):
        m = ModelDef(n_a=1, n_b=1, n_u=1, n_y=1,
                     residual_fn=lambda Y, U, S: np.zeros(2))
        with pytest.raises(ValueError, match="length"):
            eval_residual(m, Y=[[0.0], [0.0]], U=[[0.0]])


class TestLinearize:
    def test_lti_standard_form(self):
        bundle = lti_arx_demo()
        # consistent point: advance the plant recursion itself
        plant = bundle.make_plant(y0=0.5, u0=0.1)
        plant.y_hist = [np.array([0.3]), np.array([0.5])]
        y2 = plant.step(np.array([0.7])).copy()
        Y = np.array([[0.3], [0.5], y2])
        U = np.array([[0.1], [0.7]])
        lin = linearize(bundle.model, Y, U)
        assert np.allclose(lin.A[0], np.eye(1))
        assert np.max(np.abs(lin.affine_term)) <= 1e-15

    def test_scalar_linear_coefficients(self):
        m = scalar_arx(a=0.7, b=0.4)
        lin = linearize(m, Y=[[2.0], [-1.0]], U=[[3.0]])
        assert np.allclose(lin.A[0], [[1.0]], rtol=0, atol=0)
        assert np.allclose(lin.A[1], [[-0.7]], rtol=0, atol=0)
        assert np.allclose(lin.B[0], [[-0.4]], rtol=0, atol=0)

    def test_quadratic_output_lag(self):
        lin = linearize(quad_model(), Y=[[0.3], [0.0]], U=[[0.0]])
        assert lin.A[1][0, 0] == pytest.approx(-0.6, abs=1e-9)

    def test_affine_reconstruction_matches_affine_term(self, rng):
        m = scalar_arx(a=0.9, b=0.3)
        Yh = rng.standard_normal((2, 1))
        Uh = rng.standard_normal((1, 1))
        lin = linearize(m, Yh, Uh)

        def affine_res(Y, U, S):
            out = lin.affine_term.copy()
            for j in range(2):
                out = out + lin.A[j] @ (Y[1 - j] - Yh[1 - j])
            out = out + lin.B[0] @ (U[0] - Uh[0])
            return out

        am = ModelDef(n_a=1, n_b=1, n_u=1, n_y=1, residual_fn=affine_res)
        r = eval_residual(am, Yh, Uh)
        assert r == pytest.approx(lin.affine_term, abs=0)

    def test_singular_a0_flagged(self):
        def res(Y, U, S):
            # no dependence on y_k at all
            return np.array([Y[0, 0] + U[0, 0]])

        m = ModelDef(n_a=1, n_b=1, n_u=1, n_y=1, residual_fn=res)
        with pytest.raises(IllPosedModelError):
            linearize(m, Y=[[0.1], [0.2]], U=[[0.3]])


class TestCheckJacobian:
    def test_linear_model_exact(self):
        m = scalar_arx()
        dev = check_jacobian(m, Y=[[0.4], [0.2]], U=[[0.3]], step=1e-4)
        assert dev <= 1e-9

    def test_quadratic_truncation_bound(self):
        def jac(Y, U, S):
            return StageLinearizations(
                A=[np.array([[1.0]]), np.array([[-2.0 * Y[0, 0]]])],
                B=[np.array([[-1.0]])], affine_term=np.zeros(1))

        m = quad_model()
        m.jacobian_fn = jac
        dev = check_jacobian(m, Y=[[1.0], [0.5]], U=[[0.2]], step=1e-5)
        assert dev <= 1e-7

    def test_injected_error_is_recovered(self):
        def bad_jac(Y, U, S):
            return StageLinearizations(
                A=[np.array([[1.0]]), np.array([[-0.5 + 0.1]])],
                B=[np.array([[-0.2]])], affine_term=np.zeros(1))

        m = scalar_arx()
        m.jacobian_fn = bad_jac
        dev = check_jacobian(m, Y=[[0.4], [0.2]], U=[[0.3]], step=1e-6)
        assert dev >= 0.09

    def test_no_jacobian_fn_rejected(self):
        with pytest.raises(ValueError):
            check_jacobian(quad_model(), Y=[[0.0], [0.0]], U=[[0.0]])

    @pytest.mark.parametrize("seed", range(5))
    def test_builtin_jacobians_match_fd_at_random_points(self, seed):
        rng = np.random.default_rng(seed)
        bundle = cstr()
        Y = np.array([[0.05, 4.0], [0.1, 4.6]]) \
            + 0.02 * rng.standard_normal((2, 2))
        U = np.array([[1.0 + 0.05 * rng.standard_normal()]])
        assert check_jacobian(bundle.model, Y, U, step=1e-6) <= 1e-5

        demo = lti_arx_demo()
        Y = rng.standard_normal((3, 1))
        U = rng.standard_normal((2, 1))
        assert check_jacobian(demo.model, Y, U, step=1e-6) <= 1e-5


class TestFiniteDifferenceFallback:
    def test_fd_matches_analytic_on_quadratic(self):
        m = quad_model()
        lin = linearize(m, Y=[[0.3], [0.1]], U=[[0.5]])
        assert lin.A[0][0, 0] == pytest.approx(1.0, abs=1e-9)
        assert lin.A[1][0, 0] == pytest.approx(-0.6, abs=1e-8)
        assert lin.B[0][0, 0] == pytest.approx(-1.0, abs=1e-9)
        assert lin.affine_term[0] == pytest.approx(0.1 - 0.09 - 0.5)
