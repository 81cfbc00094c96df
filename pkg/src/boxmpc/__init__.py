"""Construction-free MPC as box-constrained nonlinear least squares.

The optimization problem of a reference-tracking controller over a nonlinear
parameter-varying input/output model is solved without ever assembling its
matrices: equality constraints enter through a quadratic penalty, the
residual Jacobian is accessed through parameterized column operators, and
the active-set inner solver maintains a structure-aware recursive thin QR
factorization.
"""

from .jacobian import Dims, JacobianView, column_range
from .model import (IllPosedModelError, ModelDef, StageLinearizations,
                    check_jacobian, eval_residual, linearize)
from .problem import (InitialCondition, MPCConfig, ResidualVector,
                      alm_residual, build_equality_residual,
                      build_full_residual, decode_index, make_config,
                      shift_warm_start)

__all__ = [
    "Dims", "JacobianView", "column_range",
    "ModelDef", "StageLinearizations", "IllPosedModelError",
    "eval_residual", "linearize", "check_jacobian",
    "MPCConfig", "InitialCondition", "ResidualVector", "make_config",
    "decode_index", "build_equality_residual", "build_full_residual",
    "alm_residual", "shift_warm_start",
]

__version__ = "0.1.0"
