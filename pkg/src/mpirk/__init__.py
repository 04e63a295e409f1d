"""Multiple-precision implicit Runge-Kutta solvers.

High-order collocation methods (Gauss, Radau IIA) integrated in arbitrary
binary precision, with the stage systems solved by transformed inner
iterations and mixed-precision iterative refinement.
"""

from .mpnum import (
    BandedMatrix,
    DimensionMismatch,
    LinAlgError,
    MPMatrix,
    MPVector,
    NonFiniteValue,
    PrecisionContext,
    SingularMatrix,
    band_lu_factor,
    cond_inf,
    convert,
    lu_factor,
    mpfr_from_hex,
    mpfr_to_decimal,
    mpfr_to_hex,
)
from .tableau import (
    EmbeddedWeights,
    Tableau,
    WTransform,
    embedded_weights,
    gauss_tableau,
    order_residuals,
    radau2a_tableau,
    shifted_legendre,
    stability_grid,
    stability_value,
    tableau_from_json,
    tableau_to_json,
    w_transform,
    zeta_values,
)
from .inner import (
    BICGSTAB,
    DIRECT_LU,
    GMRES,
    InnerDivergence,
    InnerReport,
    NewtonOptions,
    PRECOND_BLOCK_LU_S,
    PRECOND_NONE,
    RefinementConfig,
    RefinementStalled,
    mixed_refine,
    quasi_newton,
    simplified_newton,
)
from .integrate import (
    MaxStepsExceeded,
    RunReport,
    StepControl,
    StepFailed,
    StepResult,
    error_norm,
    integrate,
    irk_step,
    next_step_size,
)
from .problems import (
    IVProblem,
    KNOWN_PROBLEMS,
    make_brusselator_1d,
    make_linear_random,
    make_lorenz,
    make_mxy,
    make_problem,
    make_vdpol,
)

__version__ = "0.1.0"

__all__ = [
    "BICGSTAB",
    "BandedMatrix",
    "DIRECT_LU",
    "DimensionMismatch",
    "EmbeddedWeights",
    "GMRES",
    "IVProblem",
    "InnerDivergence",
    "InnerReport",
    "KNOWN_PROBLEMS",
    "LinAlgError",
    "MPMatrix",
    "MPVector",
    "MaxStepsExceeded",
    "NewtonOptions",
    "NonFiniteValue",
    "PRECOND_BLOCK_LU_S",
    "PRECOND_NONE",
    "PrecisionContext",
    "RefinementConfig",
    "RefinementStalled",
    "RunReport",
    "SingularMatrix",
    "StepControl",
    "StepFailed",
    "StepResult",
    "Tableau",
    "WTransform",
    "band_lu_factor",
    "cond_inf",
    "convert",
    "embedded_weights",
    "error_norm",
    "gauss_tableau",
    "integrate",
    "irk_step",
    "lu_factor",
    "make_brusselator_1d",
    "make_linear_random",
    "make_lorenz",
    "make_mxy",
    "make_problem",
    "make_vdpol",
    "mixed_refine",
    "mpfr_from_hex",
    "mpfr_to_decimal",
    "mpfr_to_hex",
    "next_step_size",
    "order_residuals",
    "quasi_newton",
    "radau2a_tableau",
    "shifted_legendre",
    "simplified_newton",
    "stability_grid",
    "stability_value",
    "tableau_from_json",
    "tableau_to_json",
    "w_transform",
    "zeta_values",
    "__version__",
]
