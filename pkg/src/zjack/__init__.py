"""Z-estimation with plug-in and jackknife-debiased functional estimates."""

from .data import Dataset, IpwRecord, IvRecord, LinearRecord
from .jackknife import EstimateReport, LooSet, compute_loo_set, estimate
from .models import (
    IpwModel,
    LinearModel,
    LocationModel,
    LogisticModel,
    TslsModel,
    ipw_model,
    linear_model,
    logistic_model,
    tsls_model,
)
from .zcore import (
    CallableFunctional,
    Functional,
    LinearFunctional,
    QuadraticFunctional,
    SolveResult,
    SolverConfig,
    ZModel,
    empirical_jacobian,
    empirical_moment,
    finite_difference_jacobian,
    loo_solve,
    solve_z,
)

__version__ = "0.1.0"
