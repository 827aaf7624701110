"""Simulation and verification toolkit for rough-kernel stochastic Volterra
equations: exact-increment discretization, the limiting error equation, and
the numerical checks that tie them together."""

__version__ = "0.1.0"

from .kernel import (  # noqa: F401
    KernelParams,
    QuadratureConfig,
    covariance_entry,
    identity_residual,
    kernel_integral,
    kernel_square_integral,
    kernel_value,
    power_increment,
)
from .gaussian import (  # noqa: F401
    CovarianceTable,
    FactorizedCovariance,
    StreamKey,
    build_covariance,
    factorize,
    low_rank_project,
    sample_step,
)
from .models import Model, get_model  # noqa: F401
from .scheme import (  # noqa: F401
    CoupledRun,
    GridPath,
    PathDraws,
    aggregate_fine_to_coarse,
    evaluate_between,
    sample_path_draws,
    simulate_coupled,
    simulate_euler,
    simulate_path,
)
from .limitlaw import (  # noqa: F401
    LimitRunInputs,
    compare_distributions,
    make_limit_noise_draws,
    simulate_limit_path,
)
from .analysis import (  # noqa: F401
    QVReport,
    deterministic_qv_limit,
    fractional_parts_integral,
    holder_norm,
    marchaud_derivative,
    qv_functionals,
)
from .mcstats import Ensemble, ensemble_stats, ks_two_sample, rate_regression  # noqa: F401
from .engine import CoarseRequest, run_coupled_ensemble  # noqa: F401
