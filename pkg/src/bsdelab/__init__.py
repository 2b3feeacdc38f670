"""bsdelab: reflecting-diffusion Monte Carlo, BSDE solvers, and PDE cross-checks."""

from .coefficients import (
    CoefficientField,
    EllipticityReport,
    check_ellipticity,
    divergence_drift,
    evaluate,
    factor,
    field_from_name,
)
from .domain import DomainSpec, HalfSpace, contains, project
from .engine import (
    InitialLaw,
    PathBundle,
    SimulationConfig,
    functional_integral,
    quadratic_variation_report,
    simulate,
)
from .errors import (
    BsdelabError,
    EllipticityError,
    IllPosedError,
    InputError,
    NumericalError,
)
from .regression import (
    ConditionalEstimate,
    RegressionBasis,
    RepresentationEstimate,
    evaluate_density,
    extract_densities,
    fit_conditional,
)

__version__ = "0.1.0"
