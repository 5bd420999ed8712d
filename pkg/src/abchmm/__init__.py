"""abchmm: tolerance-smoothed (ABC) likelihood inference for hidden Markov models.

The likelihood of HMM data is replaced by the probability that a fresh
trajectory lands within a tolerance ball of every observation; that
probability is proportional to the exact likelihood of a smoothed
("windowed") emission model, which this package computes exactly for finite
state spaces, estimates by Monte Carlo, maximises, and integrates into
posteriors.  A study harness measures the asymptotic price of the tolerance:
the induced bias, its rate in the tolerance, the sandwich-variance CLT of
the estimator, and the normal shape of the posterior.
"""

__version__ = "0.1.0"

from .models import (
    CountingAtoms,
    DiscreteAtoms,
    GaussianPerState,
    HmmSpec,
    Lebesgue1D,
    ParamSpace,
    Trajectory,
    UniformInterval,
    dyadic_mixture,
    emission_density,
    gaussian_location,
    gaussian_scale,
    make_spec,
    simulate,
    transition_matrix,
    two_state_gaussian,
    two_state_switch,
    validate_spec,
)
from .windows import (
    BallMeasure,
    QuadratureConfig,
    WindowedEmission,
    ZeroBallError,
    ball_measure,
    perturb_sample,
    window_density,
    window_density_grad,
)
from .inference import (
    LoglikResult,
    SurfaceEstimate,
    ScoreUndefinedError,
    brute_force_loglik,
    log_likelihood,
    observed_information,
    relative_surface,
    score,
)
from .monte_carlo import (
    AbcEstimate,
    ball_probability_exact,
    ball_probability_mc,
    ball_probability_smc,
)
from .estimators import (
    FlatPrior,
    GaussianPrior,
    MleResult,
    OptimizerConfig,
    PosteriorGrid,
    PseudoTrue,
    SandwichVariance,
    abc_mle,
    abc_posterior,
    limiting_information,
    limiting_score_variance,
    population_sandwich,
    posterior_mcmc,
    pseudo_true_parameter,
    sandwich_variance,
)
from .studies import (
    StudyResult,
    bias_rate_study,
    bvm_study,
    clt_study,
    dyadic_gradient_check,
    optimal_eps_study,
    surface_convergence_study,
)
from .seeds import derive_seed
