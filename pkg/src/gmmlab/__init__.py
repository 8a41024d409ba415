"""Over-parameterized gradient EM for isotropic Gaussian mixtures."""

from gmmlab.divergence import LossEstimate, chi_square_1d, kl_chi2_identity_check, kl_loss, loss_sandwich
from gmmlab.errors import (
    GmmLabError,
    InvalidArgument,
    InvalidModel,
    NumericalAbort,
    SandwichUnavailable,
    UnsupportedMode,
    WhiteningFailed,
)
from gmmlab.estimators import MonteCarlo, Quadrature1D, StratifiedMC
from gmmlab.gradients import GradientBundle, fd_gradient, grad_means_direct, grad_means_stein, grad_weights
from gmmlab.model import (
    AssumptionReport,
    MixtureModel,
    Partition,
    check_assumptions,
    generate_truth,
    log_density,
    partition,
    posterior,
    potential_U,
    recenter,
    sample,
)
from gmmlab.trainer import (
    Online,
    Population,
    Trajectory,
    TrainConfig,
    detect_pruned,
    init_random,
    run_online,
    run_population,
)
from gmmlab.weights import KktCertificate, kkt_residual, solve_weights

__version__ = "0.1.0"
