"""Finite-difference score matching laboratory.

Decomposes arbitrary-order directional derivatives into stencil-weighted
function evaluations, reformulates score-matching objectives in that
form, and verifies at desk scale that the FD objectives match their
gradient-based counterparts in value, gradient direction and trained
model quality while costing measurably less.
"""

from .autodiff import (
    ShapeError,
    Tape,
    Tensor,
    exact_directional_derivative,
    gradient,
    leaf,
)
from .bench import BenchRecord, bench_objective, bench_order_sweep
from .counters import EvalCounters, counters_scope
from .densities import FisherEstimate, fisher_divergence, make_density
from .models import (
    MlpEnergyModel,
    MlpScoreModel,
    QuadraticEnergyModel,
    ShiftedEnergyModel,
    load_model,
    reference_energy_model,
    reference_score_model,
    save_model,
)
from .objectives import (
    DirectionSample,
    ObjectiveEstimate,
    ZeroGradientError,
    dsm,
    dsm_sliced,
    evaluate_objective,
    fd_dsm,
    fd_ssm,
    fd_ssmvr,
    grad_angle,
    mpf_naive,
    parameter_gradients,
    sample_direction,
    sm_exact,
    ssm,
    ssmvr,
)
from .sampling import AnnealSchedule, DivergenceError, langevin
from .stencil import (
    FdResult,
    GeneralStencil,
    SymmetricStencil,
    fd_directional,
    solve_general,
    solve_symmetric,
)
from .training import Adam, Sgd, TrainConfig, TrainResult, train, train_step

__version__ = "0.1.0"
