"""Federated learning over intermittent links with collaborative relaying."""

__version__ = "0.1.0"

from .connectivity import (ConnectivityModel, InvalidModelError, LinkRealization, build_erdos_renyi,
                           build_mmwave, build_threshold, load_model, random_model, sample_realization,
                           sample_realizations, save_model, validate_model)
from .weights import (InfeasibleModelError, SolverReport, feasibility_check, optimize_weights,
                      s_bar_value, s_value, solve_column_finetune, solve_column_relaxed, unbiasedness_residuals)
from .objective import (LogisticObjective, QuadraticObjective, make_logistic_synthetic, make_quadratic,
                        random_quadratic, sort_and_partition)
from .protocol import MODES, RoundTrace, Schedule, run_simulation
from .theory import (TheoryConstants, bound_curve, closed_form_covariance, compute_constants,
                     enumerate_covariance, theorem_bound)
