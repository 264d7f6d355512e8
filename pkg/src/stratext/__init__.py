"""Linear classifiers trained against agents whose feature manipulations cost each other."""
from .eqdiff import DegenerateJacobianWarning, Loss, NeJacobian, fd_jacobian, loss_gradient, ne_jacobian
from .equilibrium import (Backtracking, EquilibriumResult, FixedStep, SolverConfig, best_response,
                          br_dynamics, brute_force_ne, recover_duals, solve_ne, verify_pne)
from .errors import (ConfigurationError, ConvergenceError, ModelViolationError, NumericalError,
                     StratextError, TrainingError, UnsupportedConfigurationError, UsageError)
from .game import (ClassifierParams, ConstantGain, CostModel, Externality, ExternalityModel,
                   GameInstance, OutOfRangeWarning, agent_utility, check_convexity_threshold, cost,
                   cross_hessian, pairwise_externality, potential, potential_gradient,
                   potential_hessian, score, total_externality)
from .learning import (Dataset, GameSpec, Mode, PopulationModel, TrainConfig, TrainTrace,
                       empirical_risk, imperfect_info_check, lipschitz_constants, make_dataset,
                       per_sample_loss, sample_complexity, sample_instance, train)

__version__ = "0.1.0"
