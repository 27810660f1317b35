"""Distributed and localized MPC via closed-loop response synthesis.

Each subsystem of a networked LTI plant computes its slice of a
closed-loop policy by consensus, exchanging data only with a bounded
graph neighborhood, under nominal, norm-bounded, or polytopic
disturbances.  A centralized solver provides ground truth.
"""

from .admm import (AdmmConfig, DlmpcSolver, SolveResult, check_convergence,
                   check_localizability, solve_dlmpc)
from .constraints import (AugmentedPair, ConstraintSpec, LocalNormBound,
                          PolytopeNoise, QuadraticCost, box_constraints,
                          box_polytope, build_augmented, local_norm_lhs,
                          unconstrained_spec,
                          multiplier_mask, nominal_feasible,
                          polytopic_constraints, response_mask)
from .errors import InfeasibleError, SolverError, TopologyViolation
from .model import (LocalitySets, SparsityMask, SystemModel, d_sets,
                    d_sets_from_model, derive_graph, generate_power_grid,
                    locality_masks)
from .netsim import (Message, SimTransport, Trajectory, exchange, noise_gen,
                     run_closed_loop)
from .oracle import OracleSolution, robust_violation_check, solve_centralized
from .qp import KktSolution, QpProblem, eq_ls_closed_form, solve_qp
from .sls_core import (BlockOperator, DisturbanceSignal, achievability_matrix,
                       achievability_residual, closed_loop_map,
                       controller_rollout, extract_u0, localized_completion,
                       stack_response)

__version__ = "0.1.0"
