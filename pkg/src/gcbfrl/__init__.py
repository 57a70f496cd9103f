"""Safe model-based RL with barrier-function constraints in a trust-region update."""

__version__ = "0.1.0"

from .constraints import (CircleGeometry, ConstraintSpec, DegreeCheck, StateConstraint,
                          aggregate_h, gcbf_bound, road_margin_h, two_circle_h,
                          verify_relative_degree, violation_distance)
from .dynamics import (BicycleModel, BicycleParams, DoubleIntegrator, DynamicsModel,
                       SurroundingVehicleState, predict_surrounding, wrap_angle)
from .nets import (GaussianPolicy, MlpSpec, fisher_vector_product, init_mlp_params,
                   init_policy_params, mlp_forward, mlp_vjp, policy_kl, sample_actions)
from .rollout import (RolloutBatch, RolloutModel, constraint_value_and_gradient,
                      constraint_gradient_recursion, objective_and_gradient,
                      pointwise_constraint_values, rollout)
from .solver import (LinearizedStep, check_feasibility, conjugate_gradient, line_search,
                     normalize_gradients, recovery_step, solve_step)
from .trainer import TrainConfig, Trainer, TrainState, critic_update, train
