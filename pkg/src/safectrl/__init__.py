"""Robust barrier-constraint control: per-state QP safety filters for
disturbed control-affine systems, plus distillation of the QP expert into a
small feed-forward policy by dataset aggregation."""

__version__ = "0.1.0"

from .cbf import (
    BarrierSpec,
    ConstraintRow,
    Deg2Terms,
    DynamicsModel,
    NumericalError,
    SeparabilityViolation,
    assemble_deg1,
    assemble_deg2,
    assemble_deg2_terms,
    lie_first,
    psi_chain_eval,
    validate_fd,
)
from .dagger import DaggerConfig, DaggerReport, ExpertFailure, evaluate_policy, run_dagger
from .expert import ExpertPolicy, expert_control
from .policy_nn import Dataset, MlpPolicy, TrainConfig, forward, load_model, save_model, train
from .qp import ControlQp, Infeasible, solve_control_qp
from .scenarios import build_example1, build_unicycle, bundled_scenarios, load_scenario
from .sim import DisturbanceSignal, Goal, Scenario, Trajectory, rk4_step, rollout
from .wopt import BoxQpProblem, DisturbanceBox, solve_box_qp_wopt, solve_linear_wopt
