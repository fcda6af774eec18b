"""Model-based learning of robotic throws with Monte Carlo policy search."""

from .baselines import BallisticPolicy, MLPThrowPolicy, RegressionSet, ballistic_policy, mlp_policy, train_mlp
from .config import Config, load_config
from .core import (
    CartesianState,
    CostParams,
    PhysicalConstants,
    ReleaseGeometry,
    RngStream,
    TargetDomain,
    TargetPoint,
    polar_of_target,
    sample_target,
    sample_targets,
    saturated_cost,
    velocity_direction,
)
from .delayest import BOConfig, DelayEstimator, DelayModel, bo_minimize, delay_objective, recompute_command_time
from .gpmodel import GaussianProcess, ThrowDynamicsModel
from .harness import EvalReport, MCPilot, SimulatedSystem, TrialConfig, evaluate, retarget, run_trial
from .mcopt import RolloutConfig, optimize_policy, rollout
from .policy import RBFPolicy, init_policy
from .world import WorldConfig, execute_throw, execute_throws

__version__ = "0.1.0"
