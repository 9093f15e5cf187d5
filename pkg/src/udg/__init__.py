"""Unsupervised data generation for offline RL on a 2-D point-mass environment."""

from .core import Buffer, ContractError, EnvSpec, TaskSpec, Transition, env_step, read_buffer, relabel_buffer, rollout, write_buffer
from .model import EpisodicModel, model_build, model_query
from .offline import GridPlanner, OfflineConfig, evaluate_policy, grid_value_iteration, mopo_lite_train
from .pipeline import UDGConfig, mix_buffers, run_udg, select_buffer, verify_gap_bound, verify_telescoping
from .policy import CemConfig, DiversityConfig, PolicyParams, make_policy, policy_act, train_diverse
from .transport import EmpiricalMeasure, occupancy_from_buffer, pairwise_w1, w1_exact, w1_sliced

__version__ = "0.1.0"
