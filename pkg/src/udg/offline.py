"""Offline policy search in the penalized episodic model, plus exact grid planners."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, identity
from scipy.sparse.linalg import spsolve

from .core import (Buffer, ContractError, EnvSpec, TaskSpec, check_compatible, env_step, episode_returns, rollout,
                   task_reward_batch)
from .model import EpisodicModel
from .policy import CemConfig, PolicyParams, _derive_seed, cem_optimize, make_policy


@dataclass
class OfflineConfig:
    rollout_k: int = 10
    n_start_states: int = 64
    gamma: float = 0.99
    cem: CemConfig = field(default_factory=lambda: CemConfig(population=32, iterations=15, init_std=0.7))
    centers_per_dim: int = 3
    policy_log_std: float = math.log(0.05)
    # start the CEM mean at a ridge fit of buffer actions on the policy features
    bc_init: bool = True
    bc_ridge: float = 1e-3

    def __post_init__(self):
        if self.rollout_k < 1:
            raise ContractError("rollout_k must be >= 1")
        if self.n_start_states < 1:
            raise ContractError("n_start_states must be >= 1")


# ---------------------------------------------------------------------------
# evaluation in the true environment


def evaluate_policy(p, spec: EnvSpec, task: TaskSpec, n_episodes: int = 5, seed: int = 0) -> tuple[float, float]:
    """Monte-Carlo discounted return (mean, std over episodes) in the true environment."""
    buf = rollout(p, spec, task, n_episodes, seed)
    rets = episode_returns(buf, spec.gamma)
    return float(rets.mean()), float(rets.std())


# ---------------------------------------------------------------------------
# model rollouts


def model_rollout(model: EpisodicModel, policy: PolicyParams, starts: np.ndarray, k: int, task: TaskSpec,
                  spec: EnvSpec):
    """Deterministic k-step rollouts in the model. Returns (penalized returns, u per step, visited states)."""
    s = np.asarray(starts, dtype=float)
    ret = np.zeros(len(s))
    us, visited = [], [s]
    for t in range(k):
        a = np.clip(policy.mean_actions(s), spec.a_lo, spec.a_hi)
        s, _, u, r_pen, _ = model.query_batch(s, a, task)
        ret += model.gamma**t * r_pen
        us.append(u)
        visited.append(s)
    return ret, np.stack(us), np.stack(visited)


def env_k_step_return(policy, starts: np.ndarray, k: int, task: TaskSpec, spec: EnvSpec) -> np.ndarray:
    """Noise-free k-step discounted return in the true environment, per start state."""
    s = np.asarray(starts, dtype=float)
    ret = np.zeros(len(s))
    for t in range(k):
        s2 = env_step(s, policy.mean_actions(s), spec)
        ret += spec.gamma**t * task_reward_batch(s, s2, task, spec.dt)
        s = s2
    return ret


def lower_bound_slack(model: EpisodicModel, policy, starts: np.ndarray, k: int, task: TaskSpec,
                      spec: EnvSpec) -> float:
    """Mean of (true k-step return - penalized model return) from the same starts."""
    pen, _, _ = model_rollout(model, policy, starts, k, task, spec)
    return float(np.mean(env_k_step_return(policy, starts, k, task, spec) - pen))


def start_states(buf: Buffer, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return buf.s[rng.integers(0, len(buf), size=n)]


def behavior_cloning_fit(template: PolicyParams, buf: Buffer, ridge: float = 1e-3) -> np.ndarray:
    """Least-squares weights mapping the template's features to the buffer's actions."""
    phi = template.features(buf.s)
    gram = phi.T @ phi + ridge * len(buf) * np.eye(phi.shape[1])
    return np.linalg.solve(gram, phi.T @ buf.a).reshape(-1)


def mopo_lite_train(model: EpisodicModel, buf: Buffer, task: TaskSpec, cfg: OfflineConfig | None = None,
                    spec: EnvSpec | None = None, id: int = 0) -> PolicyParams:
    """CEM on the mean penalized k-step model return from buffer start states.

    Truncated rollouts bootstrap with 0. Only model data is used.
    """
    cfg = cfg or OfflineConfig()
    spec = spec or EnvSpec()
    if not len(buf):
        raise ContractError("offline training needs a nonempty buffer")
    check_compatible(buf, spec)
    template = make_policy(spec, id=id, log_std=cfg.policy_log_std, centers_per_dim=cfg.centers_per_dim)
    starts = start_states(buf, cfg.n_start_states, cfg.cem.seed)
    P = cfg.cem.population
    tiled = np.tile(starts, (P, 1))
    feats_shape = template.weights.shape

    def objective(thetas):
        n = len(thetas)
        W = thetas.reshape(n, *feats_shape)
        s = tiled[: n * len(starts)]
        ret = np.zeros(len(s))
        for t in range(cfg.rollout_k):
            phi = template.features(s).reshape(n, len(starts), -1)
            a = np.einsum("pnm,pma->pna", phi, W).reshape(len(s), -1)
            a = np.clip(a, spec.a_lo, spec.a_hi)
            s, _, _, r_pen, _ = model.query_batch(s, a, task)
            ret += model.gamma**t * r_pen
        return ret.reshape(n, len(starts)).mean(axis=1)

    init = behavior_cloning_fit(template, buf, cfg.bc_ridge) if cfg.bc_init else template.flat
    res = cem_optimize(objective, init, cfg.cem, seed=_derive_seed(cfg.cem.seed, 11))
    return template.with_weights(res.best)


# ---------------------------------------------------------------------------
# grid planner


def king_actions(spec: EnvSpec) -> np.ndarray:
    """All {lo, 0, hi}^d combinations except the zero action (8 moves in 2-D)."""
    mid = (spec.a_lo + spec.a_hi) / 2
    choices = [(lo, m, hi) for lo, m, hi in zip(spec.a_lo, mid, spec.a_hi)]
    acts = [np.array(c) for c in itertools.product(*choices)]
    return np.array([a for a in acts if not np.allclose(a, mid)])


@dataclass
class GridPlanner:
    grid_resolution: int = 51
    action_set: np.ndarray | None = None
    tolerance: float = 1e-6
    max_iterations: int = 100_000
    values: np.ndarray | None = None
    residual: float = math.inf
    iterations: int = 0


class _Grid:
    def __init__(self, spec: EnvSpec, n: int):
        self.axes = [np.linspace(lo, hi, n) for lo, hi in spec.state_bounds]
        self.n, self.d = n, spec.state_dim
        self.lo, self.hi = spec.s_lo, spec.s_hi
        self.h = (self.hi - self.lo) / (n - 1)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.stack([m.reshape(-1) for m in mesh], axis=1)
        self.strides = np.array([n ** (self.d - 1 - i) for i in range(self.d)])

    def interp_weights(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Flat corner indices and multilinear weights, each (N, 2**d)."""
        f = (np.clip(x, self.lo, self.hi) - self.lo) / self.h
        i0 = np.clip(np.floor(f).astype(int), 0, self.n - 2)
        frac = f - i0
        idx, wts = [], []
        for corner in itertools.product((0, 1), repeat=self.d):
            c = np.array(corner)
            idx.append((i0 + c) @ self.strides)
            wts.append(np.prod(np.where(c == 1, frac, 1 - frac), axis=1))
        return np.stack(idx, axis=1), np.stack(wts, axis=1)

    def interpolate(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        idx, w = self.interp_weights(x)
        return np.sum(values[idx] * w, axis=1)


def _reward(s, s2, task: TaskSpec | None, dt: float) -> np.ndarray:
    if task is None:
        return np.zeros(len(s))
    return task_reward_batch(s, s2, task, dt)


def _backup_tables(spec: EnvSpec, task: TaskSpec | None, grid: _Grid, actions: np.ndarray):
    R, IDX, W = [], [], []
    for a in actions:
        s2 = np.clip(grid.points + spec.dt * a, spec.s_lo, spec.s_hi)
        R.append(_reward(grid.points, s2, task, spec.dt))
        idx, w = grid.interp_weights(s2)
        IDX.append(idx)
        W.append(w)
    return np.stack(R, 1), np.stack(IDX, 1), np.stack(W, 1)  # (G, A), (G, A, C), (G, A, C)


def _q_values(V, R, IDX, W, gamma):
    return R + gamma * np.sum(V[IDX] * W, axis=2)


class GridPolicy:
    """Greedy one-step lookahead on an interpolated value table."""

    def __init__(self, spec: EnvSpec, task: TaskSpec, grid: _Grid, values: np.ndarray, actions: np.ndarray,
                 greedy: np.ndarray, std: float = 0.0, id: int = -1):
        self.spec, self.task, self.grid = spec, task, grid
        self.values, self.actions, self.greedy = values, actions, greedy
        self.id = id
        self._std = np.full(spec.action_dim, float(std))

    @property
    def noise_std(self) -> np.ndarray:
        return self._std

    def with_noise(self, std: float, id: int | None = None) -> "GridPolicy":
        return GridPolicy(self.spec, self.task, self.grid, self.values, self.actions, self.greedy, std,
                          self.id if id is None else id)

    def mean_actions(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        flat = states.reshape(-1, self.spec.state_dim)
        q = np.empty((len(flat), len(self.actions)))
        for j, a in enumerate(self.actions):
            s2 = np.clip(flat + self.spec.dt * a, self.spec.s_lo, self.spec.s_hi)
            q[:, j] = _reward(flat, s2, self.task, self.spec.dt) + self.spec.gamma * self.grid.interpolate(self.values, s2)
        return self.actions[np.argmax(q, axis=1)].reshape(*states.shape[:-1], self.spec.action_dim)


def grid_value_iteration(spec: EnvSpec, task: TaskSpec | None, planner: GridPlanner | None = None):
    """Value iteration on the multilinear-interpolated grid MDP.

    Returns the value table (flattened over the grid, C order) and the greedy
    policy. ``task=None`` plans for the zero reward.
    """
    planner = planner or GridPlanner()
    if spec.state_dim > 3:
        raise ContractError("grid planning is limited to state_dim <= 3")
    grid = _Grid(spec, planner.grid_resolution)
    actions = king_actions(spec) if planner.action_set is None else np.asarray(planner.action_set, dtype=float)
    R, IDX, W = _backup_tables(spec, task, grid, actions)
    V = np.zeros(len(grid.points))
    residual = math.inf
    it = 0
    while residual >= planner.tolerance and it < planner.max_iterations:
        V_new = _q_values(V, R, IDX, W, spec.gamma).max(axis=1)
        residual = float(np.max(np.abs(V_new - V)))
        V = V_new
        it += 1
    # residual of the returned table, from one extra sweep
    Q = _q_values(V, R, IDX, W, spec.gamma)
    planner.residual = float(np.max(np.abs(Q.max(axis=1) - V)))
    planner.values, planner.iterations = V, it
    greedy = np.argmax(Q, axis=1)
    return V, GridPolicy(spec, task, grid, V, actions, greedy)


def bellman_residuals(spec: EnvSpec, task: TaskSpec, policy: GridPolicy) -> np.ndarray:
    R, IDX, W = _backup_tables(spec, task, policy.grid, policy.actions)
    return np.abs(_q_values(policy.values, R, IDX, W, spec.gamma).max(axis=1) - policy.values)


def improvement_changes(spec: EnvSpec, task: TaskSpec, policy: GridPolicy, tol: float = 1e-8) -> int:
    """Cells whose greedy action is strictly beaten after exact evaluation of the greedy policy."""
    R, IDX, W = _backup_tables(spec, task, policy.grid, policy.actions)
    G = len(policy.values)
    rows = np.repeat(np.arange(G), IDX.shape[2])
    sel = policy.greedy
    P = csr_matrix((W[np.arange(G), sel].reshape(-1), (rows, IDX[np.arange(G), sel].reshape(-1))), shape=(G, G))
    V_pi = spsolve((identity(G, format="csr") - spec.gamma * P).tocsc(), R[np.arange(G), sel])
    Q = _q_values(V_pi, R, IDX, W, spec.gamma)
    return int(np.sum(Q.max(axis=1) > Q[np.arange(G), sel] + tol))
