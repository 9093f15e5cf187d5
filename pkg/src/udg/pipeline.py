"""UDG orchestration: generate, relabel, select, train offline; plus the bound checks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import spearmanr

from .core import Buffer, ContractError, EnvSpec, TaskSpec, average_return, relabel_buffer, reset_states, rollout
from .model import model_build
from .offline import (GridPlanner, GridPolicy, OfflineConfig, evaluate_policy, grid_value_iteration,
                      model_rollout, mopo_lite_train, start_states)
from .policy import CemConfig, DiversityConfig, PolicyParams, _derive_seed, train_diverse
from .transport import EmpiricalMeasure, occupancy_from_buffer, pairwise_w1, w1_exact

ANGLE_SUITE = (0.0, 60.0, 120.0, 180.0, 240.0, 300.0)


# ---------------------------------------------------------------------------
# buffers


def generate_buffers(policies: Sequence, spec: EnvSpec, n_episodes: int, seed: int, reward=None) -> list[Buffer]:
    """One buffer per policy; each policy gets its own derived seed."""
    return [rollout(p, spec, reward, n_episodes, _derive_seed(seed, i)) for i, p in enumerate(policies)]


def select_buffer(buffers: Sequence[Buffer], task: TaskSpec, gamma: float) -> tuple[int, list[float]]:
    """Relabel every buffer with ``task`` and pick the highest average return (first on ties)."""
    if not buffers:
        raise ContractError("select_buffer needs at least one buffer")
    scores = [average_return(relabel_buffer(b, task), gamma) for b in buffers]
    return int(np.argmax(scores)), scores


def mix_buffers(buffers: Sequence[Buffer], ids: Sequence[int]) -> Buffer:
    """Concatenate the chosen buffers, keeping episode boundaries and policy ids."""
    if not ids:
        raise ContractError("mix_buffers needs at least one id")
    parts = [buffers[i] for i in ids]
    first = parts[0]
    for b in parts[1:]:
        if b.env_id != first.env_id or b.dt != first.dt or b.s.shape[1] != first.s.shape[1]:
            raise ContractError("cannot mix buffers from different environments")
    if len(parts) == 1:
        return first.copy()
    offsets = np.cumsum([0] + [len(b) for b in parts[:-1]])
    starts = [int(o + s) for o, b in zip(offsets, parts) for s in b.episode_starts]
    pids = sorted({int(p) for b in parts for p in b.policy_id})
    return Buffer(
        env_id=first.env_id, dt=first.dt,
        s=np.concatenate([b.s for b in parts]), a=np.concatenate([b.a for b in parts]),
        r=np.concatenate([b.r for b in parts]), s2=np.concatenate([b.s2 for b in parts]),
        t=np.concatenate([b.t for b in parts]), done=np.concatenate([b.done for b in parts]),
        policy_id=np.concatenate([b.policy_id for b in parts]), episode_starts=starts,
        metadata={"mixed_from": [int(i) for i in ids], "policy_ids": pids,
                  "reward": first.metadata.get("reward", "none")},
    )


# ---------------------------------------------------------------------------
# the UDG loop


@dataclass
class UDGConfig:
    spec: EnvSpec = field(default_factory=EnvSpec)
    diversity: DiversityConfig = field(default_factory=DiversityConfig)
    cem: CemConfig = field(default_factory=CemConfig)
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    buffer_episodes: int = 20
    eval_episodes: int = 5
    seed: int = 0
    # None -> lipschitz_r * lipschitz_T of the spec
    kappa: float | None = None


@dataclass
class TaskResult:
    task: str
    selected: int
    scores: list
    offline_return: float
    offline_std: float
    policy: PolicyParams | None = None

    def to_dict(self) -> dict:
        return {"task": self.task, "selected": self.selected, "scores": [float(s) for s in self.scores],
                "offline_return": self.offline_return, "offline_std": self.offline_std}


def offline_train_and_eval(buf: Buffer, task: TaskSpec, cfg: UDGConfig, id: int = 0):
    relabeled = relabel_buffer(buf, task)
    model = model_build(relabeled, cfg.kappa, gamma=cfg.offline.gamma, spec=cfg.spec)
    pi_hat = mopo_lite_train(model, relabeled, task, cfg.offline, cfg.spec, id=id)
    mean, std = evaluate_policy(pi_hat, cfg.spec, task, cfg.eval_episodes, _derive_seed(cfg.seed, 99))
    return pi_hat, mean, std, model


def run_udg(cfg: UDGConfig, tasks: Sequence[TaskSpec], policies: Sequence[PolicyParams] | None = None,
            buffers: Sequence[Buffer] | None = None) -> tuple[list[TaskResult], list[PolicyParams], list[Buffer]]:
    """Steps 1-6 for every task against one shared set of generated buffers."""
    if policies is None and buffers is None:
        if not tasks:
            return [], [], []
        policies = train_diverse(cfg.spec, cfg.diversity, cfg.cem)
    if buffers is None:
        buffers = generate_buffers(policies, cfg.spec, cfg.buffer_episodes, _derive_seed(cfg.seed, 1))
    results = []
    for task in tasks:
        k, scores = select_buffer(buffers, task, cfg.spec.gamma)
        pi_hat, mean, std, _ = offline_train_and_eval(buffers[k], task, cfg)
        results.append(TaskResult(task.label(), k, scores, mean, std, pi_hat))
    return results, list(policies or []), list(buffers)


def mixing_experiment(buffers: Sequence[Buffer], tasks: Sequence[TaskSpec], cfg: UDGConfig) -> list[dict]:
    """Offline returns on top-1, top-2-mixed and all-mixed data for each task."""
    rows = []
    for task in tasks:
        _, scores = select_buffer(buffers, task, cfg.spec.gamma)
        order = [int(i) for i in np.argsort(-np.asarray(scores), kind="stable")]
        row = {"task": task.label(), "ranking": order}
        for name, ids in (("top1", order[:1]), ("top2_mixed", order[:2]), ("all_mixed", order)):
            _, mean, std, _ = offline_train_and_eval(mix_buffers(buffers, ids), task, cfg)
            row[name] = mean
            row[name + "_std"] = std
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# telescoping identity on finite MDPs


def random_mdp_pair(n_states: int, n_actions: int, rng: np.random.Generator, gamma: float | None = None):
    def kernel():
        P = rng.gamma(1.0, size=(n_states, n_actions, n_states))
        return P / P.sum(axis=2, keepdims=True)

    pi = rng.gamma(1.0, size=(n_states, n_actions))
    p0 = rng.gamma(1.0, size=n_states)
    return dict(P=kernel(), P_hat=kernel(), r=rng.normal(size=(n_states, n_actions)),
                pi=pi / pi.sum(axis=1, keepdims=True), p0=p0 / p0.sum(),
                gamma=float(rng.uniform(0.0, 0.99) if gamma is None else gamma))


def _finite_eval(P, r, pi, p0, gamma):
    n = len(p0)
    P_pi = np.einsum("sa,sat->st", pi, P)
    r_pi = np.sum(pi * r, axis=1)
    V = np.linalg.solve(np.eye(n) - gamma * P_pi, r_pi)
    d = (1 - gamma) * np.linalg.solve((np.eye(n) - gamma * P_pi).T, p0)
    return float(p0 @ V), V, d[:, None] * pi


def verify_telescoping(P, P_hat, r, pi, p0, gamma: float) -> float:
    """|eta_hat - eta - c*gamma*E_{rho_hat}[G]| for a finite MDP pair sharing reward r."""
    arrays = [np.asarray(x, dtype=float) for x in (P, P_hat, r, pi, p0)]
    if any(not np.all(np.isfinite(x)) for x in arrays) or not 0 <= gamma < 1:
        raise ContractError("MDP must be finite with gamma in [0, 1)")
    P, P_hat, r, pi, p0 = arrays
    if P.shape[0] > 100:
        raise ContractError("verify_telescoping is meant for at most 100 states")
    eta, V, _ = _finite_eval(P, r, pi, p0, gamma)
    eta_hat, _, rho_hat = _finite_eval(P_hat, r, pi, p0, gamma)
    G = P_hat @ V - P @ V
    rhs = gamma / (1 - gamma) * float(np.sum(rho_hat * G))
    return abs((eta_hat - eta) - rhs)


# ---------------------------------------------------------------------------
# gap bound and regret


_ORACLES: dict = {}


def oracle_policy(spec: EnvSpec, task: TaskSpec, planner: GridPlanner | None = None) -> GridPolicy:
    planner = planner or GridPlanner()
    key = (spec, task, planner.grid_resolution, planner.tolerance,
           None if planner.action_set is None else np.asarray(planner.action_set).tobytes())
    if key not in _ORACLES:
        _ORACLES[key] = grid_value_iteration(spec, task, planner)[1]
    return _ORACLES[key]


def optimal_occupancy(spec: EnvSpec, task: TaskSpec, planner: GridPlanner | None = None, n_rollouts: int = 50,
                      seed: int = 0, projection=(0, 1), cap: int | None = 2000) -> tuple[EmpiricalMeasure, float]:
    """Occupancy of the planner's greedy policy and a sampling-noise floor (W1 between two halves)."""
    pi_star = oracle_policy(spec, task, planner)
    buf = rollout(pi_star, spec, task, n_rollouts, seed)
    rho = occupancy_from_buffer(buf, spec.gamma, projection, cap=cap, seed=seed)
    half = max(1, n_rollouts // 2)
    a = rollout(pi_star, spec, task, half, _derive_seed(seed, 1))
    b = rollout(pi_star, spec, task, half, _derive_seed(seed, 2))
    floor = w1_exact(occupancy_from_buffer(a, spec.gamma, projection, cap=cap),
                     occupancy_from_buffer(b, spec.gamma, projection, cap=cap))[0]
    return rho, floor


def support_diameter(points: np.ndarray, max_points: int = 1000) -> float:
    """Largest pairwise distance within (an evenly strided subsample of) the support."""
    if len(points) > max_points:
        points = points[np.linspace(0, len(points) - 1, max_points).astype(int)]
    return float(pdist(points).max()) if len(points) > 1 else 0.0


@dataclass
class GapRow:
    buffer_id: int
    w1_to_optimal: float
    offline_return: float
    optimal_return: float
    gap: float
    epsilon_u: float
    support_diameter: float
    d1_model: float
    behavior_return: float


@dataclass
class GapReport:
    task: str
    rows: list[GapRow]
    C: float
    c: float
    spearman: float
    fitted_C: float
    noise_floor: float

    def to_dict(self) -> dict:
        return {"task": self.task, "rows": [asdict(r) for r in self.rows], "C": self.C, "c": self.c,
                "spearman": self.spearman, "fitted_C": self.fitted_C, "noise_floor": self.noise_floor}


def verify_gap_bound(buffers: Sequence[Buffer], task: TaskSpec, cfg: UDGConfig, planner: GridPlanner | None = None,
                     behaviors: Sequence | None = None, projection=(0, 1), cap: int = 1000) -> GapReport:
    """Train offline on every buffer and relate the return gap to W1(buffer, optimal)."""
    spec = cfg.spec
    pi_star = oracle_policy(spec, task, planner)
    opt_ret, _ = evaluate_policy(pi_star, spec, task, cfg.eval_episodes, _derive_seed(cfg.seed, 99))
    rho_star, floor = optimal_occupancy(spec, task, planner, 50, _derive_seed(cfg.seed, 5), projection, cap)
    c = spec.discount_mass
    starts_p0 = reset_states(spec, 20, np.random.default_rng(_derive_seed(cfg.seed, 6)))
    rows = []
    for i, buf in enumerate(buffers):
        rho_b = occupancy_from_buffer(buf, spec.gamma, projection, cap=cap, seed=i)
        d2 = w1_exact(rho_b, rho_star)[0]
        pi_hat, ret, _, model = offline_train_and_eval(buf, task, cfg, id=i)
        starts = start_states(buf, cfg.offline.n_start_states, cfg.offline.cem.seed)
        _, us, _ = model_rollout(model, pi_hat, starts, cfg.offline.rollout_k, task, spec)
        disc = spec.gamma ** np.arange(len(us))
        eps_u = c * float(np.sum(disc[:, None] * us) / (disc.sum() * us.shape[1]))
        # pi* rolled inside the model, for the D1 ~ D2 comparison
        _, _, visited = model_rollout(model, pi_star, starts_p0, spec.horizon - 1, task, spec)
        mass = np.repeat(spec.gamma ** np.arange(visited.shape[0]), visited.shape[1])
        rho_model = EmpiricalMeasure.from_unnormalized(visited.reshape(-1, spec.state_dim)[:, list(projection)],
                                                       mass, "projected")
        d1 = w1_exact(rho_model, rho_star)[0]
        beh = float("nan")
        if behaviors is not None:
            beh = evaluate_policy(behaviors[i], spec, task, cfg.eval_episodes, _derive_seed(cfg.seed, 98))[0]
        rows.append(GapRow(i, d2, ret, opt_ret, opt_ret - ret, eps_u,
                           support_diameter(buf.s[:, list(projection)]), d1, beh))
    d2s = np.array([r.w1_to_optimal for r in rows])
    gaps = np.array([r.gap for r in rows])
    rets = np.array([r.offline_return for r in rows])
    rho = float(spearmanr(d2s, rets)[0]) if len(rows) > 2 else float("nan")
    fitted = float(d2s @ gaps / (d2s @ d2s)) if np.any(d2s > 0) else float("nan")
    C = 2 * c * spec.gamma * spec.lipschitz_r * spec.lipschitz_T
    return GapReport(task.label(), rows, C, c, rho, fitted, floor)


@dataclass
class RegretRow:
    task: str
    best_buffer_id: int
    regret: float
    distances: list


@dataclass
class RegretReport:
    rows: list[RegretRow]
    worst_case_regret: float
    surrogate: float | None
    noise_floor: float

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "worst_case_regret": self.worst_case_regret,
                "surrogate": self.surrogate, "noise_floor": self.noise_floor,
                "note": "max over a finite task grid: a lower bound on the worst-case regret"}


def regret_report(measures: Sequence[EmpiricalMeasure], tasks: Sequence[TaskSpec], spec: EnvSpec,
                  planner: GridPlanner | None = None, seed: int = 0, projection=(0, 1), cap: int = 1000) -> RegretReport:
    """Per task, the W1 from the closest ensemble member to the planner's optimal occupancy."""
    if not measures:
        raise ContractError("regret needs at least one measure")
    rows, floors = [], []
    for task in tasks:
        rho_star, floor = optimal_occupancy(spec, task, planner, 50, seed, projection, cap)
        d = [w1_exact(m, rho_star)[0] for m in measures]
        k = int(np.argmin(d))
        rows.append(RegretRow(task.label(), k, float(d[k]), [float(x) for x in d]))
        floors.append(floor)
    surrogate = None
    if len(measures) >= 2:
        D = pairwise_w1(measures)
        surrogate = float(D[~np.eye(len(D), dtype=bool)].min())
    worst = max((r.regret for r in rows), default=0.0)
    return RegretReport(rows, worst, surrogate, max(floors, default=0.0))


def buffer_measures(buffers: Sequence[Buffer], spec: EnvSpec, projection=(0, 1), cap: int = 1000) -> list[EmpiricalMeasure]:
    return [occupancy_from_buffer(b, spec.gamma, projection, cap=cap, seed=i) for i, b in enumerate(buffers)]
