"""RBF-linear Gaussian policies, CEM search and diversity training."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import ContractError, EnvSpec, TaskSpec, reset_states, simulate, task_reward_batch
from .transport import EmpiricalMeasure, systematic_resample, w1

POLICY_FORMAT = "udg-policy"
POLICY_VERSION = 1
STD_FLOOR = 1e-3


@dataclass
class PolicyParams:
    """Gaussian policy whose mean is a linear map of normalized Gaussian RBF features."""

    centers: np.ndarray
    bandwidth: float
    weights: np.ndarray
    log_std: np.ndarray
    id: int = 0
    action_bounds: tuple = ((-1.0, 1.0), (-1.0, 1.0))

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(len(self.centers), -1)
        self.log_std = np.asarray(self.log_std, dtype=float).reshape(-1)
        self.bandwidth = float(self.bandwidth)
        self.action_bounds = tuple(tuple(map(float, b)) for b in self.action_bounds)
        if not self.bandwidth > 0:
            raise ContractError("bandwidth must be positive")
        if self.log_std.shape[0] != self.weights.shape[1] or len(self.action_bounds) != self.weights.shape[1]:
            raise ContractError("action dimension mismatch")
        for arr in (self.centers, self.weights, self.log_std):
            if not np.all(np.isfinite(arr)):
                raise ContractError("non-finite policy parameters")

    @property
    def state_dim(self) -> int:
        return self.centers.shape[1]

    @property
    def action_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def noise_std(self) -> np.ndarray:
        return np.exp(self.log_std)

    @property
    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1).copy()

    def with_weights(self, flat: np.ndarray, id: int | None = None) -> "PolicyParams":
        return PolicyParams(self.centers, self.bandwidth, np.asarray(flat).reshape(self.weights.shape),
                            self.log_std, self.id if id is None else id, self.action_bounds)

    def features(self, states: np.ndarray) -> np.ndarray:
        return rbf_features(states, self.centers, self.bandwidth)

    def mean_actions(self, states: np.ndarray) -> np.ndarray:
        return self.features(states) @ self.weights


def rbf_features(states: np.ndarray, centers: np.ndarray, bandwidth: float) -> np.ndarray:
    d2 = np.sum((np.asarray(states)[..., None, :] - centers) ** 2, axis=-1)
    logits = -d2 / (2 * bandwidth**2)
    logits -= logits.max(axis=-1, keepdims=True)
    phi = np.exp(logits)
    return phi / phi.sum(axis=-1, keepdims=True)


def grid_centers(spec: EnvSpec, per_dim: int = 3) -> tuple[np.ndarray, float]:
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in spec.state_bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.reshape(-1) for m in mesh], axis=1)
    spacing = min((hi - lo) / max(per_dim - 1, 1) for lo, hi in spec.state_bounds)
    return centers, 0.5 * spacing


def make_policy(spec: EnvSpec, weights=None, *, id: int = 0, log_std: float = math.log(0.2),
                centers_per_dim: int = 3) -> PolicyParams:
    centers, bw = grid_centers(spec, centers_per_dim)
    if weights is None:
        weights = np.zeros((len(centers), spec.action_dim))
    return PolicyParams(centers, bw, np.asarray(weights, dtype=float).reshape(len(centers), spec.action_dim),
                        np.full(spec.action_dim, float(log_std)), id, spec.action_bounds)


def policy_act(p: PolicyParams, s, noise=None) -> np.ndarray:
    """Sample an action. ``noise`` is None (deterministic), an int seed, a Generator or an explicit eps."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != p.state_dim:
        raise ContractError("state dimension mismatch")
    mean = p.mean_actions(s)
    if noise is None:
        eps = np.zeros_like(mean)
    elif isinstance(noise, (int, np.integer)):
        eps = np.random.default_rng(int(noise)).standard_normal(mean.shape)
    elif isinstance(noise, np.random.Generator):
        eps = noise.standard_normal(mean.shape)
    else:
        eps = np.asarray(noise, dtype=float)
    lo = np.array([b[0] for b in p.action_bounds])
    hi = np.array([b[1] for b in p.action_bounds])
    return np.clip(mean + p.noise_std * eps, lo, hi)


class _Population:
    """A stack of weight vectors sharing one feature map, acting on (P, E, S) states."""

    def __init__(self, template: PolicyParams, thetas: np.ndarray):
        self.template = template
        self.W = thetas.reshape(len(thetas), *template.weights.shape)

    def mean_actions(self, states: np.ndarray) -> np.ndarray:
        phi = self.template.features(states)
        return np.einsum("pem,pma->pea", phi, self.W)


# ---------------------------------------------------------------------------
# configs and CEM


@dataclass
class CemConfig:
    population: int = 32
    elite_frac: float = 0.2
    iterations: int = 10
    init_std: float = 0.5
    eval_episodes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.population < 2:
            raise ContractError("population must be >= 2")
        if not 0.0 < self.elite_frac <= 1.0:
            raise ContractError("elite_frac must be in (0, 1]")
        if self.iterations < 0 or self.eval_episodes < 1:
            raise ContractError("invalid CEM budget")

    @property
    def n_elite(self) -> int:
        return max(1, math.ceil(self.elite_frac * self.population - 1e-9))


@dataclass
class DiversityConfig:
    n_policies: int = 8
    rounds: int = 3
    lam: float = 0.0
    distance_mode: str = "exact"
    projection: tuple = (0, 1)
    support_cap: int = 128
    init_scale: float = 0.5
    centers_per_dim: int = 3
    log_std: float = math.log(0.2)

    def __post_init__(self):
        if self.n_policies < 2:
            raise ContractError("diversity training needs K >= 2 policies")
        if not (math.isfinite(self.lam) or self.lam == math.inf) or self.lam < 0:
            raise ContractError("lambda must be >= 0 (inf allowed for the pure-task limit)")
        if self.distance_mode not in ("exact", "sliced"):
            raise ContractError(f"unknown distance mode {self.distance_mode!r}")
        self.projection = tuple(int(i) for i in self.projection)


def cem_update(mean: np.ndarray, std: np.ndarray, candidates: np.ndarray, scores: np.ndarray,
               elite_frac: float, min_std: float = STD_FLOOR) -> tuple[np.ndarray, np.ndarray]:
    """Refit mean/std to the top ceil(elite_frac * P) candidates.

    Ties in score keep the earlier candidate.
    """
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise ContractError("CEM scores must be finite")
    n_elite = max(1, math.ceil(elite_frac * len(scores) - 1e-9))
    order = np.argsort(-scores, kind="stable")[:n_elite]
    elites = np.asarray(candidates)[order]
    return elites.mean(axis=0), np.maximum(elites.std(axis=0), min_std)


@dataclass
class CemResult:
    best: np.ndarray
    best_score: float
    history: list = field(default_factory=list)
    mean: np.ndarray | None = None


def cem_optimize(objective: Callable[[np.ndarray], np.ndarray], init_mean: np.ndarray, cfg: CemConfig,
                 seed: int | None = None, init_std: float | None = None) -> CemResult:
    """Maximize ``objective`` (vectorized over candidate rows) by CEM.

    The initial mean is scored first and the best candidate seen is returned,
    so the result never scores below the starting point on the same objective.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    mean = np.asarray(init_mean, dtype=float).copy()
    std = np.full_like(mean, cfg.init_std if init_std is None else init_std)
    best = mean.copy()
    best_score = float(objective(mean[None])[0])
    history = [best_score]
    for _ in range(cfg.iterations):
        cands = mean + std * rng.standard_normal((cfg.population, mean.size))
        scores = np.asarray(objective(cands), dtype=float)
        k = int(np.argmax(scores))
        if scores[k] > best_score:
            best, best_score = cands[k].copy(), float(scores[k])
        mean, std = cem_update(mean, std, cands, scores, cfg.elite_frac)
        history.append(best_score)
    return CemResult(best, best_score, history, mean)


# ---------------------------------------------------------------------------
# diversity


def pseudo_reward(i: int, measures: Sequence[EmpiricalMeasure], mode: str = "exact",
                  distances: np.ndarray | None = None) -> float:
    """Distance from measure ``i`` to its nearest peer."""
    k = len(measures) if distances is None else len(distances)
    if k < 2:
        raise ContractError("pseudo reward needs at least two policies")
    if not 0 <= i < k:
        raise ContractError(f"policy index {i} out of range")
    if distances is not None:
        return float(min(distances[i][j] for j in range(k) if j != i))
    return float(min(w1(measures[j], measures[i], mode) for j in range(k) if j != i))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


class _Evaluator:
    """Common-random-number rollouts of many candidates plus their projected occupancies."""

    def __init__(self, spec: EnvSpec, template: PolicyParams, n_episodes: int, seed: int,
                 projection: Sequence[int], cap: int):
        self.spec, self.template = spec, template
        rng = np.random.default_rng(seed)
        self.starts = reset_states(spec, n_episodes, rng)
        self.eps = rng.standard_normal((spec.horizon, n_episodes, spec.action_dim))
        self.projection = list(projection)
        mass = np.tile(spec.gamma ** np.arange(spec.horizon, dtype=float), n_episodes)
        weights = mass / mass.sum()
        n = len(weights)
        self.idx = systematic_resample(weights, cap, rng) if n > cap else None
        self.weights = weights

    def run(self, thetas: np.ndarray):
        P = len(thetas)
        pop = _Population(self.template, thetas)
        starts = np.broadcast_to(self.starts, (P, *self.starts.shape))
        eps = np.broadcast_to(self.eps[:, None], (self.eps.shape[0], P, *self.eps.shape[1:]))
        S, A, S2 = simulate(pop.mean_actions, self.template.noise_std, self.spec, starts, eps)
        return S, A, S2

    def measures(self, S: np.ndarray) -> list[EmpiricalMeasure]:
        # S: (H, P, E, d) -> per-candidate, episode-major points
        out = []
        for p in range(S.shape[1]):
            pts = np.swapaxes(S[:, p], 0, 1).reshape(-1, S.shape[-1])[:, self.projection]
            if self.idx is not None:
                out.append(EmpiricalMeasure.uniform(pts[self.idx], "projected"))
            else:
                out.append(EmpiricalMeasure(pts, self.weights, "projected"))
        return out

    def returns(self, S: np.ndarray, S2: np.ndarray, task: TaskSpec) -> np.ndarray:
        r = task_reward_batch(S, S2, task, self.spec.dt)  # (H, P, E)
        disc = self.spec.gamma ** np.arange(self.spec.horizon, dtype=float)
        return np.einsum("hpe,h->p", r, disc) / S.shape[2]


def initial_ensemble(spec: EnvSpec, cfg: DiversityConfig, seed: int) -> list[PolicyParams]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(cfg.n_policies):
        p = make_policy(spec, id=i, log_std=cfg.log_std, centers_per_dim=cfg.centers_per_dim)
        out.append(p.with_weights(rng.normal(0.0, cfg.init_scale, p.flat.size)))
    return out


def ensemble_measures(policies: Sequence[PolicyParams], spec: EnvSpec, cfg: DiversityConfig,
                      n_episodes: int, seed: int) -> list[EmpiricalMeasure]:
    """Projected occupancies of each policy from seeded rollouts."""
    out = []
    for i, p in enumerate(policies):
        ev = _Evaluator(spec, p, n_episodes, _derive_seed(seed, i), cfg.projection, cfg.support_cap)
        S, _, _ = ev.run(p.flat[None])
        out.append(ev.measures(S)[0])
    return out


def min_pairwise(measures: Sequence[EmpiricalMeasure], mode: str = "exact") -> float:
    from .transport import pairwise_w1

    d = pairwise_w1(measures, mode)
    return float(d[~np.eye(len(d), dtype=bool)].min())


def train_diverse(spec: EnvSpec, cfg: DiversityConfig, cem: CemConfig, partial_task: TaskSpec | None = None,
                  callback: Callable[[int, list[PolicyParams]], None] | None = None) -> list[PolicyParams]:
    """Round-robin CEM on the nearest-peer W1 pseudo reward.

    Each round updates the policies one at a time against the current
    occupancies of the others; a policy's occupancy is refreshed right after
    its own update. With ``partial_task`` the score becomes
    ``lam * task_return + pseudo_reward`` (``lam = inf`` drops the pseudo reward).
    """
    policies = initial_ensemble(spec, cfg, cem.seed)
    if callback is not None:
        callback(0, list(policies))
    E = cem.eval_episodes
    for rnd in range(cfg.rounds):
        seed = _derive_seed(cem.seed, rnd, 7919)
        measures = ensemble_measures(policies, spec, cfg, E, seed)
        for i in range(cfg.n_policies):
            ev = _Evaluator(spec, policies[i], E, _derive_seed(seed, i), cfg.projection, cfg.support_cap)
            peers = [m for j, m in enumerate(measures) if j != i]

            def objective(thetas, ev=ev, peers=peers):
                S, _, S2 = ev.run(thetas)
                task_ret = ev.returns(S, S2, partial_task) if partial_task is not None else None
                if task_ret is not None and cfg.lam == math.inf:
                    return task_ret
                pseudo = np.array([min(w1(m, peer, cfg.distance_mode) for peer in peers) for m in ev.measures(S)])
                return pseudo if task_ret is None else cfg.lam * task_ret + pseudo

            res = cem_optimize(objective, policies[i].flat, cem, seed=_derive_seed(seed, i, 1))
            policies[i] = policies[i].with_weights(res.best)
            S, _, _ = ev.run(res.best[None])
            measures[i] = ev.measures(S)[0]
        if callback is not None:
            callback(rnd + 1, list(policies))
    return policies


def train_task_policy(spec: EnvSpec, task: TaskSpec, cem: CemConfig, *, id: int = 0,
                      log_std: float = math.log(0.2), centers_per_dim: int = 3,
                      init_scale: float = 0.5) -> PolicyParams:
    """Single policy trained on the true task return (the supervised baseline)."""
    p = make_policy(spec, id=id, log_std=log_std, centers_per_dim=centers_per_dim)
    p = p.with_weights(np.random.default_rng(cem.seed).normal(0.0, init_scale, p.flat.size))
    ev = _Evaluator(spec, p, cem.eval_episodes, _derive_seed(cem.seed, 1), (0,), 1)

    def objective(thetas):
        S, _, S2 = ev.run(thetas)
        return ev.returns(S, S2, task)

    res = cem_optimize(objective, p.flat, cem, seed=_derive_seed(cem.seed, 2))
    return p.with_weights(res.best)


# ---------------------------------------------------------------------------
# serialization


def policy_to_dict(p: PolicyParams) -> dict:
    return {
        "format": POLICY_FORMAT, "version": POLICY_VERSION, "id": int(p.id),
        "centers": p.centers.tolist(), "bandwidth": p.bandwidth, "weights": p.weights.tolist(),
        "log_std": p.log_std.tolist(), "action_bounds": [list(b) for b in p.action_bounds],
    }


def policy_from_dict(d: dict) -> PolicyParams:
    if d.get("format") != POLICY_FORMAT:
        raise ContractError("not a policy record")
    if d["version"] > POLICY_VERSION:
        raise ContractError(f"unsupported policy version {d['version']}")
    return PolicyParams(np.array(d["centers"]), d["bandwidth"], np.array(d["weights"]),
                        np.array(d["log_std"]), d["id"], tuple(tuple(b) for b in d["action_bounds"]))


def write_policies(policies: Sequence[PolicyParams], path) -> None:
    Path(path).write_text("\n".join(json.dumps(policy_to_dict(p), sort_keys=True) for p in policies) + "\n")


def read_policies(path) -> list[PolicyParams]:
    return [policy_from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
