"""Flat ``key = value`` run configuration (TOML syntax).

Recognized keys, all optional::

    seed = 0
    tasks = ["angle:0", "angle:60", ...]     # task strings, see TaskSpec.parse
    # environment
    dt = 0.1
    horizon = 100
    gamma = 0.99
    lipschitz_r = 5.0
    init_noise = 0.1
    # diversity training
    n_policies = 8
    rounds = 3
    lam = 0.0
    partial_task = "jump:0"                  # generation-time reward, omit for none
    distance_mode = "exact"                  # or "sliced"
    support_cap = 128
    # CEM used for diversity and supervised training
    cem_population = 32
    cem_elite_frac = 0.2
    cem_iterations = 10
    cem_init_std = 0.5
    cem_eval_episodes = 2
    # data and offline stage
    buffer_episodes = 20
    eval_episodes = 5
    kappa = 5.0                              # default lipschitz_r * lipschitz_T
    rollout_k = 10
    n_start_states = 64
    offline_population = 32
    offline_iterations = 15
    supervised_angle = 0.0
"""

from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

from .core import ContractError, EnvSpec, TaskSpec
from .offline import OfflineConfig
from .pipeline import ANGLE_SUITE, UDGConfig
from .policy import CemConfig, DiversityConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

KNOWN_KEYS = {
    "seed", "tasks", "dt", "horizon", "gamma", "lipschitz_r", "init_noise", "n_policies", "rounds", "lam",
    "partial_task", "distance_mode", "support_cap", "cem_population", "cem_elite_frac", "cem_iterations",
    "cem_init_std", "cem_eval_episodes", "buffer_episodes", "eval_episodes", "kappa", "rollout_k",
    "n_start_states", "offline_population", "offline_iterations", "supervised_angle",
}


def load_config(path=None, seed: int | None = None) -> tuple[UDGConfig, dict]:
    """Build a UDGConfig from a config file; ``seed`` overrides the file's seed."""
    raw = {}
    if path is not None:
        raw = tomllib.loads(Path(path).read_text())
    unknown = set(raw) - KNOWN_KEYS
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    if seed is not None:
        raw["seed"] = seed
    return build_config(raw), raw


def build_config(raw: dict) -> UDGConfig:
    s = int(raw.get("seed", 0))
    spec = EnvSpec(
        dt=float(raw.get("dt", 0.1)), horizon=int(raw.get("horizon", 100)), gamma=float(raw.get("gamma", 0.99)),
        lipschitz_r=float(raw.get("lipschitz_r", 5.0)), init_noise=float(raw.get("init_noise", 0.1)),
    )
    cem = CemConfig(
        population=int(raw.get("cem_population", 32)), elite_frac=float(raw.get("cem_elite_frac", 0.2)),
        iterations=int(raw.get("cem_iterations", 10)), init_std=float(raw.get("cem_init_std", 0.5)),
        eval_episodes=int(raw.get("cem_eval_episodes", 2)), seed=s,
    )
    div = DiversityConfig(
        n_policies=int(raw.get("n_policies", 8)), rounds=int(raw.get("rounds", 3)), lam=float(raw.get("lam", 0.0)),
        distance_mode=raw.get("distance_mode", "exact"), support_cap=int(raw.get("support_cap", 128)),
    )
    base = OfflineConfig()
    offline = replace(
        base, rollout_k=int(raw.get("rollout_k", base.rollout_k)),
        n_start_states=int(raw.get("n_start_states", base.n_start_states)), gamma=spec.gamma,
        cem=replace(base.cem, population=int(raw.get("offline_population", base.cem.population)),
                    iterations=int(raw.get("offline_iterations", base.cem.iterations)), seed=s),
    )
    kappa = raw.get("kappa")
    return UDGConfig(spec=spec, diversity=div, cem=cem, offline=offline,
                     buffer_episodes=int(raw.get("buffer_episodes", 20)), eval_episodes=int(raw.get("eval_episodes", 5)),
                     seed=s, kappa=None if kappa is None else float(kappa))


def config_tasks(raw: dict) -> list[TaskSpec]:
    if "tasks" in raw:
        return [TaskSpec.parse(t) for t in raw["tasks"]]
    return [TaskSpec.angle(a) for a in ANGLE_SUITE]


def partial_task(raw: dict) -> TaskSpec | None:
    return TaskSpec.parse(raw["partial_task"]) if raw.get("partial_task") else None
