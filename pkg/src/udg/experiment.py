"""End-to-end run: diversity training through every verification report, written to a directory."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .core import TaskSpec, rollout, write_buffer
from .offline import GridPlanner, bellman_residuals, evaluate_policy, improvement_changes
from .pipeline import (UDGConfig, buffer_measures, generate_buffers, mixing_experiment, offline_train_and_eval,
                       oracle_policy, random_mdp_pair, regret_report, run_udg, verify_gap_bound, verify_telescoping)
from .policy import _derive_seed, ensemble_measures, min_pairwise, train_diverse, train_task_policy, write_policies

log = logging.getLogger(__name__)

ORACLE_NOISE = 0.3


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def lemma_check(n_mdps: int = 50, seed: int = 0, max_states: int = 100) -> dict:
    rng = np.random.default_rng(seed)
    residuals = []
    for _ in range(n_mdps):
        mdp = random_mdp_pair(int(rng.integers(2, max_states + 1)), int(rng.integers(1, 5)), rng)
        residuals.append(verify_telescoping(**mdp))
    return {"n_mdps": n_mdps, "max_residual": float(max(residuals)), "residuals": residuals}


def planner_check(cfg: UDGConfig, task: TaskSpec, planner: GridPlanner | None = None) -> dict:
    pi = oracle_policy(cfg.spec, task, planner)
    return {"task": task.label(), "max_bellman_residual": float(bellman_residuals(cfg.spec, task, pi).max()),
            "improvement_changes": improvement_changes(cfg.spec, task, pi)}


def oracle_buffer_check(cfg: UDGConfig, task: TaskSpec) -> dict:
    """Offline training on data from the planner's policy against the planner's own return."""
    pi_star = oracle_policy(cfg.spec, task)
    opt, _ = evaluate_policy(pi_star, cfg.spec, task, cfg.eval_episodes, _derive_seed(cfg.seed, 99))
    buf = rollout(pi_star.with_noise(ORACLE_NOISE, id=-1), cfg.spec, task, cfg.buffer_episodes,
                  _derive_seed(cfg.seed, 3))
    _, ret, _, _ = offline_train_and_eval(buf, task, cfg)
    return {"task": task.label(), "optimal_return": opt, "offline_return": ret, "fraction": ret / opt}


def improvement_rows(buffers, behaviors, tasks: list[TaskSpec], cfg: UDGConfig) -> list[dict]:
    """Offline policy trained on each behaviour policy's own buffer vs that behaviour policy."""
    rows = []
    for task in tasks:
        for i, (buf, beh) in enumerate(zip(buffers, behaviors)):
            _, ret, _, _ = offline_train_and_eval(buf, task, cfg, id=i)
            beh_ret, _ = evaluate_policy(beh, cfg.spec, task, cfg.eval_episodes, _derive_seed(cfg.seed, 98))
            rows.append({"task": task.label(), "buffer_id": i, "offline_return": ret, "behavior_return": beh_ret,
                         "margin": ret - (beh_ret - 0.05 * abs(beh_ret))})
    return rows


def run_all(cfg: UDGConfig, tasks: list[TaskSpec], out: Path, partial=None, supervised_angle: float = 0.0) -> dict:
    out = Path(out)
    (out / "buffers").mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()

    def mark(name):
        timings[name] = time.perf_counter() - t0
        log.info("%s done after %.1fs", name, timings[name])

    held_out_seed = _derive_seed(cfg.seed, 4242)
    history = []

    def on_round(rnd, policies):
        ms = ensemble_measures(policies, cfg.spec, cfg.diversity, cfg.cem.eval_episodes + 2, held_out_seed)
        history.append(min_pairwise(ms, cfg.diversity.distance_mode))

    policies = train_diverse(cfg.spec, cfg.diversity, cfg.cem, partial, callback=on_round)
    write_policies(policies, out / "policies_diverse.jsonl")
    mark("train_diverse")

    buffers = generate_buffers(policies, cfg.spec, cfg.buffer_episodes, _derive_seed(cfg.seed, 1), partial)
    for i, b in enumerate(buffers):
        write_buffer(b, out / "buffers" / f"diverse_{i:02d}.jsonl")
    sup_task = TaskSpec.angle(supervised_angle)
    supervised = train_task_policy(cfg.spec, sup_task, cfg.cem, id=len(policies))
    write_policies([supervised], out / "policy_supervised.jsonl")
    sup_buf = generate_buffers([supervised], cfg.spec, cfg.buffer_episodes, _derive_seed(cfg.seed, 2), sup_task)[0]
    write_buffer(sup_buf, out / "buffers" / "supervised.jsonl")
    mark("generate")

    udg, _, _ = run_udg(cfg, tasks, buffers=buffers)
    sup, _, _ = run_udg(cfg, tasks, buffers=[sup_buf])
    write_policies([r.policy for r in udg], out / "offline_udg.jsonl")
    write_policies([r.policy for r in sup], out / "offline_supervised.jsonl")
    mark("offline")

    angle_tasks = [t for t in tasks if t.kind == "angle"]
    report = {
        "config": {"seed": cfg.seed, "tasks": [t.label() for t in tasks], "n_policies": cfg.diversity.n_policies,
                   "buffer_episodes": cfg.buffer_episodes, "kappa": cfg.kappa,
                   "lipschitz_r": cfg.spec.lipschitz_r, "lipschitz_T": cfg.spec.lipschitz_T},
        "diversity": {"min_pairwise_by_round": history,
                      "initial": history[0], "final": history[-1]},
        "udg": [r.to_dict() for r in udg],
        "supervised": [r.to_dict() for r in sup],
    }
    if angle_tasks:
        report["mixing"] = mixing_experiment(buffers, angle_tasks, cfg)
        mark("mixing")
        gap = verify_gap_bound(buffers, angle_tasks[0], cfg, behaviors=policies)
        report["gap"] = gap.to_dict()
        mark("gap")
        report["regret_diverse"] = regret_report(buffer_measures(buffers, cfg.spec), angle_tasks, cfg.spec,
                                                 seed=_derive_seed(cfg.seed, 5)).to_dict()
        report["regret_supervised"] = regret_report(buffer_measures([sup_buf], cfg.spec), angle_tasks, cfg.spec,
                                                    seed=_derive_seed(cfg.seed, 5)).to_dict()
        report["improvement"] = improvement_rows(buffers, policies, angle_tasks, cfg)
        report["oracle_buffer"] = oracle_buffer_check(cfg, angle_tasks[0])
        report["planner"] = [planner_check(cfg, t) for t in angle_tasks]
        mark("reports")
    report["lemma"] = lemma_check(50, cfg.seed)
    mark("lemma")
    dump_json(report, out / "report.json")
    dump_json(timings, out / "timings.json")
    return report

