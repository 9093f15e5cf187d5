"""Command line entry point: ``udg <subcommand> [--seed N] [--config FILE] [--out PATH]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import config_tasks, load_config, partial_task
from .core import TaskSpec, read_buffer, relabel_buffer, write_buffer

log = logging.getLogger("udg")


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _emit(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    print(text)


def _buffer_paths(args) -> list[Path]:
    paths = []
    for p in args.buffers:
        p = Path(p)
        paths.extend(sorted(p.glob("*.jsonl")) if p.is_dir() else [p])
    return paths


def cmd_train_diverse(args, cfg, raw):
    from .policy import train_diverse, write_policies

    policies = train_diverse(cfg.spec, cfg.diversity, cfg.cem, partial_task(raw))
    out = _out(args, "run")
    out.mkdir(parents=True, exist_ok=True)
    write_policies(policies, out / "policies_diverse.jsonl")
    print(out / "policies_diverse.jsonl")


def cmd_generate(args, cfg, raw):
    from .pipeline import generate_buffers
    from .policy import _derive_seed, read_policies

    policies = read_policies(args.policies)
    out = _out(args, "run") / "buffers"
    out.mkdir(parents=True, exist_ok=True)
    episodes = args.episodes or cfg.buffer_episodes
    for i, b in enumerate(generate_buffers(policies, cfg.spec, episodes, _derive_seed(cfg.seed, 1), partial_task(raw))):
        write_buffer(b, out / f"diverse_{i:02d}.jsonl")
        print(out / f"diverse_{i:02d}.jsonl")


def cmd_relabel(args, cfg, raw):
    out = _out(args, "relabeled.jsonl")
    write_buffer(relabel_buffer(read_buffer(args.buffer), TaskSpec.parse(args.task)), out)
    print(out)


def cmd_select(args, cfg, raw):
    from .pipeline import select_buffer

    paths = _buffer_paths(args)
    k, scores = select_buffer([read_buffer(p) for p in paths], TaskSpec.parse(args.task), cfg.spec.gamma)
    _emit({"task": args.task, "selected": k, "selected_path": str(paths[k]),
           "scores": {str(p): s for p, s in zip(paths, scores)}})


def cmd_offline_train(args, cfg, raw):
    from .pipeline import offline_train_and_eval
    from .policy import write_policies

    pi_hat, mean, std, _ = offline_train_and_eval(read_buffer(args.buffer), TaskSpec.parse(args.task), cfg)
    out = _out(args, "offline_policy.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_policies([pi_hat], out)
    _emit({"task": args.task, "policy": str(out), "return_mean": mean, "return_std": std})


def cmd_plan_oracle(args, cfg, raw):
    from .experiment import planner_check
    from .offline import GridPlanner, evaluate_policy
    from .pipeline import oracle_policy

    task = TaskSpec.parse(args.task)
    planner = GridPlanner(grid_resolution=args.grid)
    pi = oracle_policy(cfg.spec, task, planner)
    report = planner_check(cfg, task, planner)
    report["return_mean"], report["return_std"] = evaluate_policy(pi, cfg.spec, task, cfg.eval_episodes, cfg.seed)
    report["grid_resolution"] = args.grid
    _emit(report, Path(args.out) if args.out else None)


def cmd_verify_bound(args, cfg, raw):
    from .pipeline import verify_gap_bound
    from .policy import read_policies

    buffers = [read_buffer(p) for p in _buffer_paths(args)]
    behaviors = read_policies(args.policies) if args.policies else None
    report = verify_gap_bound(buffers, TaskSpec.parse(args.task), cfg, behaviors=behaviors)
    _emit(report.to_dict(), Path(args.out) if args.out else None)


def cmd_verify_lemma(args, cfg, raw):
    from .experiment import lemma_check

    report = lemma_check(args.n_mdps, cfg.seed)
    _emit({"n_mdps": report["n_mdps"], "max_residual": report["max_residual"]}, Path(args.out) if args.out else None)


def cmd_regret(args, cfg, raw):
    from .pipeline import buffer_measures, regret_report

    buffers = [read_buffer(p) for p in _buffer_paths(args)]
    tasks = [TaskSpec.parse(t) for t in args.tasks] if args.tasks else config_tasks(raw)
    report = regret_report(buffer_measures(buffers, cfg.spec), tasks, cfg.spec, seed=cfg.seed)
    _emit(report.to_dict(), Path(args.out) if args.out else None)


def cmd_run_all(args, cfg, raw):
    from .experiment import run_all

    out = _out(args, "run")
    report = run_all(cfg, config_tasks(raw), out, partial_task(raw), float(raw.get("supervised_angle", 0.0)))
    summary = {"out": str(out), "min_pairwise_initial": report["diversity"]["initial"],
               "min_pairwise_final": report["diversity"]["final"],
               "udg": {r["task"]: r["offline_return"] for r in report["udg"]},
               "supervised": {r["task"]: r["offline_return"] for r in report["supervised"]}}
    _emit(summary)


def cmd_plot(args, cfg, raw):
    from .plotting import plot_run

    for path in plot_run(Path(args.run), _out(args, str(Path(args.run) / "plots")), cfg):
        print(path)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--config", default=None, help="TOML key-value config file")
    common.add_argument("--out", default=None, help="output directory or file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="udg", description="Unsupervised data generation for offline RL.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(fn=fn)
        return p

    add("train-diverse", cmd_train_diverse, "train the diverse ensemble")
    p = add("generate", cmd_generate, "roll out one buffer per policy")
    p.add_argument("--policies", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p = add("relabel", cmd_relabel, "recompute rewards for a task")
    p.add_argument("--buffer", required=True)
    p.add_argument("--task", required=True)
    p = add("select", cmd_select, "pick the buffer with the highest relabeled return")
    p.add_argument("--buffers", nargs="+", required=True, help="buffer files or directories")
    p.add_argument("--task", required=True)
    p = add("offline-train", cmd_offline_train, "train and evaluate a policy on one buffer")
    p.add_argument("--buffer", required=True)
    p.add_argument("--task", required=True)
    p = add("plan-oracle", cmd_plan_oracle, "solve the task on a grid and report convergence")
    p.add_argument("--task", required=True)
    p.add_argument("--grid", type=int, default=51)
    p = add("verify-bound", cmd_verify_bound, "gap vs W1-to-optimal report for one task")
    p.add_argument("--buffers", nargs="+", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--policies", default=None, help="behaviour policies, one per buffer")
    p = add("verify-lemma", cmd_verify_lemma, "telescoping identity on random finite MDPs")
    p.add_argument("--n-mdps", type=int, default=50)
    p = add("regret", cmd_regret, "ensemble regret against planner optima")
    p.add_argument("--buffers", nargs="+", required=True)
    p.add_argument("--tasks", nargs="*", default=None)
    add("run-all", cmd_run_all, "full pipeline with every report")
    p = add("plot", cmd_plot, "trajectory/occupancy tables and SVG panels from a run directory")
    p.add_argument("--run", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg, raw = load_config(args.config, args.seed)
    args.fn(args, cfg, raw)
    return 0


if __name__ == "__main__":
    sys.exit(main())
