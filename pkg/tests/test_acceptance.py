"""Acceptance criteria 1-11, each at its stated tolerance. One PASS/FAIL line per criterion."""

import itertools
import json
import time

import numpy as np

from udg.cli import main
from udg.pipeline import random_mdp_pair, verify_telescoping
from udg.transport import EmpiricalMeasure, w1_exact


def brute_force(x, y):
    n = len(x)
    return min(np.mean(np.linalg.norm(x - y[list(p)], axis=1)) for p in itertools.permutations(range(n)))


def angular_distance(a, b):
    d = abs(a - b) % 360
    return min(d, 360 - d)


def test_criterion_01_ot_oracle(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        got = w1_exact(EmpiricalMeasure.uniform(x), EmpiricalMeasure.uniform(y))[0]
        worst = max(worst, abs(got - brute_force(x, y)))
    elapsed = time.perf_counter() - t0
    criterion(1, worst <= 1e-9 and elapsed < 10,
              f"200 clouds, max |exact - brute force| = {worst:.2e} (<= 1e-9), {elapsed:.2f}s (< 10s)")


def test_criterion_02_metric_axioms(criterion):
    rng = np.random.default_rng(7)
    sym = ident = tri = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 4))
        a, b, c = (EmpiricalMeasure.from_unnormalized(rng.normal(size=(n, d)), rng.uniform(0.1, 1.0, n))
                   for n in rng.integers(1, 9, size=3))
        ab, ba = w1_exact(a, b)[0], w1_exact(b, a)[0]
        bc, ac = w1_exact(b, c)[0], w1_exact(a, c)[0]
        sym = max(sym, abs(ab - ba))
        ident = max(ident, abs(w1_exact(a, a)[0]))
        tri = max(tri, ac - ab - bc)
    ok = sym <= 1e-9 and ident <= 1e-9 and tri <= 1e-9
    criterion(2, ok, f"200 triples, symmetry {sym:.1e}, identity {ident:.1e}, triangle excess {max(tri, 0):.1e} (<= 1e-9)")


def test_criterion_03_telescoping(criterion):
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst = max(verify_telescoping(**random_mdp_pair(int(rng.integers(2, 101)), int(rng.integers(1, 5)), rng))
                for _ in range(50))
    elapsed = time.perf_counter() - t0
    criterion(3, worst < 1e-8 and elapsed < 30, f"50 MDP pairs, max residual {worst:.2e} (< 1e-8), {elapsed:.2f}s (< 30s)")


def test_criterion_04_diversity(full_run, criterion):
    div = full_run["report"]["diversity"]
    ratio = div["final"] / div["initial"]
    secs = full_run["timings"]["train_diverse"]
    criterion(4, ratio >= 3 and secs < 600,
              f"K=8 min-pairwise W1 {div['initial']:.3f} -> {div['final']:.3f} ({ratio:.2f}x, need >= 3x), "
              f"{secs:.0f}s (< 600s)")


def test_criterion_05_angle_suite(full_run, criterion):
    rep = full_run["report"]
    udg = {r["task"]: r["offline_return"] for r in rep["udg"]}
    sup = {r["task"]: r["offline_return"] for r in rep["supervised"]}
    at_least = sum(udg[t] >= sup[t] for t in udg)
    far = [t for t in udg if angular_distance(float(t.split(":")[1]), 0.0) >= 120]
    far_ok = all(udg[t] > sup[t] for t in far)
    total = full_run["timings"]["lemma"]
    pairs = ", ".join(f"{t.split(':')[1]}deg {udg[t]:.1f}/{sup[t]:.1f}" for t in udg)
    criterion(5, at_least >= 4 and far_ok and total < 1200,
              f"UDG >= supervised on {at_least}/6, strictly higher on {far}: {far_ok}; "
              f"udg/sup: {pairs}; full run {total:.0f}s (< 1200s)")


def test_criterion_06_rank(full_run, criterion):
    gap = full_run["report"]["gap"]
    n = len(gap["rows"])
    criterion(6, n >= 8 and gap["spearman"] <= -0.5,
              f"{gap['task']}, {n} buffers, Spearman(W1-to-optimal, return) = {gap['spearman']:.3f} (<= -0.5)")


def test_criterion_07_oracle_limit(full_run, criterion):
    o = full_run["report"]["oracle_buffer"]
    criterion(7, o["fraction"] >= 0.9,
              f"{o['task']}, offline {o['offline_return']:.2f} / oracle {o['optimal_return']:.2f} "
              f"= {o['fraction']:.3f} (>= 0.9)")


def test_criterion_08_behavior_improvement(full_run, criterion):
    rows = full_run["report"]["improvement"]
    worst = min(rows, key=lambda r: r["margin"])
    criterion(8, all(r["margin"] >= 0 for r in rows),
              f"{len(rows)} (task, buffer) pairs, all pi_hat >= pi_beta - 5%|pi_beta|; tightest "
              f"{worst['task']} buffer {worst['buffer_id']}: {worst['offline_return']:.2f} vs "
              f"{worst['behavior_return']:.2f}, margin {worst['margin']:.2f}")


def test_criterion_09_mixing(full_run, criterion):
    rows = full_run["report"]["mixing"]
    wins = sum(r["top2_mixed"] >= r["all_mixed"] for r in rows)
    criterion(9, wins >= 4, f"top-2-mixed >= all-mixed on {wins}/{len(rows)} angle tasks (need >= 4)")


def test_criterion_10_determinism(tmp_path, criterion):
    cfg = tmp_path / "det.toml"
    cfg.write_text('seed = 5\ntasks = ["angle:0", "angle:120", "angle:240"]\nhorizon = 40\nn_policies = 3\n'
                   "rounds = 1\ncem_population = 10\ncem_iterations = 2\nbuffer_episodes = 4\n"
                   "offline_population = 10\noffline_iterations = 3\nn_start_states = 16\n")
    for name in ("a", "b"):
        main(["run-all", "--config", str(cfg), "--out", str(tmp_path / name)])
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "timings.json")
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    n_buffers = sum(f.parts[0] == "buffers" for f in files)
    criterion(10, same and n_buffers == 4 and any(f.name == "report.json" for f in files),
              f"two run-all invocations: {len(files)} files ({n_buffers} buffers + report) byte-identical: {same}")


def test_criterion_11_planner(full_run, criterion):
    rows = full_run["report"]["planner"]
    res = max(r["max_bellman_residual"] for r in rows)
    changes = sum(r["improvement_changes"] for r in rows)
    criterion(11, res < 1e-6 and changes == 0,
              f"{len(rows)} tasks, max Bellman residual {res:.2e} (< 1e-6), greedy actions changed by "
              f"exact improvement: {changes}")


def test_report_is_json_roundtrippable(full_run):
    text = (full_run["out"] / "report.json").read_text()
    assert json.loads(text)["config"]["n_policies"] == 8
