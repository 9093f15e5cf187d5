"""Discounted occupancy measures and Wasserstein-1 distances between them."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .core import Buffer, ContractError

# POT probes every installed array backend on import; only numpy is needed here.
for _key in ("PYTORCH", "JAX", "CUPY", "TENSORFLOW"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_key}", "1")
import ot  # noqa: E402

SPACE_TAGS = ("state", "state-action", "projected")
DEFAULT_SUPPORT_CAP = 2000


@dataclass
class EmpiricalMeasure:
    points: np.ndarray
    weights: np.ndarray
    space_tag: str = "state"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.points.shape[0] < 1:
            raise ContractError("a measure needs at least one support point")
        if self.points.shape[0] != self.weights.shape[0]:
            raise ContractError("points and weights disagree in length")
        if not (np.all(np.isfinite(self.points)) and np.all(np.isfinite(self.weights))):
            raise ContractError("measure contains NaN or Inf")
        if np.any(self.weights < 0):
            raise ContractError("negative weights")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ContractError(f"weights sum to {self.weights.sum()!r}, not 1")
        if self.space_tag not in SPACE_TAGS:
            raise ContractError(f"unknown space tag {self.space_tag!r}")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def uniform(cls, points, space_tag: str = "state") -> "EmpiricalMeasure":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(points, np.full(len(points), 1.0 / len(points)), space_tag)

    @classmethod
    def from_unnormalized(cls, points, mass, space_tag: str = "state") -> "EmpiricalMeasure":
        mass = np.asarray(mass, dtype=float)
        return cls(points, _normalize(mass), space_tag)

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points


def _normalize(mass: np.ndarray) -> np.ndarray:
    w = mass / mass.sum()
    # one correction pass pulls the float sum to within an ulp of 1
    w[np.argmax(w)] += 1.0 - w.sum()
    return w


@dataclass
class TransportPlan:
    coupling: list[tuple[int, int, float]]
    cost: float

    def as_matrix(self, n: int, m: int) -> np.ndarray:
        out = np.zeros((n, m))
        for i, j, mass in self.coupling:
            out[i, j] += mass
        return out


def systematic_resample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` draws, each stratum of width 1/n sampled at the same offset."""
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.minimum(np.searchsorted(cum, positions, side="right"), len(weights) - 1)


def occupancy_from_buffer(
    buf: Buffer,
    gamma: float,
    projection: Sequence[int] | None = None,
    *,
    include_actions: bool = False,
    cap: int | None = DEFAULT_SUPPORT_CAP,
    seed: int = 0,
) -> EmpiricalMeasure:
    """Empirical discounted occupancy of the policy that filled ``buf``.

    The sample at step t of its episode gets weight proportional to gamma**t.
    Above ``cap`` points the support is replaced by a systematic resample with
    uniform weights.
    """
    if not len(buf):
        raise ContractError("occupancy of an empty buffer")
    if projection is not None:
        points, tag = buf.s[:, list(projection)], "projected"
    elif include_actions:
        points, tag = np.hstack([buf.s, buf.a]), "state-action"
    else:
        points, tag = buf.s, "state"
    mass = gamma ** buf.step_in_episode().astype(float)
    weights = _normalize(mass)
    if cap is not None and len(points) > cap:
        idx = systematic_resample(weights, cap, np.random.default_rng(seed))
        return EmpiricalMeasure.uniform(points[idx], tag)
    return EmpiricalMeasure(points.copy(), weights, tag)


def _check_pair(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> None:
    if mu.dim != nu.dim:
        raise ContractError(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    for m in (mu, nu):
        if abs(m.weights.sum() - 1.0) > 1e-12 or np.any(m.weights < 0):
            raise ContractError("weights are not a probability vector")


def w1_exact(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> tuple[float, TransportPlan]:
    """Exact W1 under the Euclidean ground metric.

    Equal-size uniform measures are solved as an assignment problem; everything
    else goes through the network simplex.
    """
    _check_pair(mu, nu)
    cost = cdist(mu.points, nu.points)
    if len(mu) == len(nu) and mu.is_uniform() and nu.is_uniform():
        rows, cols = linear_sum_assignment(cost)
        mass = 1.0 / len(mu)
        total = float(cost[rows, cols].sum() * mass)
        return total, TransportPlan([(int(i), int(j), mass) for i, j in zip(rows, cols)], total)
    G = ot.emd(mu.weights, nu.weights, cost, numItermax=10_000_000)
    ii, jj = np.nonzero(G)
    total = float(np.sum(G[ii, jj] * cost[ii, jj]))
    return total, TransportPlan([(int(i), int(j), float(G[i, j])) for i, j in zip(ii, jj)], total)


def w1_distance(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    return w1_exact(mu, nu)[0]


def _w1_1d(x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray) -> float:
    # integral of |F - G| over the merged support
    vals = np.concatenate([x, y])
    order = np.argsort(vals, kind="stable")
    jumps = np.concatenate([wx, -wy])[order]
    diff = np.cumsum(jumps)[:-1]
    gaps = np.diff(vals[order])
    return float(np.sum(np.abs(diff) * gaps))


def w1_sliced(mu: EmpiricalMeasure, nu: EmpiricalMeasure, n_projections: int = 50, seed: int = 0) -> float:
    """Average 1-D W1 of the two measures projected on random unit directions."""
    if n_projections < 1:
        raise ContractError("n_projections must be >= 1")
    _check_pair(mu, nu)
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_projections, mu.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    px, py = mu.points @ dirs.T, nu.points @ dirs.T
    return float(np.mean([_w1_1d(px[:, k], mu.weights, py[:, k], nu.weights) for k in range(n_projections)]))


def w1(mu: EmpiricalMeasure, nu: EmpiricalMeasure, mode: str = "exact", n_projections: int = 50, seed: int = 0) -> float:
    if mode == "exact":
        return w1_exact(mu, nu)[0]
    if mode == "sliced":
        return w1_sliced(mu, nu, n_projections, seed)
    raise ContractError(f"unknown distance mode {mode!r}")


def pairwise_w1(measures: Sequence[EmpiricalMeasure], mode: str = "exact", n_projections: int = 50, seed: int = 0) -> np.ndarray:
    if len(measures) < 2:
        raise ContractError("pairwise_w1 needs at least two measures")
    k = len(measures)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = w1(measures[i], measures[j], mode, n_projections, seed)
    return out


def write_measure(measure: EmpiricalMeasure, path) -> None:
    """Same layout as buffer files: JSON header line, one JSON record per point."""
    header = {"format": "udg-measure", "version": 1, "space_tag": measure.space_tag,
              "dim": measure.dim, "n": len(measure)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps({"x": p.tolist(), "w": float(w)}) for p, w in zip(measure.points, measure.weights)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_measure(path) -> EmpiricalMeasure:
    with open(path) as fh:
        header = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    pts = np.array([r["x"] for r in recs], dtype=float).reshape(-1, header["dim"])
    return EmpiricalMeasure(pts, np.array([r["w"] for r in recs]), header["space_tag"])
