"""Nearest-entry episodic dynamics model with a distance-based uncertainty penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Buffer, ContractError, EnvSpec, TaskSpec, task_reward_batch


@dataclass(frozen=True)
class PenalizedQuery:
    s_next: np.ndarray
    r_raw: float
    u: float
    r_pen: float
    index: int


class EpisodicModel:
    """Memory of every (s, a, s', r) in a buffer, answered by exact nearest key lookup.

    Keys are ``(s, a) * key_scale``; the default scale is the identity.
    Duplicate keys are indexed once and resolve to their first occurrence, and
    equidistant distinct keys resolve to the lowest memory index.
    """

    def __init__(self, s, a, s2, r, kappa: float, gamma: float, dt: float, key_scale=None):
        if len(s) == 0:
            raise ContractError("cannot build a model from an empty buffer")
        if not kappa > 0:
            raise ContractError("kappa must be positive")
        self.s, self.a = np.array(s, dtype=float), np.array(a, dtype=float)
        self.s2, self.r = np.array(s2, dtype=float), np.array(r, dtype=float)
        self.kappa, self.gamma, self.dt = float(kappa), float(gamma), float(dt)
        d = self.s.shape[1] + self.a.shape[1]
        self.key_scale = np.ones(d) if key_scale is None else np.asarray(key_scale, dtype=float)
        keys = np.hstack([self.s, self.a]) * self.key_scale
        self.keys = keys
        _, first = np.unique(keys, axis=0, return_index=True)
        self._unique = np.sort(first)
        self._tree = cKDTree(keys[self._unique])

    def __len__(self) -> int:
        return len(self.s)

    @property
    def state_dim(self) -> int:
        return self.s.shape[1]

    def nearest(self, s, a) -> tuple[np.ndarray, np.ndarray]:
        """Memory index and key distance of the nearest entry, for batched queries."""
        q = np.hstack(np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(a, dtype=float)[..., :]))
        q = np.atleast_2d(q) * self.key_scale
        n = len(self._unique)
        k = min(4, n)
        dist, loc = self._tree.query(q, k=k)
        dist, loc = dist.reshape(len(q), k), loc.reshape(len(q), k)
        best = dist[:, 0]
        tied = dist == best[:, None]
        cand = np.where(tied, self._unique[np.minimum(loc, n - 1)], np.iinfo(np.int64).max)
        idx = cand.min(axis=1)
        # all k returned neighbours tied: scan the full ball for a lower index
        for row in np.nonzero(tied.all(axis=1) & (k < n))[0]:
            ball = self._tree.query_ball_point(q[row], best[row] * (1 + 1e-12) + 1e-300)
            ball_d = np.linalg.norm(self.keys[self._unique[ball]] - q[row], axis=1)
            hits = self._unique[np.asarray(ball)[ball_d <= best[row]]]
            idx[row] = min(idx[row], hits.min()) if len(hits) else idx[row]
        return idx, best

    def query_batch(self, s: np.ndarray, a: np.ndarray, task: TaskSpec):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if s.shape[1] != self.s.shape[1] or a.shape[1] != self.a.shape[1]:
            raise ContractError("query dimension mismatch")
        idx, dist = self.nearest(s, a)
        s_next = self.s2[idx]
        u = self.kappa * dist
        r_raw = task_reward_batch(s, s_next, task, self.dt)
        return s_next, r_raw, u, r_raw - self.gamma * u, idx


def model_build(buf: Buffer, kappa: float | None = None, gamma: float = 0.99, spec: EnvSpec | None = None,
                key_scale=None) -> EpisodicModel:
    """Store every transition of ``buf``. ``kappa`` defaults to L_r * L_T of ``spec``."""
    if not len(buf):
        raise ContractError("cannot build a model from an empty buffer")
    if kappa is None:
        spec = spec or EnvSpec()
        kappa = spec.lipschitz_r * spec.lipschitz_T
    return EpisodicModel(buf.s, buf.a, buf.s2, buf.r, kappa, gamma, buf.dt, key_scale)


def model_query(m: EpisodicModel, s, a, task: TaskSpec) -> PenalizedQuery:
    s_next, r_raw, u, r_pen, idx = m.query_batch(np.asarray(s)[None], np.asarray(a)[None], task)
    return PenalizedQuery(s_next[0], float(r_raw[0]), float(u[0]), float(r_pen[0]), int(idx[0]))
