"""Point-mass environment, task rewards, rollouts and transition buffers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

BUFFER_FORMAT = "udg-buffer"
BUFFER_VERSION = 1


class ContractError(ValueError):
    """Raised when an input violates an operation's preconditions."""


@dataclass(frozen=True)
class EnvSpec:
    state_dim: int = 2
    action_dim: int = 2
    state_bounds: tuple = ((-5.0, 5.0), (-5.0, 5.0))
    action_bounds: tuple = ((-1.0, 1.0), (-1.0, 1.0))
    dt: float = 0.1
    horizon: int = 100
    gamma: float = 0.99
    # None -> sqrt(1 + dt^2), the tight constant for s + dt*a under the product metric
    lipschitz_T: float | None = None
    lipschitz_r: float = 5.0
    # half-width of the uniform box around the state-space center used by reset
    init_noise: float = 0.1
    env_id: str = "pointmass-2d"

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ContractError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")
        if len(self.state_bounds) != self.state_dim or len(self.action_bounds) != self.action_dim:
            raise ContractError("bounds do not match dimensions")
        for lo, hi in (*self.state_bounds, *self.action_bounds):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ContractError(f"invalid bound [{lo}, {hi}]")
        object.__setattr__(self, "state_bounds", tuple(tuple(map(float, b)) for b in self.state_bounds))
        object.__setattr__(self, "action_bounds", tuple(tuple(map(float, b)) for b in self.action_bounds))
        if self.lipschitz_T is None:
            object.__setattr__(self, "lipschitz_T", math.sqrt(1.0 + self.dt**2))
        if self.lipschitz_T <= 0 or self.lipschitz_r <= 0:
            raise ContractError("Lipschitz constants must be positive")

    @property
    def s_lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.state_bounds])

    @property
    def s_hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.state_bounds])

    @property
    def a_lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.action_bounds])

    @property
    def a_hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.action_bounds])

    @property
    def state_diameter(self) -> float:
        """B_S: radius of the smallest ball containing the state box."""
        return float(np.linalg.norm(self.s_hi - self.s_lo) / 2)

    @property
    def action_diameter(self) -> float:
        return float(np.linalg.norm(self.a_hi - self.a_lo) / 2)

    @property
    def discount_mass(self) -> float:
        """c = 1 / (1 - gamma)."""
        return 1.0 / (1.0 - self.gamma)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "angle"
    angle_deg: float = 0.0
    c_z: float = 0.0
    z0: float = 0.0

    def __post_init__(self):
        if self.kind not in ("angle", "jump"):
            raise ContractError(f"unknown task kind {self.kind!r}")
        if not 0.0 <= self.angle_deg < 360.0:
            raise ContractError("angle_deg must be in [0, 360)")
        if not math.isfinite(self.c_z):
            raise ContractError("c_z must be finite")

    @classmethod
    def angle(cls, deg: float) -> "TaskSpec":
        return cls(kind="angle", angle_deg=float(deg) % 360.0)

    @classmethod
    def jump(cls, c_z: float, z0: float = 0.0) -> "TaskSpec":
        return cls(kind="jump", c_z=float(c_z), z0=float(z0))

    @classmethod
    def parse(cls, text: str) -> "TaskSpec":
        """Parse ``angle:60`` or ``jump:15[:z0]``."""
        kind, _, rest = text.strip().partition(":")
        parts = [p for p in rest.split(":") if p]
        if kind == "angle":
            return cls.angle(float(parts[0]) if parts else 0.0)
        if kind == "jump":
            return cls.jump(float(parts[0]) if parts else 0.0, float(parts[1]) if len(parts) > 1 else 0.0)
        raise ContractError(f"unknown task kind {kind!r}")

    def label(self) -> str:
        if self.kind == "angle":
            return f"angle:{self.angle_deg:g}"
        return f"jump:{self.c_z:g}:{self.z0:g}"

    def direction(self) -> np.ndarray:
        """Unit vector of the desired heading; 0 deg is +y, counterclockwise."""
        th = math.radians(self.angle_deg)
        return np.array([-math.sin(th), math.cos(th)])


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    t: int
    done: bool
    policy_id: int


@dataclass
class Buffer:
    """Ordered transitions stored column-wise.

    ``episode_starts`` holds the index of the first transition of every episode.
    """

    env_id: str
    dt: float
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    t: np.ndarray
    done: np.ndarray
    policy_id: np.ndarray
    episode_starts: list[int]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.r)
        for name in ("s", "a", "s2", "t", "done", "policy_id"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"column {name} has wrong length")
        starts = list(self.episode_starts)
        if n and (not starts or starts[0] != 0 or any(b <= a for a, b in zip(starts, starts[1:])) or starts[-1] >= n):
            raise ContractError("episode_starts must be strictly increasing from 0")
        if not n and starts:
            raise ContractError("empty buffer cannot have episodes")
        self.episode_starts = [int(i) for i in starts]

    def __len__(self) -> int:
        return len(self.r)

    @property
    def n_episodes(self) -> int:
        return len(self.episode_starts)

    def episode_slices(self) -> list[slice]:
        bounds = [*self.episode_starts, len(self)]
        return [slice(a, b) for a, b in zip(bounds, bounds[1:])]

    def step_in_episode(self) -> np.ndarray:
        """Index of each transition within its episode (0 at every episode start)."""
        idx = np.arange(len(self))
        starts = np.zeros(len(self), dtype=int)
        starts[self.episode_starts] = self.episode_starts
        return idx - np.maximum.accumulate(starts)

    @property
    def transitions(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            s=self.s[i].copy(), a=self.a[i].copy(), r=float(self.r[i]), s2=self.s2[i].copy(),
            t=int(self.t[i]), done=bool(self.done[i]), policy_id=int(self.policy_id[i]),
        )

    def copy(self, **changes) -> "Buffer":
        fields = dict(
            env_id=self.env_id, dt=self.dt, s=self.s.copy(), a=self.a.copy(), r=self.r.copy(),
            s2=self.s2.copy(), t=self.t.copy(), done=self.done.copy(), policy_id=self.policy_id.copy(),
            episode_starts=list(self.episode_starts), metadata=json.loads(json.dumps(self.metadata)),
        )
        fields.update(changes)
        return Buffer(**fields)

    @classmethod
    def empty(cls, spec: EnvSpec, metadata: dict | None = None) -> "Buffer":
        return cls(
            env_id=spec.env_id, dt=spec.dt,
            s=np.zeros((0, spec.state_dim)), a=np.zeros((0, spec.action_dim)), r=np.zeros(0),
            s2=np.zeros((0, spec.state_dim)), t=np.zeros(0, dtype=int), done=np.zeros(0, dtype=bool),
            policy_id=np.zeros(0, dtype=int), episode_starts=[], metadata=metadata or {},
        )

    @classmethod
    def from_transitions(cls, spec: EnvSpec, transitions: Sequence[Transition], metadata: dict | None = None) -> "Buffer":
        if not transitions:
            return cls.empty(spec, metadata)
        starts = [i for i, tr in enumerate(transitions) if i == 0 or tr.t == 0 or transitions[i - 1].done]
        return cls(
            env_id=spec.env_id, dt=spec.dt,
            s=np.array([tr.s for tr in transitions], dtype=float),
            a=np.array([tr.a for tr in transitions], dtype=float),
            r=np.array([tr.r for tr in transitions], dtype=float),
            s2=np.array([tr.s2 for tr in transitions], dtype=float),
            t=np.array([tr.t for tr in transitions], dtype=int),
            done=np.array([tr.done for tr in transitions], dtype=bool),
            policy_id=np.array([tr.policy_id for tr in transitions], dtype=int),
            episode_starts=starts, metadata=metadata or {},
        )


# ---------------------------------------------------------------------------
# dynamics


def _check_dims(x: np.ndarray, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (dim,):
        raise ContractError(f"{name} has shape {x.shape}, expected trailing dimension {dim}")
    return x


def env_step(state, action, spec: EnvSpec) -> np.ndarray:
    """s' = clip(s + dt * clip(a)). Works on single vectors or batches."""
    s = _check_dims(state, spec.state_dim, "state")
    a = np.clip(_check_dims(action, spec.action_dim, "action"), spec.a_lo, spec.a_hi)
    return np.clip(s + spec.dt * a, spec.s_lo, spec.s_hi)


def reset_states(spec: EnvSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    center = (spec.s_lo + spec.s_hi) / 2
    noise = rng.uniform(-1.0, 1.0, size=(n, spec.state_dim)) * spec.init_noise
    return np.clip(center + noise, spec.s_lo, spec.s_hi)


# ---------------------------------------------------------------------------
# rewards


def task_reward_batch(s: np.ndarray, s2: np.ndarray, task: TaskSpec, dt: float) -> np.ndarray:
    disp = (np.asarray(s2, dtype=float) - np.asarray(s, dtype=float)) / dt
    if task.kind == "angle":
        return disp @ task.direction()
    if task.kind == "jump":
        return disp[..., 0] + task.c_z * (np.asarray(s2, dtype=float)[..., 1] - task.z0)
    raise ContractError(f"unknown task kind {task.kind!r}")


def task_reward(tr: Transition, task: TaskSpec, dt: float) -> float:
    """Reward of one transition under ``task``.

    Angle tasks pay the velocity component along the task heading. Jump tasks
    pay forward (x) velocity plus ``c_z * (y' - z0)``, with y standing in for height.
    """
    if tr.s.shape != tr.s2.shape:
        raise ContractError("s and s2 dimensions differ")
    return float(task_reward_batch(tr.s, tr.s2, task, dt))


RewardHook = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _reward_fn(reward, dt: float) -> RewardHook:
    if reward is None:
        return lambda s, a, s2: np.zeros(s.shape[:-1])
    if isinstance(reward, TaskSpec):
        return lambda s, a, s2: task_reward_batch(s, s2, reward, dt)
    return reward


def relabel_buffer(buf: Buffer, task: TaskSpec) -> Buffer:
    out = buf.copy()
    if len(buf):
        out.r = task_reward_batch(buf.s, buf.s2, task, buf.dt)
    out.metadata["reward"] = task.label()
    return out


def episode_returns(buf: Buffer, gamma: float) -> np.ndarray:
    disc = gamma ** buf.step_in_episode().astype(float)
    return np.add.reduceat(disc * buf.r, buf.episode_starts) if len(buf) else np.zeros(0)


def average_return(buf: Buffer, gamma: float) -> float:
    """Mean over episodes of the discounted episode return."""
    if not len(buf):
        raise ContractError("average_return of an empty buffer")
    return float(np.mean(episode_returns(buf, gamma)))


# ---------------------------------------------------------------------------
# rollouts


class Actor(Protocol):
    id: int

    def mean_actions(self, states: np.ndarray) -> np.ndarray: ...

    @property
    def noise_std(self) -> np.ndarray: ...


def simulate(mean_fn, std, spec: EnvSpec, starts: np.ndarray, eps: np.ndarray):
    """Roll a batch of start states for ``spec.horizon`` steps.

    ``starts`` has shape (*batch, S); ``eps`` has shape (H, *batch, A) and is
    scaled by ``std``. Returns states, actions, next states of shape (H, *batch, .).
    """
    H = spec.horizon
    states = np.empty((H, *starts.shape))
    actions = np.empty((H, *starts.shape[:-1], spec.action_dim))
    s = starts
    for t in range(H):
        a = np.clip(mean_fn(s) + std * eps[t], spec.a_lo, spec.a_hi)
        states[t] = s
        actions[t] = a
        s = np.clip(s + spec.dt * a, spec.s_lo, spec.s_hi)
    next_states = np.concatenate([states[1:], s[None]], axis=0)
    return states, actions, next_states


def rollout(policy: Actor, spec: EnvSpec, reward=None, n_episodes: int = 1, seed: int = 0) -> Buffer:
    """Run ``n_episodes`` full-horizon episodes of ``policy``.

    ``reward`` is a TaskSpec, a callable ``(s, a, s2) -> r`` over arrays, or None (zeros).
    """
    if n_episodes < 1:
        raise ContractError("n_episodes must be >= 1")
    rng = np.random.default_rng(seed)
    starts = reset_states(spec, n_episodes, rng)
    eps = rng.standard_normal((spec.horizon, n_episodes, spec.action_dim))
    S, A, S2 = simulate(policy.mean_actions, policy.noise_std, spec, starts, eps)
    # episode-major ordering
    S, A, S2 = (np.swapaxes(x, 0, 1).reshape(-1, x.shape[-1]) for x in (S, A, S2))
    H = spec.horizon
    t = np.tile(np.arange(H), n_episodes)
    r = np.asarray(_reward_fn(reward, spec.dt)(S, A, S2), dtype=float).reshape(-1)
    if isinstance(reward, TaskSpec):
        desc = reward.label()
    else:
        desc = "none" if reward is None else getattr(reward, "__name__", "hook")
    return Buffer(
        env_id=spec.env_id, dt=spec.dt, s=S, a=A, r=r, s2=S2, t=t, done=t == H - 1,
        policy_id=np.full(len(t), int(policy.id)),
        episode_starts=list(range(0, H * n_episodes, H)),
        metadata={"seed": int(seed), "policy_ids": [int(policy.id)], "reward": desc},
    )


# ---------------------------------------------------------------------------
# serialization: one JSON header line, then one JSON object per transition.
# json emits floats with repr(), which round-trips bit-exactly.


def write_buffer(buf: Buffer, path) -> None:
    header = {
        "format": BUFFER_FORMAT, "version": BUFFER_VERSION, "env_id": buf.env_id, "dt": buf.dt,
        "state_dim": int(buf.s.shape[1]), "action_dim": int(buf.a.shape[1]),
        "n": len(buf), "episode_starts": buf.episode_starts, "metadata": buf.metadata,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for i in range(len(buf)):
        lines.append(json.dumps({
            "s": buf.s[i].tolist(), "a": buf.a[i].tolist(), "r": float(buf.r[i]), "s2": buf.s2[i].tolist(),
            "t": int(buf.t[i]), "done": bool(buf.done[i]), "policy_id": int(buf.policy_id[i]),
        }))
    Path(path).write_text("\n".join(lines) + "\n")


def read_buffer(path) -> Buffer:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != BUFFER_FORMAT:
            raise ContractError(f"{path} is not a buffer file")
        if header["version"] > BUFFER_VERSION:
            raise ContractError(f"unsupported buffer version {header['version']}")
        recs = [json.loads(line) for line in fh if line.strip()]
    sd, ad = header["state_dim"], header["action_dim"]

    def col(key, shape, dtype=float):
        return np.array([r[key] for r in recs], dtype=dtype).reshape(shape)

    return Buffer(
        env_id=header["env_id"], dt=header["dt"],
        s=col("s", (-1, sd)), a=col("a", (-1, ad)), r=col("r", (-1,)), s2=col("s2", (-1, sd)),
        t=col("t", (-1,), int), done=col("done", (-1,), bool), policy_id=col("policy_id", (-1,), int),
        episode_starts=header["episode_starts"], metadata=header["metadata"],
    )


def check_compatible(buf: Buffer, spec: EnvSpec) -> None:
    if buf.env_id != spec.env_id or buf.s.shape[1] != spec.state_dim or buf.a.shape[1] != spec.action_dim:
        raise ContractError(f"buffer env {buf.env_id!r} does not match {spec.env_id!r}")


__all__ = [
    "Actor", "Buffer", "ContractError", "EnvSpec", "TaskSpec", "Transition", "average_return",
    "check_compatible", "env_step", "episode_returns", "read_buffer", "relabel_buffer",
    "reset_states", "rollout", "simulate", "task_reward", "task_reward_batch", "write_buffer",
]
