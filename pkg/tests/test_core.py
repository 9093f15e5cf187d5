import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udg.core import (Buffer, ContractError, EnvSpec, TaskSpec, Transition, average_return, env_step,
                      read_buffer, relabel_buffer, rollout, task_reward, write_buffer)
from udg.policy import make_policy

SPEC = EnvSpec()


class ConstantPolicy:
    def __init__(self, action, std=0.0, id=0):
        self.action = np.asarray(action, dtype=float)
        self.noise_std = np.full(len(self.action), std)
        self.id = id

    def mean_actions(self, states):
        return np.broadcast_to(self.action, (*np.shape(states)[:-1], len(self.action)))


def tr(s, s2, a=(0.0, 0.0), r=0.0, t=0, done=False, pid=0):
    return Transition(np.array(s, float), np.array(a, float), r, np.array(s2, float), t, done, pid)


# env_step

def test_zero_action_is_fixed_point():
    assert np.array_equal(env_step([0.0, 0.0], [0.0, 0.0], SPEC), [0.0, 0.0])


def test_unit_action_moves_dt():
    np.testing.assert_allclose(env_step([0.0, 0.0], [1.0, 0.0], SPEC), [0.1, 0.0])


def test_step_clips_to_bounds():
    np.testing.assert_allclose(env_step([4.95, 0.0], [1.0, 0.0], SPEC), [5.0, 0.0])


def test_step_dimension_mismatch():
    with pytest.raises(ContractError):
        env_step([0.0, 0.0, 0.0], [0.0, 0.0], SPEC)


def test_step_is_deterministic():
    rng = np.random.default_rng(0)
    s, a = rng.uniform(-5, 5, (100, 2)), rng.uniform(-2, 2, (100, 2))
    assert env_step(s, a, SPEC).tobytes() == env_step(s.copy(), a.copy(), SPEC).tobytes()


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-6, 6), min_size=8, max_size=8))
def test_step_lipschitz(v):
    s1, a1, s2, a2 = (np.array(v[i:i + 2]) for i in range(0, 8, 2))
    lhs = np.linalg.norm(env_step(s1, a1, SPEC) - env_step(s2, a2, SPEC))
    rhs = SPEC.lipschitz_T * np.linalg.norm(np.concatenate([s1 - s2, a1 - a2]))
    assert lhs <= rhs + 1e-12


def test_lipschitz_default_is_tight():
    # s and a moving together is the worst case for s + dt*a
    s_a, s_b = np.array([0.0, 0.0]), np.array([1.0, 0.0])
    a_a, a_b = np.array([0.0, 0.0]), np.array([SPEC.dt, 0.0])
    out = np.linalg.norm(env_step(s_b, a_b, SPEC) - env_step(s_a, a_a, SPEC))
    inp = np.linalg.norm(np.concatenate([s_b - s_a, a_b - a_a]))
    assert out / inp == pytest.approx(SPEC.lipschitz_T, rel=1e-12)


def test_envspec_validation():
    with pytest.raises(ContractError):
        EnvSpec(gamma=1.0)
    with pytest.raises(ContractError):
        EnvSpec(horizon=0)
    with pytest.raises(ContractError):
        EnvSpec(state_bounds=((1.0, -1.0), (-5.0, 5.0)))


# rewards

def test_angle_reward_aligned_and_opposite():
    t = tr([0, 0], [0, 1])
    assert task_reward(t, TaskSpec.angle(0), dt=1.0) == pytest.approx(1.0)
    assert task_reward(t, TaskSpec.angle(180), dt=1.0) == pytest.approx(-1.0)


def test_angle_convention_counterclockwise():
    # 90 degrees counterclockwise from +y is -x
    assert task_reward(tr([0, 0], [-1, 0]), TaskSpec.angle(90), dt=1.0) == pytest.approx(1.0)


def test_jump_reward():
    t = tr([0, 0], [1, 0.5])
    assert task_reward(t, TaskSpec.jump(15.0, 0.0), dt=1.0) == pytest.approx(8.5)


def test_task_validation():
    with pytest.raises(ContractError):
        TaskSpec(kind="swim")
    with pytest.raises(ContractError):
        TaskSpec(kind="angle", angle_deg=360.0)
    assert TaskSpec.parse("angle:60") == TaskSpec.angle(60)
    assert TaskSpec.parse("jump:-15") == TaskSpec.jump(-15)


# rollout

def test_rollout_standing_still():
    spec = EnvSpec(horizon=3, init_noise=0.0)
    buf = rollout(ConstantPolicy([0.0, 0.0]), spec, None, 1, seed=0)
    assert len(buf) == 3
    assert np.all(buf.s == 0.0) and np.all(buf.s2 == 0.0)
    assert buf.done.tolist() == [False, False, True]


def test_rollout_deterministic_given_seed(tmp_path):
    p = make_policy(SPEC, np.random.default_rng(1).normal(size=(9, 2)))
    a, b = rollout(p, SPEC, TaskSpec.angle(0), 3, seed=7), rollout(p, SPEC, TaskSpec.angle(0), 3, seed=7)
    write_buffer(a, tmp_path / "a.jsonl")
    write_buffer(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_rollout_episode_bookkeeping():
    spec = EnvSpec(horizon=5)
    buf = rollout(make_policy(spec), spec, None, 2, seed=3)
    assert buf.episode_starts == [0, 5]
    assert np.all(buf.r == 0.0)


def test_rollout_rejects_zero_episodes():
    with pytest.raises(ContractError):
        rollout(make_policy(SPEC), SPEC, None, 0, seed=0)


def test_rollout_reward_hook():
    spec = EnvSpec(horizon=4)
    buf = rollout(ConstantPolicy([1.0, 0.0]), spec, lambda s, a, s2: a[:, 0] * 2, 1, 0)
    np.testing.assert_allclose(buf.r, 2.0)


# relabel / returns

def _one(s, s2, r=0.0):
    return Buffer.from_transitions(EnvSpec(dt=1.0), [tr(s, s2, r=r, done=True)])


def test_relabel_empty():
    buf = Buffer.empty(SPEC)
    assert len(relabel_buffer(buf, TaskSpec.angle(0))) == 0


def test_relabel_single_transition():
    buf = _one([0, 0], [0, 1], r=-3.0)
    assert relabel_buffer(buf, TaskSpec.angle(0)).r.tolist() == [1.0]


def test_relabel_idempotent_and_preserves_fields():
    buf = rollout(make_policy(SPEC, np.ones((9, 2))), SPEC, None, 2, seed=0)
    once = relabel_buffer(buf, TaskSpec.angle(60))
    twice = relabel_buffer(once, TaskSpec.angle(60))
    assert np.array_equal(once.r, twice.r)
    for name in ("s", "a", "s2", "t", "done", "policy_id"):
        assert np.array_equal(getattr(buf, name), getattr(once, name))
    assert once.episode_starts == buf.episode_starts


def _episodes(*reward_lists):
    trs = []
    for rews in reward_lists:
        for t, r in enumerate(rews):
            trs.append(tr([0, 0], [0, 0], r=r, t=t, done=t == len(rews) - 1))
    return Buffer.from_transitions(SPEC, trs)


def test_average_return_geometric():
    assert average_return(_episodes([1, 1, 1]), 0.5) == pytest.approx(1.75)


def test_average_return_mean_over_episodes():
    assert average_return(_episodes([2], [4]), 0.9) == pytest.approx(3.0)


def test_average_return_gamma_zero():
    assert average_return(_episodes([5, 9]), 0.0) == pytest.approx(5.0)


def test_average_return_empty():
    with pytest.raises(ContractError):
        average_return(Buffer.empty(SPEC), 0.9)


def test_average_return_zero_rewards():
    buf = rollout(make_policy(SPEC), SPEC, None, 2, seed=0)
    assert average_return(buf, 0.99) == 0.0


# serialization

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=7, max_size=7))
def test_buffer_roundtrip_bitwise(tmp_path_factory, vals):
    t = Transition(np.array(vals[:2]), np.array(vals[2:4]), vals[4], np.array(vals[5:7]), 0, True, 3)
    buf = Buffer.from_transitions(SPEC, [t], {"seed": 1})
    path = tmp_path_factory.mktemp("rt") / "b.jsonl"
    write_buffer(buf, path)
    back = read_buffer(path)
    for name in ("s", "a", "r", "s2"):
        assert getattr(back, name).tobytes() == getattr(buf, name).tobytes()
    assert back.policy_id.tolist() == [3] and back.done.tolist() == [True]
    assert back.metadata == {"seed": 1}


def test_buffer_rejects_bad_episode_starts():
    buf = rollout(make_policy(SPEC), EnvSpec(horizon=3), None, 2, seed=0)
    with pytest.raises(ContractError):
        buf.copy(episode_starts=[0, 3, 3])
    with pytest.raises(ContractError):
        buf.copy(episode_starts=[1, 3])
