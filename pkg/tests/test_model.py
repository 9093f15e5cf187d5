import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udg.core import Buffer, ContractError, EnvSpec, TaskSpec, Transition, rollout
from udg.model import EpisodicModel, model_build, model_query
from udg.offline import model_rollout
from udg.policy import make_policy

SPEC = EnvSpec(horizon=20)
TASK = TaskSpec.angle(0)


def _buffer(s, a, s2):
    trs = [Transition(np.array(x, float), np.array(u, float), 0.0, np.array(y, float), i, False, 0)
           for i, (x, u, y) in enumerate(zip(s, a, s2))]
    return Buffer.from_transitions(SPEC, trs)


def _random_buffer(seed, n_episodes=3):
    p = make_policy(SPEC, np.random.default_rng(seed).normal(size=(9, 2)), log_std=np.log(0.5))
    return rollout(p, SPEC, TASK, n_episodes, seed)


def linear_scan(model, s, a):
    d = np.linalg.norm(model.keys - np.concatenate([s, a]), axis=1)
    return int(np.argmin(d)), float(d.min())  # argmin returns the first minimum


def test_single_transition():
    m = model_build(_buffer([[0, 0]], [[1, 0]], [[0.1, 0]]))
    assert len(m) == 1


def test_duplicates_kept():
    m = model_build(_buffer([[0, 0], [0, 0]], [[1, 0], [1, 0]], [[0.1, 0], [0.1, 0]]))
    assert len(m) == 2
    assert model_query(m, [0, 0], [1, 0], TASK).index == 0


def test_build_deterministic():
    buf = _random_buffer(0)
    a, b = model_build(buf), model_build(buf)
    q = np.random.default_rng(1).uniform(-1, 1, (30, 4))
    assert np.array_equal(a.query_batch(q[:, :2], q[:, 2:], TASK)[4], b.query_batch(q[:, :2], q[:, 2:], TASK)[4])


def test_exact_key_has_zero_penalty():
    buf = _random_buffer(2)
    m = model_build(buf)
    q = model_query(m, buf.s[5], buf.a[5], TASK)
    assert q.u == 0.0 and q.r_pen == q.r_raw
    np.testing.assert_array_equal(q.s_next, buf.s2[q.index])
    np.testing.assert_array_equal(q.s_next, buf.s2[5])


def test_kappa_distance_arithmetic():
    m = model_build(_buffer([[0, 0]], [[1, 0]], [[0.1, 0]]), kappa=2.0)
    assert model_query(m, [0, 1], [1, 0], TASK).u == pytest.approx(2.0)


def test_equidistant_lower_index():
    m = model_build(_buffer([[1, 0], [-1, 0]], [[0, 0], [0, 0]], [[9, 9], [8, 8]]))
    q = model_query(m, [0, 0], [0, 0], TASK)
    assert q.index == 0 and q.s_next.tolist() == [9, 9]


def test_many_equidistant_lower_index():
    # more tied keys than the tree's k neighbours
    keys = np.concatenate([np.eye(4), -np.eye(4)])[np.random.default_rng(0).permutation(8)]
    m = model_build(_buffer(keys[:, :2], keys[:, 2:], np.zeros((8, 2))))
    q = model_query(m, [0, 0], [0, 0], TASK)
    assert q.index == 0 and q.u == pytest.approx(m.kappa)


@pytest.mark.parametrize("seed", range(10))
def test_matches_linear_scan(seed):
    m = model_build(_random_buffer(seed), kappa=3.0)
    rng = np.random.default_rng(seed + 100)
    q = rng.uniform(-3, 3, (50, 4))
    _, _, u, _, idx = m.query_batch(q[:, :2], q[:, 2:], TASK)
    for row, k, uk in zip(q, idx, u):
        ref, dist = linear_scan(m, row[:2], row[2:])
        assert k == ref and uk == pytest.approx(3.0 * dist, abs=1e-12)


def test_reward_recomputed_from_task():
    m = model_build(_buffer([[0, 0]], [[0, 1]], [[0, 0.1]]))
    assert model_query(m, [0, 0], [0, 1], TaskSpec.angle(0)).r_raw == pytest.approx(1.0)
    assert model_query(m, [0, 0], [0, 1], TaskSpec.angle(180)).r_raw == pytest.approx(-1.0)


_MEM = _random_buffer(7)
_MODEL = model_build(_MEM, kappa=4.0)
coord = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(st.tuples(coord, coord, coord, coord), st.tuples(coord, coord, coord, coord))
def test_penalty_is_kappa_lipschitz(x, y):
    x, y = np.array(x), np.array(y)
    ux = _MODEL.query_batch(x[:2], x[2:], TASK)[2][0]
    uy = _MODEL.query_batch(y[:2], y[2:], TASK)[2][0]
    assert abs(ux - uy) <= 4.0 * np.linalg.norm(x - y) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.tuples(coord, coord, coord, coord))
def test_penalized_reward_never_exceeds_raw(x):
    x = np.array(x)
    _, r_raw, u, r_pen, _ = _MODEL.query_batch(x[:2], x[2:], TASK)
    assert r_pen[0] <= r_raw[0]
    assert (r_pen[0] == r_raw[0]) == (u[0] == 0.0)


def test_rollouts_stay_on_stored_next_states():
    p = make_policy(SPEC, np.random.default_rng(3).normal(size=(9, 2)))
    starts = np.random.default_rng(4).uniform(-2, 2, (16, 2))
    _, _, visited = model_rollout(_MODEL, p, starts, 8, TASK, SPEC)
    stored = {tuple(x) for x in _MEM.s2}
    assert all(tuple(x) in stored for x in visited[1:].reshape(-1, 2))


def test_empty_model_rejected():
    with pytest.raises(ContractError):
        model_build(Buffer.empty(SPEC))
    with pytest.raises(ContractError):
        EpisodicModel(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), 1.0, 0.9, 0.1)


def test_query_dimension_mismatch():
    with pytest.raises(ContractError):
        _MODEL.query_batch(np.zeros((1, 3)), np.zeros((1, 2)), TASK)


def test_default_kappa_is_lipschitz_product():
    assert model_build(_MEM, spec=SPEC).kappa == pytest.approx(SPEC.lipschitz_r * SPEC.lipschitz_T)
