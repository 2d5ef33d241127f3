import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cladlab import model as m
from cladlab.data import LabeledDataset
from cladlab.exceptions import ConsistencyError
from cladlab.numcore import Rng
from cladlab.replay import ReplayBuffer, herding_select, joint_batches, update_buffer


def brute_force_herding(F, R, normalize=True):
    """Greedy herding written from scratch with Python lists."""
    rows = [list(map(float, r)) for r in F]
    if normalize:
        out = []
        for r in rows:
            nrm = sum(v * v for v in r) ** 0.5
            out.append([v / nrm for v in r] if nrm > 0 else r)
        rows = out
    n, d = len(rows), len(rows[0])
    mu = [sum(r[j] for r in rows) / n for j in range(d)]
    chosen, acc = [], [0.0] * d
    for k in range(1, min(R, n) + 1):
        dists = {}
        for i in range(n):
            if i not in chosen:
                dists[i] = sum((mu[j] - (acc[j] + rows[i][j]) / k) ** 2 for j in range(d)) ** 0.5
        low = min(dists.values())
        best_i = min(i for i, v in dists.items() if v <= low + 1e-12 * max(1.0, low))
        chosen.append(best_i)
        acc = [a + v for a, v in zip(acc, rows[best_i])]
    return chosen


@pytest.mark.parametrize("seed", range(20))
def test_herding_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, R, d = rng.integers(1, 13), rng.integers(1, 7), rng.integers(1, 5)
    F = rng.normal(size=(n, d))
    assert herding_select(F, R) == brute_force_herding(F, R)
    assert herding_select(F, R, normalize=False) == brute_force_herding(F, R, normalize=False)


def test_herding_two_points_picks_mean_closest():
    # the mean is (0.5, 0); both single points are equidistant, tie goes to index 0
    assert herding_select([[1.0, 0.0], [0.0, 0.0]], 1, normalize=False) == [0]
    assert herding_select([[1.0, 0.0], [0.2, 0.0], [0.0, 0.0]], 1, normalize=False) == [1]


def test_herding_r_larger_than_class():
    assert sorted(herding_select(np.eye(3), 10)) == [0, 1, 2]


def test_herding_prefix_property():
    F = np.random.default_rng(0).normal(size=(12, 4))
    full = herding_select(F, 6)
    for r in range(1, 6):
        assert herding_select(F, r) == full[:r]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.integers(1, 6))
def test_herding_distinct_indices(seed, n, R):
    F = np.random.default_rng(seed).normal(size=(n, 3))
    out = herding_select(F, R)
    assert len(out) == min(n, R) == len(set(out))
    assert all(0 <= i < n for i in out)


@pytest.fixture
def params():
    return m.init_model(m.ModelConfig(input_dim=4, hidden_dims=(8,), feature_dim=4), 0, 0)


def _task(classes, n=10, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(classes, n)
    return LabeledDataset(rng.normal(size=(y.size, 4)), y)


def test_buffer_update_invariants(params):
    buf = update_buffer(ReplayBuffer(3), _task([0, 1]), params)
    assert buf.classes == [0, 1] and len(buf) == 6
    before = {c: x.copy() for c, (x, _) in buf.per_class.items()}
    buf2 = update_buffer(buf, _task([2, 3], seed=1), params)
    assert buf2.classes == [0, 1, 2, 3]
    for c in (0, 1):
        np.testing.assert_array_equal(buf2.exemplars(c), before[c])
    assert buf.classes == [0, 1]


def test_buffer_rejects_duplicate_class(params):
    buf = update_buffer(ReplayBuffer(2), _task([0]), params)
    with pytest.raises(ConsistencyError):
        update_buffer(buf, _task([0]), params)


def test_zero_memory_stores_nothing(params):
    buf = update_buffer(ReplayBuffer(0), _task([0, 1]), params)
    assert len(buf) == 0 and buf.as_dataset() is None


def test_exemplars_are_training_rows(params):
    task = _task([5], n=15)
    buf = update_buffer(ReplayBuffer(4), task, params)
    x, idx = buf.per_class[5]
    np.testing.assert_array_equal(task.X[idx], x)


def test_buffer_json_round_trip(params):
    buf = update_buffer(ReplayBuffer(3), _task([0, 2]), params)
    back = ReplayBuffer.from_dict(json.loads(json.dumps(buf.to_dict())))
    assert back.classes == buf.classes
    for c in buf.classes:
        np.testing.assert_array_equal(back.exemplars(c), buf.exemplars(c))
        np.testing.assert_array_equal(back.per_class[c][1], buf.per_class[c][1])


def test_joint_batches_cover_everything_once(params):
    task = _task([2, 3], n=7)
    buf = update_buffer(ReplayBuffer(2), _task([0, 1]), params)
    batches = list(joint_batches(task, buf, 4, Rng(0).generator))
    sizes = [len(b.y) for b in batches]
    assert sum(sizes) == 14 + 4 and all(s == 4 for s in sizes[:-1])
    ys = np.concatenate([b.y for b in batches])
    assert sorted(ys.tolist()) == sorted(task.y.tolist() + [0, 0, 1, 1])
    tags = np.concatenate([b.is_exemplar for b in batches])
    assert set(ys[tags]) == {0, 1} and set(ys[~tags]) == {2, 3}


def test_joint_batches_uniform_mixing():
    # exemplar share per batch should match its overall share on average
    task = LabeledDataset(np.zeros((400, 1)), np.ones(400, dtype=int))
    buf = ReplayBuffer(100, {0: (np.zeros((100, 1)), np.arange(100))})
    rng = Rng(3).generator
    shares = [b.is_exemplar.mean() for _ in range(20) for b in joint_batches(task, buf, 50, rng)]
    assert abs(np.mean(shares) - 0.2) < 0.02
