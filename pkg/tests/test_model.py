import json

import numpy as np
import pytest

from cladlab import model as m
from cladlab import numcore as nc
from cladlab.exceptions import ConfigError, DimensionError, FormatVersionError


@pytest.fixture
def small_config():
    return m.ModelConfig(input_dim=6, hidden_dims=(8,), feature_dim=5)


def test_config_validation():
    with pytest.raises(ConfigError):
        m.ModelConfig(hidden_dims=())
    with pytest.raises(ConfigError):
        m.ModelConfig(feature_dim=1)


def test_init_is_deterministic(small_config):
    a = m.init_model(small_config, 7, num_classes=3)
    b = m.init_model(small_config, 7, num_classes=3)
    assert m.params_equal(a, b)
    assert not m.params_equal(a, m.init_model(small_config, 8, num_classes=3))


def test_empty_head_before_first_task():
    p = m.init_model(m.ModelConfig(input_dim=16, hidden_dims=(64,), feature_dim=32), 0)
    assert p.head_W.shape == (32, 0) and p.num_classes == 0
    with pytest.raises(ValueError):
        m.logits(p, np.zeros((1, 16)))


def test_init_weight_statistics():
    cfg = m.ModelConfig(input_dim=100, hidden_dims=(100,), feature_dim=2)
    W = m.init_model(cfg, 0).layers[0][0]
    assert W.size == 10_000
    assert abs(W.std() / np.sqrt(2.0 / 100) - 1.0) < 0.2
    assert not m.init_model(cfg, 0).layers[0][1].any()


def test_zero_weights_give_zero_features(small_config):
    p = m.init_model(small_config, 0, 2)
    for a in p.arrays():
        a[...] = 0.0
    assert not m.features(p, np.zeros((3, 6))).any()


def test_batch_consistency(small_config):
    p = m.init_model(small_config, 1, 4)
    x = np.random.default_rng(0).normal(size=(2, 6))
    both = m.logits(p, x)
    # BLAS may round differently per batch size
    np.testing.assert_allclose(both[0], m.logits(p, x[:1])[0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(both[1], m.logits(p, x[1:])[0], rtol=0, atol=1e-12)


def test_features_match_manual_composition(small_config):
    p = m.init_model(small_config, 2, 3)
    x = np.random.default_rng(1).normal(size=(4, 6))
    h = x
    for W, b in p.layers:
        h = nc.relu_forward(nc.affine_forward(h, W, b))
    np.testing.assert_allclose(m.features(p, x), h, rtol=0, atol=0)
    np.testing.assert_allclose(m.logits(p, x), h @ p.head_W + p.head_b, rtol=0, atol=1e-14)


def test_identity_head_reproduces_features():
    cfg = m.ModelConfig(input_dim=3, hidden_dims=(4,), feature_dim=3)
    p = m.init_model(cfg, 0, 3)
    p.head_W = np.eye(3)
    p.head_b = np.zeros(3)
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(m.logits(p, x), m.features(p, x))


def test_input_dim_mismatch(small_config):
    p = m.init_model(small_config, 0, 2)
    with pytest.raises(DimensionError):
        m.features(p, np.zeros((1, 5)))


class TestExpandHead:
    def test_zero_forbidden(self, small_config):
        with pytest.raises(ValueError):
            m.expand_head(m.init_model(small_config, 0, 2), 0, 0)

    def test_old_logits_unchanged(self, small_config):
        p = m.init_model(small_config, 0, 4)
        x = np.random.default_rng(5).normal(size=(7, 6))
        q = m.expand_head(p, 5, 0)
        assert q.num_classes == 9
        np.testing.assert_array_equal(m.logits(q, x)[:, :4], m.logits(p, x))
        assert not q.head_b[4:].any()

    def test_two_step_equals_one_step_for_old_columns(self, small_config):
        p = m.init_model(small_config, 0, 4)
        a = m.expand_head(m.expand_head(p, 3, 1), 2, 1)
        b = m.expand_head(p, 5, 1)
        np.testing.assert_array_equal(a.head_W[:, :4], b.head_W[:, :4])

    def test_reproducible(self, small_config):
        p = m.init_model(small_config, 0, 2)
        np.testing.assert_array_equal(m.expand_head(p, 3, 9).head_W, m.expand_head(p, 3, 9).head_W)


class TestSnapshot:
    def test_unaffected_by_training(self, small_config):
        p = m.init_model(small_config, 0, 3)
        x = np.random.default_rng(0).normal(size=(8, 6))
        y = np.arange(8) % 3
        snap = m.snapshot(p, 1)
        before = m.logits(snap, x)
        arrays = p.arrays()
        vel = [np.zeros_like(a) for a in arrays]
        for _ in range(100):
            feats, out, cache = m.forward(p, x)
            _, d = nc.softmax_cross_entropy(out, y)
            nc.sgd_step(arrays, m.backward(p, feats, cache, dlogits=d), vel, 0.1)
        np.testing.assert_array_equal(m.logits(snap, x), before)
        assert not np.array_equal(m.logits(p, x), before)

    def test_idempotent(self, small_config):
        snap = m.snapshot(m.init_model(small_config, 0, 3), 2)
        assert m.snapshot(snap) == snap

    def test_live_and_snapshot_agree(self, small_config):
        p = m.init_model(small_config, 3, 3)
        x = np.random.default_rng(2).normal(size=(4, 6))
        np.testing.assert_array_equal(m.logits(m.snapshot(p), x), m.logits(p, x))
        np.testing.assert_array_equal(m.features(m.snapshot(p), x), m.features(p, x))

    def test_read_only(self, small_config):
        snap = m.snapshot(m.init_model(small_config, 0, 3))
        with pytest.raises(ValueError):
            snap.params.head_W[0, 0] = 1.0


@pytest.mark.parametrize("head", ["linear", "cosine"])
@pytest.mark.parametrize("relu_features", [True, False])
def test_full_model_ce_gradient(relu_features, head):
    cfg = m.ModelConfig(input_dim=5, hidden_dims=(7, 6), feature_dim=4, relu_features=relu_features,
                        head=head, head_scale=4.0)
    p = m.init_model(cfg, 4, 3)
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, 6)

    def loss(arrays):
        q = m.ModelParams.from_arrays(cfg, arrays)
        return nc.softmax_cross_entropy(m.logits(q, x), y)[0]

    feats, out, cache = m.forward(p, x)
    _, d = nc.softmax_cross_entropy(out, y)
    rep = nc.grad_check(loss, p.arrays(), m.backward(p, feats, cache, dlogits=d))
    assert rep.max_relative_error <= 1e-6


def test_cosine_head_logits_are_bounded():
    cfg = m.ModelConfig(input_dim=5, hidden_dims=(7,), feature_dim=4, head="cosine", head_scale=3.0)
    p = m.init_model(cfg, 0, 6)
    out = m.logits(p, np.random.default_rng(0).normal(size=(20, 5)) * 100)
    assert np.all(np.abs(out) <= 3.0 + 1e-12)


class TestSerialization:
    def test_bit_exact_round_trip(self, small_config):
        p = m.init_model(small_config, 11, 4)
        text = json.dumps(m.params_to_dict(p, 2))
        q, t = m.params_from_dict(json.loads(text))
        assert t == 2 and m.params_equal(p, q)
        assert json.dumps(m.params_to_dict(q, 2)) == text

    def test_empty_head_round_trip(self, small_config):
        p = m.init_model(small_config, 0)
        q, _ = m.params_from_dict(json.loads(json.dumps(m.params_to_dict(p))))
        assert q.head_W.shape == (5, 0)

    def test_newer_version_rejected(self, small_config):
        d = m.params_to_dict(m.init_model(small_config, 0, 1))
        d["format_version"] = m.CHECKPOINT_VERSION + 1
        with pytest.raises(FormatVersionError):
            m.params_from_dict(d)
