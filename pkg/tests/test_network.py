import numpy as np
import pytest

from masf import network as N
from masf.losses import cross_entropy
from masf.tensor import NumericDomainError, ShapeError, Tensor


@pytest.fixture
def small():
    return N.ModelConfig(input_dim=16, feature_dims=(8, 4), num_classes=2, metric_dims=(6, 3), seed=7)


def _flat(model):
    return np.concatenate([np.ravel(v) for part in (model.psi, model.theta, model.phi) for v in part.values()])


def test_init_is_deterministic(small):
    assert _flat(N.init(small)).tobytes() == _flat(N.init(small)).tobytes()


def test_init_seeds_differ(small):
    other = N.ModelConfig(**{**small.__dict__, "seed": 8})
    assert np.any(_flat(N.init(small)) != _flat(N.init(other)))


def test_feature_parameter_count(small):
    m = N.init(small)
    assert sum(v.size for v in m.psi.values()) == (16 * 8 + 8) + (8 * 4 + 4)
    assert all(np.all(m.psi[f"b{i}"] == 0) for i in range(2))


def test_init_scale_follows_fan_in():
    cfg = N.ModelConfig(input_dim=400, feature_dims=(300,), num_classes=2, metric_dims=(4,), seed=0)
    w = N.init(cfg).psi["W0"]
    assert abs(w.std() - np.sqrt(2 / 400)) < 0.002
    assert abs(w.mean()) < 0.002


def test_bad_configs():
    with pytest.raises(ValueError):
        N.ModelConfig(input_dim=4, num_classes=1)
    with pytest.raises(ValueError):
        N.ModelConfig(input_dim=4, feature_dims=(0,))


def _zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def test_zero_weights_give_zero_outputs(small):
    m = N.init(small)
    x = np.random.default_rng(0).normal(size=(5, 16))
    assert np.all(N.features(_zeros_like(m.psi), x).data == 0)
    assert np.all(N.logits(_zeros_like(m.theta), np.ones((5, 4))).data == 0)


def test_single_row_shapes(small):
    m = N.init(small)
    h = m.features(np.ones((1, 16)))
    assert h.shape == (1, 4)
    assert m.logits(h).shape == (1, 2)
    assert m.metric_embed(h).shape == (1, 3)


def test_shape_mismatch(small):
    m = N.init(small)
    with pytest.raises(ShapeError):
        m.features(np.ones((2, 15)))
    with pytest.raises(ShapeError):
        m.logits(np.ones((2, 5)))


def test_features_hand_computed_two_layer():
    psi = {
        "W0": np.array([[1.0, -1.0], [2.0, 0.5]]), "b0": np.array([0.5, 0.0]),
        "W1": np.array([[1.0, 0.0], [-1.0, 2.0]]), "b1": np.array([0.0, -1.0]),
    }
    x = np.array([[1.0, 1.0], [-1.0, 2.0]])
    # row 0: [1+2+.5, -1+.5] = [3.5, -0.5] -> relu [3.5, 0] -> [3.5, -1] -> [3.5, 0]
    # row 1: [-1+4+.5, 1+1] = [3.5, 2] -> [3.5-2, 4-1] = [1.5, 3]
    np.testing.assert_array_equal(N.features(psi, x).data, [[3.5, 0.0], [1.5, 3.0]])


def test_logits_hand_computed():
    theta = {"W0": np.array([[1.0, 2.0], [0.0, -1.0]]), "b0": np.array([0.25, 0.0])}
    np.testing.assert_array_equal(N.logits(theta, np.array([[2.0, 3.0]])).data, [[2.25, 1.0]])


def test_metric_embed_hand_computed():
    phi = {"W0": np.array([[3.0, 0.0], [0.0, 4.0]]), "b0": np.zeros(2)}
    e = N.metric_embed(phi, np.array([[1.0, 1.0]])).data
    np.testing.assert_allclose(e, [[0.6, 0.8]], rtol=0, atol=1e-12)


def test_metric_embed_unit_norm_and_distance_range(small):
    m = N.init(small)
    rng = np.random.default_rng(1)
    m = m.replace(phi={k: v + rng.normal(scale=0.1, size=v.shape) for k, v in m.phi.items()})
    h = np.abs(rng.normal(size=(50, 4)))
    e = m.metric_embed(h).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, rtol=0, atol=1e-9)
    d = ((e[:, None] - e[None]) ** 2).sum(-1)
    assert d.min() >= 0 and d.max() <= 4 + 1e-12
    same = m.metric_embed(np.vstack([h[0], h[0]])).data
    assert np.sum((same[0] - same[1]) ** 2) == 0


def test_metric_embed_zero_vector_is_error():
    phi = {"W0": np.zeros((2, 2)), "b0": np.zeros(2)}
    with pytest.raises(NumericDomainError):
        N.metric_embed(phi, np.ones((1, 2)))


def test_permutation_equivariance(small):
    m = N.init(small)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, 16))
    perm = rng.permutation(9)
    out = m.logits(m.features(x)).data
    np.testing.assert_array_equal(m.logits(m.features(x[perm])).data, out[perm])


def test_apply_update_examples():
    p = {"w": np.array(1.0)}
    assert N.apply_update(p, {"w": np.array(0.5)}, 0.1)["w"] == 0.95
    zero = N.apply_update(p, {"w": np.array(0.5)}, 0.0)
    assert zero["w"].tobytes() == p["w"].tobytes()


def test_apply_update_round_trip_and_functional(small):
    m = N.init(small)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(6, 16)), rng.integers(0, 2, 6)
    before = cross_entropy(m.logits(m.features(x)), y).item()
    grads = {k: rng.normal(size=v.shape) for k, v in m.psi.items()}
    snapshot = {k: v.copy() for k, v in m.psi.items()}
    new = N.apply_update(m.psi, grads, 0.1)
    for k in grads:
        np.testing.assert_allclose((m.psi[k] - new[k]) / 0.1, grads[k], rtol=0, atol=1e-12)
        assert m.psi[k].tobytes() == snapshot[k].tobytes()
    assert cross_entropy(m.logits(m.features(x)), y).item() == before


def test_apply_update_misaligned():
    with pytest.raises(ShapeError):
        N.apply_update({"w": np.ones(2)}, {"w": np.ones(3)}, 0.1)
    with pytest.raises(ShapeError):
        N.apply_update({"w": np.ones(2)}, {"v": np.ones(2)}, 0.1)


def test_apply_update_on_tensors():
    out = N.apply_update({"w": Tensor([1.0, 2.0])}, {"w": Tensor([1.0, 1.0])}, 0.5)
    np.testing.assert_array_equal(out["w"].data, [0.5, 1.5])


def test_checkpoint_round_trip(tmp_path, small):
    m = N.init(small)
    path = tmp_path / "m.mgm"
    N.save_checkpoint(m, path)
    raw = path.read_bytes()
    assert raw[:4] == b"MGM1"
    back = N.load_checkpoint(path)
    assert back.config == small
    assert _flat(back).tobytes() == _flat(m).tobytes()
    N.save_checkpoint(back, tmp_path / "again.mgm")
    assert (tmp_path / "again.mgm").read_bytes() == raw


def test_checkpoint_errors(tmp_path, small):
    path = tmp_path / "m.mgm"
    N.save_checkpoint(N.init(small), path)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(N.CheckpointError, match="magic"):
        N.load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-3])
    with pytest.raises(N.CheckpointError, match="truncated"):
        N.load_checkpoint(tmp_path / "short")
