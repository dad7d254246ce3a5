import numpy as np
import pytest
from scipy.stats import ortho_group

from mocolab.data import synth_clusters, train_val_split
from mocolab.encoder import EncoderConfig, build_encoder
from mocolab.errors import ConsistencyError, ContractError, DivergenceError
from mocolab.evaluation import (
    FeatureMatrix,
    ProbeConfig,
    extract_features,
    knn_monitor,
    knn_predict,
    linear_probe,
    raw_features,
)


def brute_force_knn(train_x, train_y, val_x, k, temperature):
    tn = train_x / np.linalg.norm(train_x, axis=1, keepdims=True)
    preds = []
    for v in val_x:
        v = v / np.linalg.norm(v)
        sims = [(float(np.dot(v, t)), j) for j, t in enumerate(tn)]
        sims.sort(key=lambda s: -s[0])
        votes = {}
        for s, j in sims[:k]:
            votes[train_y[j]] = votes.get(train_y[j], 0.0) + (1.0 if temperature is None else np.exp(s / temperature))
        best = max(votes.values())
        preds.append(min(c for c, w in votes.items() if w == best))
    return np.array(preds)


@pytest.mark.parametrize("temperature", [0.07, None])
def test_knn_matches_brute_force(temperature):
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((200, 16)), rng.integers(0, 5, 200)
    val = rng.standard_normal((60, 16))
    got = knn_predict(FeatureMatrix(x, y), val, k=20, temperature=temperature)
    np.testing.assert_array_equal(got, brute_force_knn(x, y, val, 20, temperature))


def test_knn_identical_point_k1():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((30, 4)), rng.integers(0, 3, 30)
    assert knn_predict(FeatureMatrix(x, y), x[7:8], k=1)[0] == y[7]


def test_knn_full_k_uniform_is_majority_tie_to_smallest_class():
    rng = np.random.default_rng(2)
    x, y = rng.standard_normal((40, 4)), np.repeat(np.arange(4), 10)
    val = FeatureMatrix(rng.standard_normal((20, 4)), np.repeat(np.arange(4), 5))
    pred = knn_predict(FeatureMatrix(x, y), val.rows, k=40, temperature=None)
    assert np.all(pred == 0)
    assert knn_monitor(FeatureMatrix(x, y), val, k=40, temperature=None) == 0.25


def test_knn_rotation_invariance():
    rng = np.random.default_rng(3)
    x, y = rng.standard_normal((100, 8)), rng.integers(0, 4, 100)
    val = FeatureMatrix(rng.standard_normal((40, 8)), rng.integers(0, 4, 40))
    r = ortho_group.rvs(8, random_state=4)
    a = knn_predict(FeatureMatrix(x, y), val.rows)
    b = knn_predict(FeatureMatrix(x @ r, y), val.rows @ r)
    np.testing.assert_array_equal(a, b)


def test_knn_k_out_of_range():
    fm = FeatureMatrix(np.ones((5, 2)), np.zeros(5, dtype=int))
    with pytest.raises(ContractError):
        knn_predict(fm, np.ones((1, 2)), k=6)
    with pytest.raises(ContractError):
        knn_predict(fm, np.ones((1, 2)), k=0)


def test_feature_matrix_invariants():
    with pytest.raises(ConsistencyError):
        FeatureMatrix(np.zeros((3, 2)), np.zeros(2, dtype=int))
    with pytest.raises(DivergenceError):
        FeatureMatrix(np.array([[np.nan, 0.0]]), np.zeros(1, dtype=int))


def corpus():
    return train_val_split(synth_clusters(10, 120, (32,), 4.0, 1.0, seed=0), 20, seed=0)


def test_extract_features_is_pure_and_unit_norm():
    tr, _ = corpus()
    enc = build_encoder(EncoderConfig(arch="mlp", widths=[32], input_shape=(32,), feature_dim=8), np.random.default_rng(0))
    before = enc.checksum()
    a = extract_features(enc, tr)
    b = extract_features(enc, tr)
    assert np.array_equal(a.rows, b.rows)
    np.testing.assert_allclose(np.linalg.norm(a.rows, axis=1), 1.0, atol=1e-12)
    assert extract_features(enc, tr, tap="pre_projection").rows.shape == (len(tr), 32)
    linear_probe(a, a, ProbeConfig(epochs=1))
    knn_monitor(a, a)
    assert enc.checksum() == before


def test_untrained_encoder_is_above_chance_on_separable_data():
    tr, va = corpus()
    enc = build_encoder(EncoderConfig(arch="mlp", widths=[64], input_shape=(32,), feature_dim=16), np.random.default_rng(1))
    assert knn_monitor(extract_features(enc, tr), extract_features(enc, va)) > 0.5


def test_probe_separable_two_class():
    rng = np.random.default_rng(5)
    y = rng.integers(0, 2, 200)
    x = rng.standard_normal((200, 3))
    x[:, 0] = np.where(y == 1, 3.0, -3.0) + 0.1 * x[:, 0]
    fm = FeatureMatrix(x, y)
    assert linear_probe(fm, fm, ProbeConfig(epochs=10)).accuracy == 1.0


def test_probe_label_shuffle_is_chance():
    tr, va = train_val_split(synth_clusters(10, 300, (32,), 4.0, 1.0, seed=0), 100, seed=0)
    # labels drawn independently of the features on both sides
    rng = np.random.default_rng(6)
    res = linear_probe(FeatureMatrix(tr.samples, rng.permutation(tr.labels)),
                       FeatureMatrix(va.samples, rng.permutation(va.labels)), ProbeConfig(epochs=10))
    assert abs(res.accuracy - 0.10) <= 0.03


def test_probe_column_permutation_changes_accuracy_under_one_point():
    tr, va = corpus()
    perm = np.random.default_rng(7).permutation(32)
    cfg = ProbeConfig(epochs=15)
    a = linear_probe(raw_features(tr), raw_features(va), cfg).accuracy
    b = linear_probe(FeatureMatrix(tr.samples[:, perm], tr.labels), FeatureMatrix(va.samples[:, perm], va.labels),
                     ProbeConfig(epochs=15, seed=1)).accuracy
    assert abs(a - b) < 0.01


def test_probe_divergence_is_reported_not_raised():
    rng = np.random.default_rng(8)
    fm = FeatureMatrix(rng.standard_normal((50, 4)) * 1e300, rng.integers(0, 3, 50))
    res = linear_probe(fm, fm, ProbeConfig(lrs=[30.0], epochs=2))
    assert res.failed and res.best_lr is None


def test_probe_records_grid():
    tr, va = corpus()
    res = linear_probe(raw_features(tr), raw_features(va), ProbeConfig(epochs=3))
    assert set(res.per_lr) == {0.3, 3.0, 30.0} and res.best_lr in res.per_lr
