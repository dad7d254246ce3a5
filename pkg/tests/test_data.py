import struct

import numpy as np
import pytest

from mocolab.data import (
    AugmentationConfig,
    Dataset,
    augment_batch,
    augment_two_views,
    load_idx,
    make_views,
    minibatches,
    prefetch,
    synth_clusters,
    train_val_split,
    write_idx,
)
from mocolab.errors import ConsistencyError, ContractError, FormatError, TruncatedFileError
from mocolab.evaluation import knn_monitor, raw_features

ZERO_AUG = AugmentationConfig(crop_pad=0, flip_prob=0, jitter_strength=0, grayscale_prob=0,
                              vector_noise_sigma=0, vector_dropout_prob=0)


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


# ---------------------------------------------------------------- IDX

def test_idx_header_decode_and_scaling(tmp_path):
    payload = np.zeros(2 * 28 * 28, dtype=np.uint8)
    payload[0], payload[-1] = 255, 128
    (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 28, 28), payload))
    (tmp_path / "lab").write_bytes(idx_bytes(0x801, (2,), [3, 7]))
    ds = load_idx(tmp_path / "img", tmp_path / "lab")
    assert len(ds) == 2 and ds.sample_shape == (1, 28, 28)
    assert ds.samples[0, 0, 0, 0] == 1.0 and ds.samples[0, 0, 0, 1] == 0.0
    assert ds.samples[1, 0, 27, 27] == 128 / 255
    assert list(ds.labels) == [3, 7]


def test_idx_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    img = idx_bytes(0x803, (100, 28, 28), rng.integers(0, 256, 100 * 28 * 28, dtype=np.uint8))
    lab = idx_bytes(0x801, (100,), rng.integers(0, 10, 100, dtype=np.uint8))
    (tmp_path / "a.img").write_bytes(img)
    (tmp_path / "a.lab").write_bytes(lab)
    first = load_idx(tmp_path / "a.img", tmp_path / "a.lab")
    write_idx(first, tmp_path / "b.img", tmp_path / "b.lab")
    assert (tmp_path / "b.img").read_bytes() == img
    assert (tmp_path / "b.lab").read_bytes() == lab
    second = load_idx(tmp_path / "b.img", tmp_path / "b.lab")
    assert np.array_equal(first.samples, second.samples)
    assert np.array_equal(first.labels, second.labels)


def test_idx_bad_magic(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(0x0D03, (1, 2, 2), [0] * 4))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "img")
    (tmp_path / "ok").write_bytes(idx_bytes(0x803, (1, 2, 2), [0] * 4))
    (tmp_path / "lab").write_bytes(idx_bytes(0x803, (1, 2, 2), [0] * 4))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "ok", tmp_path / "lab")


@pytest.mark.parametrize("cut", [2, 9, 20])
def test_idx_truncation(tmp_path, cut):
    raw = idx_bytes(0x803, (2, 3, 3), range(18))
    (tmp_path / "img").write_bytes(raw[:-cut] if cut < len(raw) - 4 else raw[:cut])
    with pytest.raises(TruncatedFileError):
        load_idx(tmp_path / "img")
    assert issubclass(TruncatedFileError, OSError)


def test_idx_count_mismatch(tmp_path):
    (tmp_path / "img").write_bytes(idx_bytes(0x803, (2, 2, 2), [0] * 8))
    (tmp_path / "lab").write_bytes(idx_bytes(0x801, (3,), [0, 1, 2]))
    with pytest.raises(ConsistencyError):
        load_idx(tmp_path / "img", tmp_path / "lab")


# ---------------------------------------------------------------- synthetic corpus

def test_synth_noiseless_classes_are_constant():
    ds = synth_clusters(3, 5, (8,), 2.0, 0.0, seed=1)
    for c in range(3):
        rows = ds.samples[ds.labels == c]
        assert np.all(rows == rows[0])


def test_synth_is_seed_deterministic():
    a = synth_clusters(4, 10, (1, 6, 6), 3.0, 1.0, seed=5)
    b = synth_clusters(4, 10, (1, 6, 6), 3.0, 1.0, seed=5)
    c = synth_clusters(4, 10, (1, 6, 6), 3.0, 1.0, seed=6)
    assert np.array_equal(a.samples, b.samples) and not np.array_equal(a.samples, c.samples)
    assert a.samples.min() >= 0 and a.samples.max() <= 1


def test_synth_requires_two_classes():
    with pytest.raises(ContractError):
        synth_clusters(1, 5, (4,), 1.0, 1.0, 0)


@pytest.mark.parametrize("ratio,lo,hi", [(4.0, 0.95, 1.0), (0.5, 0.0, 0.2)])
def test_raw_knn_calibration(ratio, lo, hi):
    full = synth_clusters(10, 600, (32,), ratio, 1.0, seed=0)
    tr, va = train_val_split(full, 100, seed=0)
    acc = knn_monitor(raw_features(tr), raw_features(va))
    assert lo <= acc <= hi


def test_nuisance_views_lower_raw_knn_without_touching_labels():
    nu = AugmentationConfig(crop_pad=2, flip_prob=0.5, jitter_strength=0.4, grayscale_prob=0)
    clean = synth_clusters(10, 120, (1, 12, 12), 8.0, 1.0, seed=0)
    dirty = synth_clusters(10, 120, (1, 12, 12), 8.0, 1.0, seed=0, nuisance=nu)
    assert np.array_equal(clean.labels, dirty.labels)
    accs = [knn_monitor(*map(raw_features, train_val_split(d, 20, 0))) for d in (clean, dirty)]
    assert accs[1] < accs[0] - 0.1


def test_split_is_stratified_and_reads_no_labels_property():
    full = synth_clusters(5, 20, (4,), 2.0, 1.0, seed=0)
    tr, va = train_val_split(full, 4, seed=0)
    assert full.label_reads == 0
    assert len(tr) == 80 and len(va) == 20
    assert np.all(np.bincount(va.labels) == 4)


def test_dataset_invariants():
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((3, 2)), labels=[0, 1])
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((3, 2)), ids=[0, 0, 2])
    ds = Dataset(np.zeros((3, 2)), labels=[0, 1, 1])
    ds.labels
    assert ds.label_reads == 1


# ---------------------------------------------------------------- augmentation

def test_zero_config_is_identity():
    rng = np.random.default_rng(0)
    for x in (rng.uniform(0, 1, (4, 10)), rng.uniform(0, 1, (4, 3, 6, 6))):
        q, k = augment_two_views(x[0], ZERO_AUG, rng)
        assert np.array_equal(q, x[0]) and np.array_equal(k, x[0])


def test_independent_streams_give_different_views():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (6, 3, 8, 8))
    a = augment_batch(x, AugmentationConfig(), np.random.default_rng(10))
    b = augment_batch(x, AugmentationConfig(), np.random.default_rng(11))
    assert not np.array_equal(a, b)


def test_pad_crop_is_a_bounded_translate():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 1, (20, 1, 28, 28))
    cfg = AugmentationConfig(crop_pad=4, flip_prob=0, jitter_strength=0, grayscale_prob=0)
    out = augment_batch(x, cfg, rng)
    assert out.shape == x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (4, 4), (4, 4)))
    for i in range(len(x)):
        matches = [(dy, dx) for dy in range(9) for dx in range(9)
                   if np.array_equal(out[i], padded[i, :, dy:dy + 28, dx:dx + 28])]
        assert len(matches) == 1


def test_vector_augmentation_clamps_and_drops():
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 1, (200, 16))
    out = augment_batch(x, AugmentationConfig(vector_noise_sigma=0.5, vector_dropout_prob=0.3), rng)
    assert out.min() >= 0 and out.max() <= 1
    assert 0.2 < np.mean(out == 0) < 0.5


def test_grayscale_makes_channels_equal():
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (5, 3, 4, 4))
    cfg = AugmentationConfig(crop_pad=0, flip_prob=0, jitter_strength=0, grayscale_prob=1.0)
    out = augment_batch(x, cfg, rng)
    assert np.allclose(out[:, 0], out[:, 1]) and np.allclose(out[:, 1], out[:, 2])


def test_augmentation_config_validation():
    with pytest.raises(ContractError):
        AugmentationConfig(flip_prob=1.5)
    with pytest.raises(ContractError):
        AugmentationConfig(crop_pad=-1)


def test_views_do_not_depend_on_preparation_order():
    ds = synth_clusters(2, 8, (6,), 2.0, 1.0, seed=0)
    ids = np.arange(4)
    late = make_views(ds, ids, AugmentationConfig(), seed=3, epoch=1, batch=2)
    make_views(ds, ids, AugmentationConfig(), seed=3, epoch=0, batch=0)
    again = make_views(ds, ids, AugmentationConfig(), seed=3, epoch=1, batch=2)
    assert np.array_equal(late.x_q, again.x_q) and np.array_equal(late.x_k, again.x_k)
    assert not np.array_equal(late.x_q, late.x_k)


# ---------------------------------------------------------------- batching

def test_minibatches_drop_tail_and_cover_ids_once():
    ds = Dataset(np.zeros((10, 2)))
    batches = minibatches(ds, 3, epoch_seed=7)
    assert [len(b) for b in batches] == [3, 3, 3]
    flat = np.concatenate(batches)
    assert len(set(flat)) == 9
    assert all(np.array_equal(a, b) for a, b in zip(batches, minibatches(ds, 3, epoch_seed=7)))
    with pytest.raises(ContractError):
        minibatches(ds, 11, 0)


def test_epoch_shuffle_gives_roughly_balanced_batches():
    full = synth_clusters(4, 64, (4,), 2.0, 1.0, seed=0)
    counts = np.array([np.bincount(full.labels[b], minlength=4) for b in minibatches(full, 64, 1)])
    assert counts.sum() == 256 and counts.min() >= 6


def test_prefetch_preserves_order_and_raises():
    assert list(prefetch(iter(range(20)), depth=2)) == list(range(20))

    def bad():
        yield 1
        raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="boom"):
        list(prefetch(bad()))
