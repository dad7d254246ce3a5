import itertools

import numpy as np
import pytest
from scipy.stats import chisquare

from mocolab import contrastive as C
from mocolab import encoder as enc_mod
from mocolab.contrastive import MocoState, infonce_loss, logits_moco, queue_init
from mocolab.data import BatchViews
from mocolab.encoder import EncoderConfig, build_pair, encoder_forward
from mocolab.engine import SgdState, Tape
from mocolab.errors import ContractError
from mocolab.metrics import MetricsRecord
from mocolab.shuffle_bn import ShardSpec, ShufflePlan, leakage_curves, make_shuffle, shuffled_key_forward

ENC = EncoderConfig(arch="mlp", widths=[12], input_shape=(6,), feature_dim=4, bn_shards=2)


def test_unshuffle_of_shuffle_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((12, 6))
    plan = make_shuffle(12, rng)
    assert np.array_equal(x[plan.perm][plan.inv_perm], x)


def test_eval_mode_encodings_round_trip_bitwise():
    rng = np.random.default_rng(1)
    f_q, _ = build_pair(ENC, rng)
    x = rng.uniform(0, 1, (8, 6))
    plan = make_shuffle(8, rng)
    direct = encoder_forward(f_q, x, "eval").data
    via = encoder_forward(f_q, x[plan.perm], "eval").data[plan.inv_perm]
    np.testing.assert_allclose(via, direct, atol=1e-15, rtol=0)


def test_permutations_are_uniform():
    rng = np.random.default_rng(2)
    index = {p: i for i, p in enumerate(itertools.permutations(range(4)))}
    counts = np.zeros(24)
    for _ in range(12000):
        counts[index[tuple(make_shuffle(4, rng).perm)]] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_plan_is_immutable():
    plan = make_shuffle(6, np.random.default_rng(3))
    with pytest.raises(ValueError):
        plan.perm[0] = 1
    with pytest.raises(AttributeError):
        plan.perm = np.arange(6)


def test_plan_errors():
    with pytest.raises(ContractError):
        make_shuffle(1, np.random.default_rng(0))
    rng = np.random.default_rng(4)
    _, f_k = build_pair(ENC, rng)
    with pytest.raises(ContractError):
        shuffled_key_forward(f_k, rng.uniform(0, 1, (7, 6)), None, ShardSpec(2))
    with pytest.raises(ContractError):
        shuffled_key_forward(f_k, rng.uniform(0, 1, (8, 6)), make_shuffle(6, rng), ShardSpec(2))


def test_rows_still_encode_their_inputs():
    rng = np.random.default_rng(5)
    _, f_k = build_pair(ENC, rng)
    x = rng.uniform(0, 1, (8, 6))
    plan = make_shuffle(8, rng)
    out = shuffled_key_forward(f_k, x, plan, ShardSpec(1)).data
    ref = encoder_forward(f_k, x, "train", shards=1, ).data
    np.testing.assert_allclose(out, ref, atol=1e-12, rtol=0)


def test_single_shard_shuffle_does_not_change_loss():
    rng = np.random.default_rng(6)
    f_q, f_k = build_pair(ENC, rng)
    queue = queue_init(16, 4, rng)
    x_q, x_k = rng.uniform(0, 1, (8, 6)), rng.uniform(0, 1, (8, 6))
    with Tape():
        q = encoder_forward(f_q, x_q, "train", shards=1)
        losses = [
            infonce_loss(logits_moco(q, shuffled_key_forward(f_k, x_k, plan, ShardSpec(1)), queue, 0.07)).item()
            for plan in (None, make_shuffle(8, rng), ShufflePlan.identity(8))
        ]
    assert max(losses) - min(losses) < 1e-12


def test_multi_shard_shuffle_changes_key_statistics():
    rng = np.random.default_rng(7)
    _, f_k = build_pair(ENC, rng)
    x = rng.uniform(0, 1, (8, 6))
    a = shuffled_key_forward(f_k, x, None, ShardSpec(2)).data
    b = shuffled_key_forward(f_k, x, make_shuffle(8, np.random.default_rng(1)), ShardSpec(2)).data
    assert not np.allclose(a, b)


@pytest.mark.parametrize("shuffle", [True, False])
def test_query_path_is_never_permuted(monkeypatch, shuffle):
    rng = np.random.default_rng(8)
    f_q, f_k = build_pair(ENC, rng)
    st = MocoState(f_q, f_k, queue_init(16, 4, rng), SgdState(lr=0.1), rng, shards=ShardSpec(2), shuffle_bn=shuffle)
    x = rng.uniform(0, 1, (8, 6))
    views = BatchViews(np.arange(8), x, x[::-1].copy())
    seen = []
    real = enc_mod.encoder_forward

    def spy(enc, batch, *a, **k):
        seen.append((enc.role, np.array(batch)))
        return real(enc, batch, *a, **k)

    monkeypatch.setattr(C, "encoder_forward", spy)
    monkeypatch.setattr("mocolab.shuffle_bn.encoder_forward", spy)
    C.train_step_moco(st, views)
    roles = dict(seen)
    assert np.array_equal(roles["query"], views.x_q)
    assert np.array_equal(roles["key"], views.x_k) != shuffle


def test_leakage_curves_average_per_epoch():
    recs = [
        MetricsRecord(kind="step", step=0, epoch=0, loss=1.0, pretext_acc=0.2),
        MetricsRecord(kind="step", step=1, epoch=0, loss=1.0, pretext_acc=0.4),
        MetricsRecord(kind="eval", step=1, epoch=0, knn_val_acc=0.5),
        MetricsRecord(kind="step", step=2, epoch=1, loss=1.0, pretext_acc=1.0),
    ]
    assert leakage_curves(recs) == [(0, pytest.approx(0.3), 0.5)]
