"""InfoNCE and the three dictionary mechanisms: MoCo, end-to-end, memory bank.

Every mechanism exposes a ``train_step_*`` that consumes the same
:class:`~mocolab.data.BatchViews` and returns a
:class:`~mocolab.metrics.MetricsRecord`.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .data import BatchViews
from .encoder import Encoder, encoder_forward, momentum_update, param_distance
from .engine import SgdState, Tape, Tensor
from .errors import ContractError, DimensionError, DivergenceError
from .metrics import MetricsRecord
from .shuffle_bn import ShardSpec, make_shuffle, shuffled_key_forward


# ---------------------------------------------------------------- key queue

class KeyQueue:
    """Fixed-capacity FIFO of unit-norm keys stored as the columns of a C x K matrix.

    ``tags`` records the training step at which each column was written
    (-1 for warm-start filler), which gives key ages for free.
    """

    def __init__(self, capacity: int, feature_dim: int):
        if capacity < 1 or feature_dim < 2:
            raise ContractError("queue needs K >= 1 and C >= 2")
        self.capacity = capacity
        self.feature_dim = feature_dim
        self.buffer = np.zeros((feature_dim, capacity))
        self.tags = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.filled = 0

    def keys(self) -> np.ndarray:
        """Current dictionary as C x filled (all K columns once warm)."""
        return self.buffer[:, :self.filled]

    def ages(self, step: int) -> np.ndarray:
        tags = self.tags[:self.filled]
        return step - tags[tags >= 0]

    def mean_age(self, step: int) -> float:
        a = self.ages(step)
        return float(a.mean()) if a.size else 0.0


def queue_init(capacity: int, feature_dim: int, rng: np.random.Generator, mode: str = "warm") -> KeyQueue:
    """``warm`` fills the queue with random unit columns; ``fill_first`` starts empty."""
    q = KeyQueue(capacity, feature_dim)
    if mode == "warm":
        buf = rng.standard_normal((feature_dim, capacity))
        q.buffer = buf / np.linalg.norm(buf, axis=0, keepdims=True)
        q.filled = capacity
    elif mode != "fill_first":
        raise ContractError(f"unknown queue init mode {mode!r}")
    return q


def enqueue_dequeue(queue: KeyQueue, keys, step: int = -1) -> None:
    """Overwrite the oldest N columns with ``keys`` (N x C) and advance the cursor."""
    k = keys.data if isinstance(keys, Tensor) else np.asarray(keys)
    if isinstance(keys, Tensor) and keys.requires_grad:
        raise ContractError("enqueued keys must be detached")
    n = k.shape[0]
    if k.ndim != 2 or k.shape[1] != queue.feature_dim:
        raise DimensionError(f"keys of shape {k.shape} do not match queue feature dim {queue.feature_dim}")
    if n > queue.capacity:
        raise ContractError(f"cannot enqueue {n} keys into a queue of capacity {queue.capacity}")
    pos = (queue.cursor + np.arange(n)) % queue.capacity
    queue.buffer[:, pos] = k.T
    queue.tags[pos] = step
    queue.cursor = int((queue.cursor + n) % queue.capacity)
    queue.filled = min(queue.capacity, queue.filled + n)


# ---------------------------------------------------------------- logits and loss

def logits_moco(q: Tensor, k_pos: Tensor, queue: KeyQueue, tau: float) -> Tensor:
    """N x (1+K) logits: the positive in column 0, then one column per queued key."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    if k_pos.requires_grad:
        raise ContractError("positive keys must be detached")
    if q.shape != k_pos.shape or q.shape[1] != queue.feature_dim:
        raise ContractError(f"query {q.shape}, key {k_pos.shape} and queue dim {queue.feature_dim} disagree")
    l_pos = E.batched_dot(q, k_pos)
    l_neg = E.matmul(q, Tensor(queue.keys().copy()))
    return E.scale(E.concat_cols([l_pos, l_neg]), 1.0 / tau)


def logits_end_to_end(q: Tensor, k: Tensor, tau: float) -> Tensor:
    """N x N logits: own key first, then the other N-1 keys of the batch."""
    if q.shape != k.shape:
        raise ContractError(f"query {q.shape} and key {k.shape} shapes differ")
    n = q.shape[0]
    sim = E.matmul(q, E.transpose(k))
    others = np.array([[j for j in range(n) if j != i] for i in range(n)], dtype=np.int64).reshape(n, n - 1)
    order = np.concatenate([np.arange(n)[:, None], others], axis=1)
    return E.scale(E.gather_cols(sim, order), 1.0 / tau)


def infonce_loss(logits: Tensor) -> Tensor:
    """Mean InfoNCE over rows of temperature-scaled logits with the positive at index 0."""
    return E.softmax_cross_entropy(logits, np.zeros(logits.shape[0], dtype=np.int64))


def pretext_accuracy(logits: Tensor) -> float:
    return float(np.mean(np.argmax(logits.data, axis=1) == 0))


def _finite_loss(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {step}")
    return value


def _optimize(params: list[Tensor], loss: Tensor, tape: Tape, opt: SgdState) -> None:
    for p in params:
        p.grad = None
    E.backward(loss, tape)
    E.sgd_step(params, [p.grad for p in params], opt)


# ---------------------------------------------------------------- MoCo

@dataclass
class MocoState:
    f_q: Encoder
    f_k: Encoder
    queue: KeyQueue
    opt: SgdState
    rng: np.random.Generator
    m: float = 0.999
    tau: float = 0.07
    shards: ShardSpec = field(default_factory=lambda: ShardSpec(4))
    shuffle_bn: bool = True
    step: int = 0
    last_tape: Tape | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if not 0.0 <= self.m < 1.0:
            raise ContractError("momentum m must lie in [0, 1)")


def train_step_moco(st: MocoState, views: BatchViews) -> MetricsRecord:
    """One iteration of the queue + momentum-encoder loop.

    Order: query forward, shuffled key forward (detached), InfoNCE, SGD on
    f_q, momentum update of f_k, enqueue the new keys.
    """
    t0 = time.perf_counter()
    n = views.x_q.shape[0]
    with Tape() as tape:
        q = encoder_forward(st.f_q, views.x_q, "train", shards=st.shards.num_shards)
        plan = make_shuffle(n, st.rng) if st.shuffle_bn else None
        k = shuffled_key_forward(st.f_k, views.x_k, plan, st.shards)
        logits = logits_moco(q, k, st.queue, st.tau)
        loss = infonce_loss(logits)
    value = _finite_loss(loss, st.step)
    age = st.queue.mean_age(st.step)
    _optimize(st.f_q.parameters(), loss, tape, st.opt)
    momentum_update(st.f_k, st.f_q, st.m)
    # a dictionary smaller than the batch keeps only the newest K keys
    enqueue_dequeue(st.queue, k if n <= st.queue.capacity else Tensor(k.data[-st.queue.capacity:]), st.step)
    st.last_tape = tape
    rec = MetricsRecord(
        kind="step", step=st.step, epoch=views.epoch, loss=value,
        pretext_acc=pretext_accuracy(logits), param_distance=param_distance(st.f_q, st.f_k),
        key_age=age, lr=st.opt.lr, wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    st.step += 1
    return rec


# ---------------------------------------------------------------- end-to-end

@dataclass
class EndToEndState:
    f_q: Encoder
    f_k: Encoder | None  # None: both towers share f_q's weights
    opt: SgdState
    rng: np.random.Generator
    tau: float = 0.07
    shards: ShardSpec = field(default_factory=lambda: ShardSpec(4))
    shuffle_bn: bool = True
    step: int = 0
    last_tape: Tape | None = None

    @property
    def key_encoder(self) -> Encoder:
        return self.f_q if self.f_k is None else self.f_k

    def parameters(self) -> list[Tensor]:
        params = self.f_q.parameters()
        return params if self.f_k is None else params + self.f_k.parameters()


def train_step_end_to_end(st: EndToEndState, views: BatchViews) -> MetricsRecord:
    """In-batch negatives (K_eff = N - 1); gradients flow through both towers."""
    t0 = time.perf_counter()
    n = views.x_q.shape[0]
    if n < 2:
        raise ContractError("end-to-end needs at least 2 samples per batch")
    with Tape() as tape:
        q = encoder_forward(st.f_q, views.x_q, "train", shards=st.shards.num_shards)
        plan = make_shuffle(n, st.rng) if st.shuffle_bn else None
        k = shuffled_key_forward(st.key_encoder, views.x_k, plan, st.shards, detach=False)
        logits = logits_end_to_end(q, k, st.tau)
        loss = infonce_loss(logits)
    value = _finite_loss(loss, st.step)
    _optimize(st.parameters(), loss, tape, st.opt)
    st.last_tape = tape
    dist = 0.0 if st.f_k is None else param_distance(st.f_q, st.f_k)
    rec = MetricsRecord(
        kind="step", step=st.step, epoch=views.epoch, loss=value,
        pretext_acc=pretext_accuracy(logits), param_distance=dist, key_age=0.0,
        lr=st.opt.lr, wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    st.step += 1
    return rec


# ---------------------------------------------------------------- memory bank

class MemoryBank:
    """One unit-norm feature row per dataset sample, refreshed by feature-level EMA."""

    def __init__(self, features: np.ndarray, feature_momentum: float = 0.5):
        if not 0.0 <= feature_momentum < 1.0:
            raise ContractError("feature_momentum must lie in [0, 1)")
        self.features = np.asarray(features, dtype=np.float64)
        self.feature_momentum = feature_momentum
        self.last_update_step = np.zeros(self.features.shape[0], dtype=np.int64)

    @classmethod
    def random(cls, size: int, feature_dim: int, rng: np.random.Generator, feature_momentum: float = 0.5) -> "MemoryBank":
        f = rng.standard_normal((size, feature_dim))
        return cls(f / np.linalg.norm(f, axis=1, keepdims=True), feature_momentum)

    def __len__(self) -> int:
        return self.features.shape[0]


def sample_negative_ids(bank: MemoryBank, exclude, k: int, rng: np.random.Generator) -> np.ndarray:
    exclude = np.unique(np.asarray(exclude, dtype=np.int64))
    if k > len(bank) - exclude.size:
        raise ContractError(f"cannot draw {k} negatives from {len(bank) - exclude.size} eligible rows")
    mask = np.ones(len(bank), dtype=bool)
    mask[exclude] = False
    return rng.choice(np.flatnonzero(mask), size=k, replace=False)


def bank_sample_negatives(bank: MemoryBank, exclude, k: int, rng: np.random.Generator) -> Tensor:
    """K x C detached negatives drawn uniformly without replacement, never from ``exclude``."""
    return Tensor(bank.features[sample_negative_ids(bank, exclude, k, rng)])


def bank_update(bank: MemoryBank, indices, feats, step: int = 0) -> None:
    """row <- normalize(fm * row + (1 - fm) * feat) for each index."""
    idx = np.asarray(indices, dtype=np.int64)
    f = feats.data if isinstance(feats, Tensor) else np.asarray(feats)
    fm = bank.feature_momentum
    mixed = fm * bank.features[idx] + (1.0 - fm) * f
    norms = np.linalg.norm(mixed, axis=1, keepdims=True)
    if np.any(norms < E.NORM_FLOOR):
        raise E.DegenerateFeatureError("memory bank update produced a zero row")
    bank.features[idx] = mixed / norms
    bank.last_update_step[idx] = step


@dataclass
class MemoryBankState:
    f_q: Encoder
    bank: MemoryBank
    opt: SgdState
    rng: np.random.Generator
    k: int = 1024
    tau: float = 0.07
    shards: ShardSpec = field(default_factory=lambda: ShardSpec(4))
    step: int = 0
    last_tape: Tape | None = None


def train_step_memory_bank(st: MemoryBankState, views: BatchViews, sample_indices=None) -> MetricsRecord:
    """Positives are the bank rows of the batch's own samples, negatives K random rows.

    The bank is refreshed with this step's query features after the update.
    Only the query view is encoded; ``x_k`` is unused by this mechanism.
    """
    t0 = time.perf_counter()
    ids = np.asarray(views.ids if sample_indices is None else sample_indices, dtype=np.int64)
    neg_ids = sample_negative_ids(st.bank, ids, st.k, st.rng)
    staleness = float(np.mean(st.step - st.bank.last_update_step[neg_ids]))
    with Tape() as tape:
        q = encoder_forward(st.f_q, views.x_q, "train", shards=st.shards.num_shards)
        pos = Tensor(st.bank.features[ids])
        neg = Tensor(st.bank.features[neg_ids].T)
        logits = E.scale(E.concat_cols([E.batched_dot(q, pos), E.matmul(q, neg)]), 1.0 / st.tau)
        loss = infonce_loss(logits)
    value = _finite_loss(loss, st.step)
    _optimize(st.f_q.parameters(), loss, tape, st.opt)
    bank_update(st.bank, ids, q.data, st.step)
    st.last_tape = tape
    rec = MetricsRecord(
        kind="step", step=st.step, epoch=views.epoch, loss=value,
        pretext_acc=pretext_accuracy(logits), param_distance=0.0, key_age=staleness,
        lr=st.opt.lr, wall_ms=(time.perf_counter() - t0) * 1e3,
    )
    st.step += 1
    return rec
