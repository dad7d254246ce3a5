"""Frozen-feature evaluation: weighted kNN monitor and linear probe."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import engine as E
from .data import Dataset
from .encoder import Encoder, encoder_forward
from .engine import SgdState, Tape, Tensor
from .errors import ConsistencyError, ContractError, DivergenceError


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray
    tap: str = "projection_output"

    def __post_init__(self):
        if self.rows.shape[0] != self.labels.shape[0]:
            raise ConsistencyError("feature rows and labels are not aligned")
        if not np.all(np.isfinite(self.rows)):
            raise DivergenceError("feature matrix contains non-finite values")


def extract_features(enc: Encoder, ds: Dataset, tap: str = "projection_output", chunk: int = 1000) -> FeatureMatrix:
    """Eval-mode BN, no augmentation, no tape."""
    parts = []
    for i in range(0, len(ds), chunk):
        parts.append(encoder_forward(enc, ds.samples[i:i + chunk], "eval", tap=tap).data)
    return FeatureMatrix(np.concatenate(parts, axis=0), ds.labels, tap)


def raw_features(ds: Dataset) -> FeatureMatrix:
    return FeatureMatrix(ds.samples.reshape(len(ds), -1).copy(), ds.labels, "raw")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, E.NORM_FLOOR)


def knn_predict(train: FeatureMatrix, queries: np.ndarray, k: int = 20, temperature: float | None = 0.07,
                chunk: int = 500) -> np.ndarray:
    n_train = train.rows.shape[0]
    if not 1 <= k <= n_train:
        raise ContractError(f"k={k} must lie in [1, {n_train}]")
    bank = _unit_rows(train.rows)
    n_classes = int(train.labels.max()) + 1
    preds = []
    for i in range(0, queries.shape[0], chunk):
        sim = _unit_rows(queries[i:i + chunk]) @ bank.T
        if k < n_train:
            top = np.argpartition(-sim, k - 1, axis=1)[:, :k]
        else:
            top = np.broadcast_to(np.arange(n_train), sim.shape)
        top_sim = np.take_along_axis(sim, top, axis=1)
        w = np.ones_like(top_sim) if temperature is None else np.exp(top_sim / temperature)
        votes = np.zeros((top.shape[0], n_classes))
        np.add.at(votes, (np.arange(top.shape[0])[:, None].repeat(k, 1), train.labels[top]), w)
        preds.append(np.argmax(votes, axis=1))
    return np.concatenate(preds)


def knn_monitor(fm_train: FeatureMatrix, fm_val: FeatureMatrix, k: int = 20, temperature: float | None = 0.07) -> float:
    """Similarity-weighted k-nearest-neighbour accuracy under cosine similarity.

    Ties in the vote go to the smallest class id.
    """
    pred = knn_predict(fm_train, fm_val.rows, k, temperature)
    return float(np.mean(pred == fm_val.labels))


@dataclass
class ProbeConfig:
    lrs: list[float] = field(default_factory=lambda: [0.3, 3.0, 30.0])
    weight_decay: float = 0.0
    epochs: int = 30
    batch: int = 256
    momentum: float = 0.9
    seed: int = 0


@dataclass
class ProbeResult:
    accuracy: float
    best_lr: float | None
    per_lr: dict[float, float]

    @property
    def failed(self) -> bool:
        return math.isnan(self.accuracy)


def _train_probe(fm_train: FeatureMatrix, fm_val: FeatureMatrix, lr: float, cfg: ProbeConfig) -> float:
    rng = np.random.default_rng(cfg.seed)
    x, y = fm_train.rows, fm_train.labels
    n, f = x.shape
    n_classes = int(max(y.max(), fm_val.labels.max())) + 1
    bound = 1.0 / math.sqrt(f)
    w = Tensor(rng.uniform(-bound, bound, (f, n_classes)), requires_grad=True, name="probe.w")
    b = Tensor(np.zeros(n_classes), requires_grad=True, name="probe.b")
    opt = SgdState(lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    batch = min(cfg.batch, n)
    for epoch in range(cfg.epochs):
        # cosine decay over the probe schedule
        opt.lr = lr * 0.5 * (1 + math.cos(math.pi * epoch / cfg.epochs))
        order = rng.permutation(n)
        for i in range(0, n, batch):
            idx = order[i:i + batch]
            with Tape() as tape:
                loss = E.softmax_cross_entropy(E.linear(Tensor(x[idx]), w, b), y[idx])
            if not math.isfinite(loss.item()):
                return float("nan")
            w.grad = b.grad = None
            E.backward(loss, tape)
            try:
                E.sgd_step([w, b], [w.grad, b.grad], opt)
            except DivergenceError:
                return float("nan")
    logits = fm_val.rows @ w.data + b.data
    if not np.all(np.isfinite(logits)):
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=1) == fm_val.labels))


def linear_probe(fm_train: FeatureMatrix, fm_val: FeatureMatrix, cfg: ProbeConfig | None = None) -> ProbeResult:
    """Softmax regression on frozen features, best top-1 over the lr grid.

    A diverged grid point is recorded as NaN; the probe only fails when every
    grid point diverges.
    """
    cfg = cfg or ProbeConfig()
    if fm_train.rows.shape[1] != fm_val.rows.shape[1]:
        raise ContractError("train and val features have different widths")
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is an expected outcome here
        per_lr = {lr: _train_probe(fm_train, fm_val, lr, cfg) for lr in cfg.lrs}
    finite = {lr: a for lr, a in per_lr.items() if not math.isnan(a)}
    if not finite:
        return ProbeResult(float("nan"), None, per_lr)
    best = max(finite, key=lambda lr: (finite[lr], -lr))
    return ProbeResult(finite[best], best, per_lr)
