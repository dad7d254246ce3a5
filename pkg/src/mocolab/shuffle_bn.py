"""Shuffled batch normalization for the key path.

The key batch is permuted before being split into virtual device shards,
encoded with per-shard BN statistics, then restored to the original order,
so a query and its positive key never share batch statistics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as E
from .encoder import Encoder, encoder_forward
from .engine import Tensor
from .errors import ContractError


@dataclass(frozen=True)
class ShardSpec:
    num_shards: int

    def slices(self, n: int) -> list[slice]:
        return E.shard_slices(n, self.num_shards)

    def assignment(self, n: int) -> np.ndarray:
        if n % self.num_shards:
            raise ContractError(f"batch of {n} is not divisible by {self.num_shards} shards")
        return np.repeat(np.arange(self.num_shards), n // self.num_shards)


@dataclass(frozen=True)
class ShufflePlan:
    perm: np.ndarray
    inv_perm: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "ShufflePlan":
        idx = np.arange(n)
        return cls(idx, idx.copy())


def make_shuffle(n: int, rng: np.random.Generator) -> ShufflePlan:
    if n < 2:
        raise ContractError("shuffling needs a batch of at least 2 samples")
    perm = rng.permutation(n)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(n)
    perm.setflags(write=False)
    inv.setflags(write=False)
    return ShufflePlan(perm, inv)


def shuffled_key_forward(f_k: Encoder, x_k, plan: ShufflePlan | None, shards: ShardSpec,
                         detach: bool = True) -> Tensor:
    """Encode ``x_k`` with train-mode BN computed on shuffled shards.

    Row i of the result always encodes input row i. ``plan=None`` skips the
    shuffle (the ablation's no-shuffle arm). With ``detach=False`` gradients
    flow back through the unshuffle, which the end-to-end mechanism needs.
    """
    x = np.asarray(x_k.data if isinstance(x_k, Tensor) else x_k)
    n = x.shape[0]
    if n % shards.num_shards:
        raise ContractError(f"key batch of {n} is not divisible by {shards.num_shards} shards")
    if plan is None:
        out = encoder_forward(f_k, x, "train", shards=shards.num_shards)
    else:
        if plan.perm.shape != (n,):
            raise ContractError(f"shuffle plan for {plan.perm.shape[0]} rows applied to batch of {n}")
        enc = encoder_forward(f_k, x[plan.perm], "train", shards=shards.num_shards)
        out = E.take_rows(enc, plan.inv_perm)
    return out.detach() if detach else out


def leakage_curves(records) -> list[tuple[int, float, float]]:
    """Per-epoch (epoch, mean pretext accuracy, kNN validation accuracy) rows.

    ``records`` is a run's MetricsRecord stream; epochs without a kNN
    evaluation row are skipped.
    """
    by_epoch: dict[int, list[float]] = {}
    knn: dict[int, float] = {}
    for r in records:
        if r.kind == "step":
            by_epoch.setdefault(r.epoch, []).append(r.pretext_acc)
        elif r.kind == "eval" and r.knn_val_acc is not None:
            knn[r.epoch] = r.knn_val_acc
    return [(e, float(np.mean(by_epoch[e])), knn[e]) for e in sorted(knn) if e in by_epoch]


def leakage_metric(base_cfg, run_with: bool, out_dir=None) -> list[tuple[int, float, float]]:
    """Run ``base_cfg`` with shuffling forced on or off and return its leakage curve."""
    from dataclasses import replace

    from .harness import run_experiment

    cfg = replace(base_cfg, shuffle_bn=bool(run_with))
    result = run_experiment(cfg, out_dir)
    return leakage_curves(result.records)
