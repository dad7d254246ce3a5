"""Finite-difference gradient suite for every differentiable engine op.

Each case builds random inputs, evaluates a scalar function of the op's
output on a fresh tape, and compares the analytic gradient of every input
against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import engine as E
from .engine import BnState, Tape, Tensor

FD_EPS = 1e-5


@dataclass
class GradCheckResult:
    op: str
    instances: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def check_gradients(build: Callable[[list[Tensor]], Tensor], arrays: list[np.ndarray], eps: float = FD_EPS) -> float:
    """Max relative error between backward() and central differences.

    ``build`` maps leaf tensors to an output tensor; the scalar objective is
    a fixed random projection of that output so every element contributes.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    probe_rng = np.random.default_rng(12345)
    with Tape():
        shape = build([Tensor(a) for a in arrays]).shape
    weights = Tensor(probe_rng.standard_normal(shape))

    def objective(ts):
        out = build(ts)
        flat = E.reshape(out, (1, -1))
        return E.matmul(flat, E.reshape(weights, (-1, 1)))

    with Tape() as tape:
        loss = E.reshape(objective(leaves), ())
    E.backward(loss, tape)

    def f():
        return objective([Tensor(a) for a in arrays]).item()

    numeric = E.finite_diff_grad(f, arrays, eps)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(num) for leaf, num in zip(leaves, numeric)]
    # one scale for the whole instance: a bias feeding BN legitimately has a zero gradient
    return E.relative_error(np.concatenate([a.ravel() for a in analytic]),
                            np.concatenate([n.ravel() for n in numeric]))


def _bn(rng, shards):
    c = 3
    st = BnState.create(c)
    st.gamma.data[:] = rng.uniform(0.5, 1.5, c)
    st.beta.data[:] = rng.standard_normal(c)

    def build(ts):
        x, g, b = ts
        local = BnState(g, b, st.running_mean.copy(), st.running_var.copy())
        return E.batch_norm(x, local, "train", E.shard_slices(x.shape[0], shards), update_stats=False)

    return build, [rng.standard_normal((8, c)) * 2 + 1, st.gamma.data.copy(), st.beta.data.copy()]


def _cases() -> dict[str, tuple[Callable, float]]:
    """op name -> (instance factory(rng) -> (build, arrays), tolerance)."""

    def matmul(rng):
        return (lambda ts: E.matmul(*ts)), [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]

    def batched_dot(rng):
        return (lambda ts: E.batched_dot(*ts)), [rng.standard_normal((5, 7)), rng.standard_normal((5, 7))]

    def conv(rng):
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        return ((lambda ts: E.conv2d(ts[0], ts[1], stride, pad)),
                [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))])

    def relu(rng):
        x = rng.standard_normal((4, 5))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        return (lambda ts: E.relu(ts[0])), [x]

    def gap(rng):
        return (lambda ts: E.global_avg_pool(ts[0])), [rng.standard_normal((2, 3, 4, 4))]

    def linear(rng):
        return (lambda ts: E.linear(*ts)), [rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5)]

    def bn1(rng):
        return _bn(rng, 1)

    def bn2(rng):
        return _bn(rng, 2)

    def bn4d(rng):
        st = BnState.create(2)

        def build(ts):
            x, g, b = ts
            local = BnState(g, b, st.running_mean.copy(), st.running_var.copy())
            return E.batch_norm(x, local, "train", E.shard_slices(4, 2), update_stats=False)

        return build, [rng.standard_normal((4, 2, 3, 3)), rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)]

    def l2n(rng):
        return (lambda ts: E.l2_normalize(ts[0])), [rng.standard_normal((4, 6))]

    def xent(rng):
        t = rng.integers(0, 9, size=6)
        return (lambda ts: E.softmax_cross_entropy(ts[0], t)), [rng.standard_normal((6, 9))]

    def xent_temp(rng):
        t = rng.integers(0, 5, size=4)
        return (lambda ts: E.softmax_cross_entropy(ts[0], t, temperature=0.07)), [rng.standard_normal((4, 5)) * 0.1]

    def gather(rng):
        idx = rng.integers(0, 4, size=(3, 4))
        return (lambda ts: E.gather_cols(ts[0], idx)), [rng.standard_normal((3, 4))]

    def take(rng):
        idx = rng.permutation(5)
        return (lambda ts: E.take_rows(ts[0], idx)), [rng.standard_normal((5, 3))]

    def concat(rng):
        return (lambda ts: E.concat_cols(ts)), [rng.standard_normal((3, 1)), rng.standard_normal((3, 4))]

    def transpose(rng):
        return (lambda ts: E.transpose(ts[0])), [rng.standard_normal((3, 4))]

    return {
        "matmul": (matmul, 1e-6),
        "batched_dot": (batched_dot, 1e-6),
        "conv2d": (conv, 1e-5),
        "relu": (relu, 1e-6),
        "global_avg_pool": (gap, 1e-6),
        "linear": (linear, 1e-6),
        "batch_norm[1 shard]": (bn1, 1e-4),
        "batch_norm[2 shards]": (bn2, 1e-4),
        "batch_norm[4-D]": (bn4d, 1e-4),
        "l2_normalize": (l2n, 1e-5),
        "softmax_cross_entropy": (xent, 1e-6),
        "softmax_cross_entropy[tau]": (xent_temp, 1e-6),
        "gather_cols": (gather, 1e-6),
        "take_rows": (take, 1e-6),
        "concat_cols": (concat, 1e-6),
        "transpose": (transpose, 1e-6),
    }


def moco_loss_instance(rng: np.random.Generator):
    """(build, arrays) for the full MoCo query-side loss w.r.t. every f_q parameter."""
    from .contrastive import infonce_loss, logits_moco, queue_init
    from .encoder import EncoderConfig, build_pair, encoder_forward
    from .shuffle_bn import ShardSpec, make_shuffle, shuffled_key_forward

    cfg = EncoderConfig(arch="mlp", widths=[6], input_shape=(5,), feature_dim=4, bn_shards=2)
    f_q, f_k = build_pair(cfg, rng)
    queue = queue_init(7, 4, rng)
    x_q, x_k = rng.uniform(0, 1, (8, 5)), rng.uniform(0, 1, (8, 5))
    k = shuffled_key_forward(f_k, x_k, make_shuffle(8, rng), ShardSpec(2))
    names = list(f_q.params)

    def build(ts):
        saved = {n: f_q.params[n] for n in names}
        for n, t in zip(names, ts):
            f_q.params[n] = t
            bn = f_q.bn.get(n.split(".")[0])
            if bn is not None:
                setattr(bn, n.split(".")[1], t)
        try:
            q = encoder_forward(f_q, x_q, "train")
            return infonce_loss(logits_moco(q, k, queue, 0.07))
        finally:
            for n, t in saved.items():
                f_q.params[n] = t
                bn = f_q.bn.get(n.split(".")[0])
                if bn is not None:
                    setattr(bn, n.split(".")[1], t)

    return build, [f_q.params[n].data.copy() for n in names]


def run_suite(instances: int = 20, seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    cases = dict(_cases())
    cases["moco_step_loss"] = (moco_loss_instance, 1e-4)
    for name, (factory, tol) in cases.items():
        worst = 0.0
        for _ in range(instances):
            build, arrays = factory(rng)
            worst = max(worst, check_gradients(build, arrays))
        results.append(GradCheckResult(name, instances, worst, tol))
    return results


def main(instances: int = 20, seed: int = 0) -> bool:
    t0 = time.perf_counter()
    results = run_suite(instances, seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.op:<28} max_rel_err={r.max_rel_err:.2e}  tol={r.tolerance:.0e}  n={r.instances}")
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    return all(r.passed for r in results)
