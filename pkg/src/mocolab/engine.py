"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Ops record onto the innermost active :class:`Tape`. Outside a tape every op
is a plain numpy computation and its result carries no gradient linkage, so
evaluation code simply runs without opening one.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ContractError,
    CorruptionError,
    DegenerateFeatureError,
    DegenerateShardError,
    DimensionError,
    DivergenceError,
)

NORM_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            raise ContractError(f"tensor {self.name or '<unnamed>'} is gradient-exempt")
        if g.shape != self.data.shape:
            raise DimensionError(f"grad shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = -1


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended at creation time, so the list is already topologically
    sorted and ``backward`` only has to walk it in reverse.
    """

    _local = threading.local()

    def __init__(self):
        self.nodes: list[Node] = []

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    @classmethod
    def active(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def __contains__(self, t: Tensor) -> bool:
        node = t.node
        return node is not None and node.index < len(self.nodes) and self.nodes[node.index] is node

    def recipients(self) -> set[int]:
        """ids of every tensor that can receive a gradient from this tape."""
        return {id(t) for n in self.nodes for t in n.inputs if t.requires_grad}


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), out, backward, index=len(tape.nodes))
        tape.nodes.append(node)
        out.node = node
    return out


def backward(loss: Tensor, tape: Tape, visit: Callable[[Node], None] | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor.

    ``visit`` is called once per node that receives an upstream gradient, in
    processing order; tests use it to audit traversal order.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise ContractError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        if visit is not None:
            visit(node)
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.accumulate_grad(gi)
            elif id(t) in pending:
                pending[id(t)] = pending[id(t)] + gi
            else:
                pending[id(t)] = gi


def _check_2d(name: str, t: Tensor) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{name} expects a 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a)
    _check_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    return _record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    _check_2d("transpose", a)
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def batched_dot(q: Tensor, k: Tensor) -> Tensor:
    """Row-wise inner products: out[i, 0] = sum_c q[i, c] * k[i, c]."""
    if q.shape != k.shape or q.data.ndim != 2:
        raise DimensionError(f"batched_dot needs equal 2-D shapes, got {q.shape} and {k.shape}")
    Q, K = q.data, k.data
    out = np.einsum("nc,nc->n", Q, K)[:, None]
    return _record("batched_dot", (q, k), out, lambda g: (g * K, g * Q))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    _check_2d("linear", x)
    _check_2d("linear", w)
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear shapes disagree: x {x.shape}, w {w.shape}, b {b.shape}")
    X, W = x.data, w.data
    out = X @ W + b.data
    return _record("linear", (x, w, b), out, lambda g: (g @ W.T, X.T @ g, g.sum(axis=0)))


def scale(x: Tensor, c: float) -> Tensor:
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def tensor_sum(x: Tensor) -> Tensor:
    return _record("sum", (x,), np.array(x.data.sum()), lambda g: (np.full(x.shape, float(g)),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    for p in parts:
        _check_2d("concat_cols", p)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols row counts differ: {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)
    return _record(
        "concat_cols", tuple(parts), out,
        lambda g: tuple(g[:, edges[i]:edges[i + 1]] for i in range(len(parts))),
    )


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """out[i] = x[idx[i]]; idx may repeat rows, gradients are scatter-added."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record("take_rows", (x,), x.data[idx], bw)


def gather_cols(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row column gather: out[i, j] = x[i, idx[i, j]]."""
    _check_2d("gather_cols", x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_cols index rows {idx.shape[0]} != tensor rows {x.shape[0]}")
    rows = np.arange(x.shape[0])[:, None]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.broadcast_to(rows, idx.shape), idx), g)
        return (gx,)

    return _record("gather_cols", (x,), x.data[rows, idx], bw)


# ---------------------------------------------------------------- conv net pieces

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), x.data * mask, lambda g: (g * mask,))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    return _record(
        "global_avg_pool", (x,), x.data.mean(axis=(2, 3)),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
    )


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation via im2col."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape} (padding={padding})")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(wd, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    W2 = w.data.reshape(cout, -1)
    out = (cols @ W2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ W2).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        return (np.ascontiguousarray(gx), gw)

    return _record("conv2d", (x, w), np.ascontiguousarray(out), bw)


# ---------------------------------------------------------------- batch norm

@dataclass
class BnState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    running_momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int, name: str = "bn", requires_grad: bool = True) -> "BnState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels), requires_grad, name=f"{name}.beta"),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def shard_slices(n: int, num_shards: int) -> list[slice]:
    """Contiguous equal slices [j*n/S, (j+1)*n/S)."""
    if num_shards < 1 or n % num_shards:
        raise ContractError(f"batch of {n} cannot be split into {num_shards} equal shards")
    size = n // num_shards
    return [slice(j * size, (j + 1) * size) for j in range(num_shards)]


def batch_norm(x: Tensor, st: BnState, mode: str = "train", shards: Sequence[slice] | None = None,
               update_stats: bool = True) -> Tensor:
    """Batch normalization over axis 0 (and spatial axes for 4-D input).

    In ``train`` mode each shard slice is normalized with its own biased
    statistics; running statistics move towards the slice-averaged
    (unbiased) estimates. ``eval`` mode uses the running statistics only.
    """
    X = x.data
    if X.ndim not in (2, 4) or X.shape[1] != st.channels:
        raise DimensionError(f"batch_norm input {x.shape} incompatible with {st.channels} channels")
    if np.any(st.running_var < 0):
        raise CorruptionError("batch_norm running_var has negative entries")
    axes = (0,) if X.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if X.ndim == 2 else (1, -1, 1, 1)
    gamma = st.gamma.data.reshape(bshape)
    beta = st.beta.data.reshape(bshape)

    if mode == "eval":
        inv = 1.0 / np.sqrt(st.running_var + st.eps)
        xhat = (X - st.running_mean.reshape(bshape)) * inv.reshape(bshape)

        def bw_eval(g):
            return (g * gamma * inv.reshape(bshape), (g * xhat).sum(axis=axes), g.sum(axis=axes))

        return _record("batch_norm_eval", (x, st.gamma, st.beta), gamma * xhat + st.beta.data.reshape(bshape), bw_eval)
    if mode != "train":
        raise ContractError(f"unknown batch_norm mode {mode!r}")

    n = X.shape[0]
    shards = list(shards) if shards is not None else [slice(0, n)]
    covered = 0
    for s in shards:
        if s.start != covered or s.stop <= s.start:
            raise ContractError("shard slices must partition the batch contiguously")
        if s.stop - s.start < 2:
            raise DegenerateShardError(f"shard {s.start}:{s.stop} has fewer than 2 samples")
        covered = s.stop
    if covered != n:
        raise ContractError("shard slices must cover the whole batch")

    xhat = np.empty_like(X)
    invs, means, vars_ = [], [], []
    for s in shards:
        xs = X[s]
        mu = xs.mean(axis=axes, keepdims=True)
        var = xs.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + st.eps)
        xhat[s] = (xs - mu) * inv
        invs.append(inv)
        means.append(mu.reshape(-1))
        count = xs.size // st.channels
        vars_.append(var.reshape(-1) * count / (count - 1))
    out = gamma * xhat + beta

    if update_stats:
        mom = st.running_momentum
        st.running_mean[:] = (1 - mom) * st.running_mean + mom * np.mean(means, axis=0)
        st.running_var[:] = (1 - mom) * st.running_var + mom * np.mean(vars_, axis=0)

    def bw(g):
        gx = np.empty_like(X)
        dxhat = g * gamma
        for s, inv in zip(shards, invs):
            d = dxhat[s]
            xh = xhat[s]
            gx[s] = inv * (d - d.mean(axis=axes, keepdims=True) - xh * (d * xh).mean(axis=axes, keepdims=True))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _record("batch_norm", (x, st.gamma, st.beta), out, bw)


# ---------------------------------------------------------------- heads and losses

def l2_normalize(x: Tensor, norm_floor: float = NORM_FLOOR) -> Tensor:
    _check_2d("l2_normalize", x)
    norms = np.sqrt(np.einsum("nc,nc->n", x.data, x.data))[:, None]
    if np.any(norms < norm_floor):
        bad = int(np.argmin(norms))
        raise DegenerateFeatureError(f"row {bad} has norm {float(norms[bad, 0]):.3e} below {norm_floor}")
    y = x.data / norms

    def bw(g):
        return ((g - y * np.einsum("nc,nc->n", g, y)[:, None]) / norms,)

    return _record("l2_normalize", (x,), y, bw)


def softmax_cross_entropy(logits: Tensor, targets, temperature: float = 1.0) -> Tensor:
    """Mean over rows of -log softmax(logits / temperature)[target]."""
    _check_2d("softmax_cross_entropy", logits)
    n, m = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{t.shape[0]} targets for {n} logit rows")
    if np.any(t < 0) or np.any(t >= m):
        raise IndexError(f"targets must lie in [0, {m})")
    z = logits.data / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, t]))

    def bw(g):
        p = e / s
        p[rows, t] -= 1.0
        return (p * (float(g) / (n * temperature)),)

    return _record("softmax_cross_entropy", (logits,), np.array(loss), bw)


# ---------------------------------------------------------------- optimizer

@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], st: SgdState) -> None:
    """In-place SGD with coupled weight decay and heavy-ball momentum.

    ``g' = g + wd * p;  v = mu * v + g';  p = p - lr * v``. A missing grad is
    treated as zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not st.velocity:
        st.velocity = [np.zeros_like(p.data) for p in params]
    if len(st.velocity) != len(params):
        raise DimensionError("optimizer velocity does not mirror the parameter list")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"grad {g.shape} vs param {p.shape} for {p.name or i}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {p.name or i}")
        v = st.velocity[i]
        v *= st.momentum
        v += g + st.weight_decay * p.data
        p.data -= st.lr * v
        if not np.all(np.isfinite(p.data)):
            raise DivergenceError(f"parameter {p.name or i} became non-finite after the update")


# ---------------------------------------------------------------- test oracle

def finite_diff_grad(f: Callable[[], float], params: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. each array, perturbed in place."""
    out = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
