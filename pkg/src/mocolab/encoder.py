"""Query/key encoder networks and the momentum (EMA) update between them."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine as E
from .engine import BnState, Tensor
from .errors import ContractError, DimensionError


@dataclass
class EncoderConfig:
    arch: str = "mlp"
    widths: list[int] = field(default_factory=lambda: [256, 128])
    input_shape: tuple[int, ...] = (64,)
    feature_dim: int = 128
    use_bn: bool = True
    bn_shards: int = 4
    bn_buffers: str = "copy"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.widths = [int(w) for w in self.widths]
        if self.arch not in ("mlp", "small_conv"):
            raise ContractError(f"unknown encoder arch {self.arch!r}")
        if not self.widths:
            raise ContractError("encoder widths must be non-empty")
        if self.feature_dim < 2:
            raise ContractError("feature_dim must be at least 2")
        if self.bn_shards < 1:
            raise ContractError("bn_shards must be positive")
        if self.bn_buffers not in ("copy", "momentum"):
            raise ContractError(f"bn_buffers must be 'copy' or 'momentum', got {self.bn_buffers!r}")
        if self.arch == "small_conv" and len(self.input_shape) != 3:
            raise ContractError("small_conv encoder needs a C x H x W input_shape")


class Encoder:
    """A small BN-bearing network ending in an L2-normalized projection.

    ``mlp``: [linear -> BN -> relu] per hidden width, then a linear head.
    Image inputs are flattened first.
    ``small_conv``: [conv3x3 stride 2 -> BN -> relu] per channel width,
    global average pooling, then a linear head.
    """

    def __init__(self, config: EncoderConfig, role: str = "query"):
        self.config = config
        self.role = role
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BnState] = {}

    @property
    def trainable(self) -> bool:
        return self.role == "query"

    # ordered learnable tensors (weights, biases, BN gamma/beta)
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def set_trainable(self, flag: bool) -> None:
        self.role = "query" if flag else "key"
        for p in self.params.values():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def snapshot(self) -> "Encoder":
        return copy.deepcopy(self)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        for name, b in self.buffers().items():
            h.update(name.encode())
            h.update(b.tobytes())
        return h.hexdigest()

    def __call__(self, x, bn_mode: str = "train", tap: str = "projection_output") -> Tensor:
        return encoder_forward(self, x, bn_mode, tap=tap)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


def build_encoder(cfg: EncoderConfig, rng: np.random.Generator, role: str = "query") -> Encoder:
    enc = Encoder(cfg, role)
    grad = role == "query"

    def add(name, value):
        enc.params[name] = Tensor(value, requires_grad=grad, name=name)

    if cfg.arch == "mlp":
        fan_in = int(np.prod(cfg.input_shape))
        for i, width in enumerate(cfg.widths):
            add(f"fc{i}.w", _uniform(rng, (fan_in, width), fan_in))
            add(f"fc{i}.b", _uniform(rng, (width,), fan_in))
            if cfg.use_bn:
                st = BnState.create(width, f"bn{i}", requires_grad=grad)
                enc.bn[f"bn{i}"] = st
                enc.params[st.gamma.name] = st.gamma
                enc.params[st.beta.name] = st.beta
            fan_in = width
    else:
        cin = cfg.input_shape[0]
        for i, cout in enumerate(cfg.widths):
            fan = cin * 9
            add(f"conv{i}.w", _uniform(rng, (cout, cin, 3, 3), fan))
            if cfg.use_bn:
                st = BnState.create(cout, f"bn{i}", requires_grad=grad)
                enc.bn[f"bn{i}"] = st
                enc.params[st.gamma.name] = st.gamma
                enc.params[st.beta.name] = st.beta
            else:
                add(f"conv{i}.b", _uniform(rng, (cout,), fan))
            cin = cout
        fan_in = cin
    add("head.w", _uniform(rng, (fan_in, cfg.feature_dim), fan_in))
    add("head.b", _uniform(rng, (cfg.feature_dim,), fan_in))
    return enc


def build_pair(cfg: EncoderConfig, rng: np.random.Generator) -> tuple[Encoder, Encoder]:
    """Return (f_q, f_k) with f_k an exact, gradient-exempt copy of f_q."""
    f_q = build_encoder(cfg, rng, role="query")
    f_k = copy.deepcopy(f_q)
    f_k.set_trainable(False)
    return f_q, f_k


def _bn_kwargs(bn_mode: str, n: int, shards: int):
    if bn_mode == "train":
        return {"mode": "train", "shards": E.shard_slices(n, shards)}
    if bn_mode == "eval":
        return {"mode": "eval"}
    raise ContractError(f"bn_mode must be 'train' or 'eval', got {bn_mode!r}")


def encoder_forward(enc: Encoder, batch, bn_mode: str = "train", tap: str = "projection_output",
                    shards: int | None = None) -> Tensor:
    """Encode a batch into unit-norm feature rows.

    ``tap="pre_projection"`` stops before the head and returns the last hidden
    (mlp) or pooled (conv) activations, un-normalized.
    """
    cfg = enc.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if tuple(x.shape[1:]) != cfg.input_shape:
        raise DimensionError(f"encoder expects inputs of shape {cfg.input_shape}, got batch {x.shape}")
    n = x.shape[0]
    bn_kw = _bn_kwargs(bn_mode, n, shards or cfg.bn_shards) if cfg.use_bn else None
    p = enc.params
    h = x
    if cfg.arch == "mlp":
        if x.data.ndim > 2:
            h = E.reshape(h, (n, -1))
        for i in range(len(cfg.widths)):
            h = E.linear(h, p[f"fc{i}.w"], p[f"fc{i}.b"])
            if cfg.use_bn:
                h = E.batch_norm(h, enc.bn[f"bn{i}"], **bn_kw)
            h = E.relu(h)
    else:
        for i in range(len(cfg.widths)):
            h = E.conv2d(h, p[f"conv{i}.w"], stride=2, padding=1)
            if cfg.use_bn:
                h = E.batch_norm(h, enc.bn[f"bn{i}"], **bn_kw)
            else:
                b = p[f"conv{i}.b"]
                h = _add_channel_bias(h, b)
            h = E.relu(h)
        h = E.global_avg_pool(h)
    if tap == "pre_projection":
        return h
    if tap != "projection_output":
        raise ContractError(f"unknown tap {tap!r}")
    z = E.linear(h, p["head.w"], p["head.b"])
    return E.l2_normalize(z)


def _add_channel_bias(h: Tensor, b: Tensor) -> Tensor:
    # only used by BN-free conv encoders
    out = h.data + b.data[None, :, None, None]
    return E._record("channel_bias", (h, b), out, lambda g: (g, g.sum(axis=(0, 2, 3))))


def _check_matched(a: Encoder, b: Encoder) -> None:
    if list(a.params) != list(b.params):
        raise ContractError("encoders have different parameter lists")
    for name in a.params:
        if a.params[name].shape != b.params[name].shape:
            raise ContractError(f"parameter {name} shapes differ: {a.params[name].shape} vs {b.params[name].shape}")


def momentum_update(f_k: Encoder, f_q: Encoder, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise and in place."""
    if not 0.0 <= m < 1.0:
        raise ContractError(f"momentum coefficient must lie in [0, 1), got {m}")
    _check_matched(f_k, f_q)
    for name, pk in f_k.params.items():
        pq = f_q.params[name].data
        if m == 0.0:
            pk.data[...] = pq
        else:
            pk.data *= m
            pk.data += (1.0 - m) * pq
    for name, sk in f_k.bn.items():
        sq = f_q.bn[name]
        if f_k.config.bn_buffers == "copy" or m == 0.0:
            sk.running_mean[:] = sq.running_mean
            sk.running_var[:] = sq.running_var
        else:
            sk.running_mean[:] = m * sk.running_mean + (1 - m) * sq.running_mean
            sk.running_var[:] = m * sk.running_var + (1 - m) * sq.running_var


def param_distance(a: Encoder, b: Encoder) -> float:
    """Euclidean distance over all learnable parameters (BN buffers excluded)."""
    _check_matched(a, b)
    total = 0.0
    for name, pa in a.params.items():
        d = pa.data - b.params[name].data
        total += float(np.dot(d.ravel(), d.ravel()))
    return float(np.sqrt(total))


def copy_params(dst: Encoder, src: Encoder) -> None:
    _check_matched(dst, src)
    for name, p in dst.params.items():
        p.data[...] = src.params[name].data
    for name, st in dst.bn.items():
        st.running_mean[:] = src.bn[name].running_mean
        st.running_var[:] = src.bn[name].running_var


def gradient_vector(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params])
