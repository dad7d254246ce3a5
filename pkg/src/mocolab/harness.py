"""Experiment orchestration: single runs, sweeps and the shuffled-BN ablation."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ExperimentConfig
from .contrastive import (
    EndToEndState,
    MemoryBank,
    MemoryBankState,
    MocoState,
    queue_init,
    train_step_end_to_end,
    train_step_memory_bank,
    train_step_moco,
)
from .data import AugmentationConfig, Dataset, epoch_seed, load_idx, make_views, minibatches, prefetch, synth_clusters, train_val_split
from .encoder import EncoderConfig, build_encoder, build_pair
from .engine import SgdState
from .errors import ConfigError, ConsistencyError, DivergenceError
from .evaluation import ProbeConfig, extract_features, knn_monitor, linear_probe
from .metrics import MetricsRecord
from .shuffle_bn import ShardSpec, leakage_curves

log = logging.getLogger(__name__)

METRICS_SCHEMA = "mocolab.metrics/1"
OSCILLATION_LIMIT = 0.5
EXTRA_COLUMNS = ["mechanism", "shuffle_bn", "config_hash"]


# ---------------------------------------------------------------- data

def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synth":
        full = synth_clusters(d.n_classes, d.n_train_per_class + d.n_val_per_class, d.shape,
                              d.class_sep, d.noise_sigma, d.seed,
                              nuisance=AugmentationConfig(**d.nuisance) if d.nuisance else None,
                              noise_smooth=d.noise_smooth)
        return train_val_split(full, d.n_val_per_class, d.seed)
    base = Path(d.path)
    train = load_idx(base / "train-images.idx", base / "train-labels.idx")
    val = load_idx(base / "val-images.idx", base / "val-labels.idx")
    return train, val


# ---------------------------------------------------------------- state

def _encoder_config(cfg: ExperimentConfig) -> EncoderConfig:
    enc = cfg.encoder
    enc.bn_shards = cfg.bn_shards
    return enc


def build_state(cfg: ExperimentConfig, n_train: int):
    """Fresh mechanism state; all randomness derives from ``cfg.seed``."""
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xE1]))
    step_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC3]))
    enc_cfg = _encoder_config(cfg)
    opt = SgdState(lr=cfg.lr_at(0), momentum=cfg.sgd_momentum, weight_decay=cfg.weight_decay)
    shards = ShardSpec(cfg.bn_shards)
    if cfg.mechanism == "moco":
        f_q, f_k = build_pair(enc_cfg, init_rng)
        queue = queue_init(cfg.K, enc_cfg.feature_dim, init_rng, cfg.queue_init)
        return MocoState(f_q, f_k, queue, opt, step_rng, m=cfg.m, tau=cfg.tau, shards=shards, shuffle_bn=cfg.shuffle_bn)
    if cfg.mechanism == "end_to_end":
        f_q = build_encoder(enc_cfg, init_rng)
        f_k = build_encoder(enc_cfg, init_rng) if cfg.e2e_two_towers else None
        return EndToEndState(f_q, f_k, opt, step_rng, tau=cfg.tau, shards=shards, shuffle_bn=cfg.shuffle_bn)
    f_q = build_encoder(enc_cfg, init_rng)
    bank = MemoryBank.random(n_train, enc_cfg.feature_dim, init_rng, cfg.bank_momentum)
    return MemoryBankState(f_q, bank, opt, step_rng, k=cfg.K, tau=cfg.tau, shards=shards)


STEP_FUNCTIONS = {
    MocoState: train_step_moco,
    EndToEndState: train_step_end_to_end,
    MemoryBankState: train_step_memory_bank,
}


def _encoders(state) -> dict[str, object]:
    out = {"f_q": state.f_q}
    f_k = getattr(state, "f_k", None)
    if f_k is not None:
        out["f_k"] = f_k
    return out


def state_tensors(state) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for prefix, enc in _encoders(state).items():
        for name, p in enc.params.items():
            tensors[f"{prefix}/{name}"] = p.data
        for name, buf in enc.buffers().items():
            tensors[f"{prefix}/{name}"] = buf
    for i, v in enumerate(state.opt.velocity):
        tensors[f"opt/velocity/{i}"] = v
    if isinstance(state, MocoState):
        tensors["queue/buffer"] = state.queue.buffer
        tensors["queue/tags"] = state.queue.tags.astype(np.float64)
    if isinstance(state, MemoryBankState):
        tensors["bank/features"] = state.bank.features
        tensors["bank/last_update_step"] = state.bank.last_update_step.astype(np.float64)
    return tensors


def save_state(path, state, cfg: ExperimentConfig, epoch: int, batch: int) -> None:
    extra = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "mechanism": cfg.mechanism,
        "epoch": epoch,
        "batch": batch,
        "lr": state.opt.lr,
        "rng": state.rng.bit_generator.state,
    }
    if isinstance(state, MocoState):
        extra.update(queue_cursor=state.queue.cursor, queue_filled=state.queue.filled)
    ckpt.checkpoint_save(path, state_tensors(state), state.step, extra)


def restore_state(state, loaded: ckpt.Checkpoint, cfg: ExperimentConfig) -> tuple[int, int]:
    if loaded.state.get("mechanism") != cfg.mechanism:
        raise ConsistencyError(f"checkpoint is for mechanism {loaded.state.get('mechanism')!r}, config says {cfg.mechanism!r}")
    if not state.opt.velocity:
        state.opt.velocity = [np.zeros_like(p.data) for p in _trainable(state)]
    current = state_tensors(state)
    missing = sorted(set(current) ^ set(loaded.tensors))
    if missing:
        raise ConsistencyError(f"checkpoint tensors do not match config: {missing[:5]}")
    for name, dst in current.items():
        src = loaded.tensors[name]
        if src.shape != dst.shape:
            raise ConsistencyError(f"checkpoint tensor {name} has shape {src.shape}, config expects {dst.shape}")
    for prefix, enc in _encoders(state).items():
        for name, p in enc.params.items():
            p.data[...] = loaded.tensors[f"{prefix}/{name}"]
        for name, buf in enc.buffers().items():
            buf[...] = loaded.tensors[f"{prefix}/{name}"]
    for i, v in enumerate(state.opt.velocity):
        v[...] = loaded.tensors[f"opt/velocity/{i}"]
    if isinstance(state, MocoState):
        state.queue.buffer[...] = loaded.tensors["queue/buffer"]
        state.queue.tags[...] = loaded.tensors["queue/tags"].astype(np.int64)
        state.queue.cursor = int(loaded.state["queue_cursor"])
        state.queue.filled = int(loaded.state["queue_filled"])
    if isinstance(state, MemoryBankState):
        state.bank.features[...] = loaded.tensors["bank/features"]
        state.bank.last_update_step[...] = loaded.tensors["bank/last_update_step"].astype(np.int64)
    state.rng.bit_generator.state = loaded.state["rng"]
    state.step = loaded.step
    return int(loaded.state["epoch"]), int(loaded.state["batch"])


def _trainable(state):
    if isinstance(state, EndToEndState):
        return state.parameters()
    return state.f_q.parameters()


# ---------------------------------------------------------------- metrics files

def oscillation_score(losses) -> float:
    """std / mean of the loss over the final 20% of steps."""
    arr = np.asarray([v for v in losses if v is not None], dtype=np.float64)
    if arr.size == 0:
        return float("nan")
    tail = arr[-max(1, int(math.ceil(0.2 * arr.size))):]
    mean = float(tail.mean())
    return float(tail.std() / mean) if mean != 0 else float("inf")


def write_metrics(path, records: list[MetricsRecord], cfg: ExperimentConfig, header_extra: dict | None = None) -> None:
    header = {
        "schema": METRICS_SCHEMA,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "columns": MetricsRecord.columns() + EXTRA_COLUMNS,
    }
    header.update(header_extra or {})
    buf = io.StringIO()
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header["columns"])
    extra = [cfg.mechanism, str(cfg.shuffle_bn).lower(), cfg.config_hash()]
    for r in records:
        w.writerow(r.row(include_wall=not cfg.deterministic) + extra)
    Path(path).write_text(buf.getvalue())


def read_metrics(path) -> tuple[dict, list[MetricsRecord]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        rows = list(csv.DictReader(fh))
    return header, [MetricsRecord.from_row(r) for r in rows]


# ---------------------------------------------------------------- single run

@dataclass
class RunResult:
    config: ExperimentConfig
    records: list[MetricsRecord]
    status: str
    knn_val_acc: float | None = None
    probe_acc: float | None = None
    oscillation: float | None = None
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None
    state: object = None
    param_distances: list[float] = field(default_factory=list)

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def step_losses(self) -> list[float]:
        return [r.loss for r in self.records if r.kind == "step"]


def _evaluate_knn(cfg: ExperimentConfig, f_q, train: Dataset, val: Dataset) -> float:
    tap = cfg.eval.knn_tap
    return knn_monitor(extract_features(f_q, train, tap), extract_features(f_q, val, tap),
                       cfg.eval.knn_k, cfg.eval.knn_temperature)


def _evaluate_probe(cfg: ExperimentConfig, f_q, train: Dataset, val: Dataset) -> float:
    tap = cfg.eval.probe_tap
    pcfg = ProbeConfig(lrs=list(cfg.eval.probe_lrs), weight_decay=cfg.eval.probe_weight_decay,
                       epochs=cfg.eval.probe_epochs, seed=cfg.seed)
    return linear_probe(extract_features(f_q, train, tap), extract_features(f_q, val, tap), pcfg).accuracy


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume_from=None) -> RunResult:
    """Train one mechanism end to end and evaluate it.

    Emits a step row per iteration, an eval row per ``eval_every`` epochs
    and a final row. Divergence (non-finite loss, or oscillation score above
    0.5 over the final window) is recorded in the status, never raised.
    """
    cfg.validate()
    if cfg.mechanism == "end_to_end" and cfg.K != cfg.batch_size - 1:
        log.warning("end_to_end ignores K=%d; the dictionary is the batch (K_eff = N - 1 = %d)", cfg.K, cfg.batch_size - 1)
    train, val = build_datasets(cfg)
    state = build_state(cfg, len(train))
    step_fn = STEP_FUNCTIONS[type(state)]
    start_epoch, start_batch = 0, 0
    if resume_from is not None:
        start_epoch, start_batch = restore_state(state, ckpt.checkpoint_load(resume_from), cfg)

    records: list[MetricsRecord] = []
    status = "converged"
    n = cfg.batch_size
    last_epoch, last_batch = start_epoch, start_batch
    stop = False

    def batches_for(epoch: int, first: int):
        for b, ids in enumerate(minibatches(train, n, epoch_seed(cfg.seed, epoch))):
            if b >= first:
                yield b, make_views(train, ids, cfg.augment, cfg.seed, epoch, b)

    for epoch in range(start_epoch, cfg.epochs):
        state.opt.lr = cfg.lr_at(epoch)
        first = start_batch if epoch == start_epoch else 0
        stream = batches_for(epoch, first)
        if cfg.data.prefetch:
            stream = prefetch(stream, depth=2)
        for b, views in stream:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                stop = True
                break
            try:
                records.append(step_fn(state, views))
            except DivergenceError as exc:
                log.warning("run diverged: %s", exc)
                records.append(MetricsRecord(kind="step", step=state.step, epoch=epoch, loss=float("nan")))
                status = "diverged"
                stop = True
                break
            last_epoch, last_batch = epoch, b + 1
        if stop:
            break
        last_epoch, last_batch = epoch + 1, 0
        every = cfg.eval.eval_every
        if every and ((epoch + 1) % every == 0 or epoch + 1 == cfg.epochs):
            try:
                knn_now = _evaluate_knn(cfg, state.f_q, train, val)
            except DivergenceError as exc:
                log.warning("run diverged: %s", exc)
                status = "diverged"
                break
            records.append(MetricsRecord(kind="eval", step=state.step, epoch=epoch, knn_val_acc=knn_now))

    losses = [r.loss for r in records if r.kind == "step"]
    osc = oscillation_score(losses)
    if status != "diverged" and osc > OSCILLATION_LIMIT:
        status = "diverged"
    knn = probe = None
    if status != "diverged" or all(math.isfinite(v) for v in losses):
        try:
            knn = _evaluate_knn(cfg, state.f_q, train, val)
            if cfg.eval.probe:
                probe = _evaluate_probe(cfg, state.f_q, train, val)
        except DivergenceError as exc:
            log.warning("run diverged: %s", exc)
            status = "diverged"
    records.append(MetricsRecord(kind="final", step=state.step, epoch=last_epoch, knn_val_acc=knn, probe_acc=probe))

    result = RunResult(cfg, records, status, knn, probe, osc, state=state,
                       param_distances=[r.param_distance for r in records if r.kind == "step" and r.param_distance is not None])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out / "metrics.csv"
        write_metrics(result.metrics_path, records, cfg, {"status": status, "oscillation": osc})
        result.checkpoint_path = out / "checkpoint.dlck"
        save_state(result.checkpoint_path, state, cfg, last_epoch, last_batch)
    return result


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepCell:
    mechanism: str
    value: float
    seed: int
    status: str
    knn_val_acc: float | None
    probe_acc: float | None
    oscillation: float | None
    pd_step_var: float | None = None
    note: str = ""


def step_variance(distances) -> float:
    """Variance of the step-to-step changes of a param-distance trajectory."""
    d = np.asarray(distances, dtype=np.float64)
    return float(np.var(np.diff(d))) if d.size > 2 else float("nan")


def _run_cell(args) -> SweepCell:
    cfg, axis, value, out_dir = args
    try:
        res = run_experiment(cfg, out_dir)
    except Exception as exc:  # a failed cell must not abort the sweep
        log.warning("sweep cell %s=%s seed=%d failed: %s", axis, value, cfg.seed, exc)
        return SweepCell(cfg.mechanism, value, cfg.seed, "error", None, None, None, note=str(exc))
    return SweepCell(cfg.mechanism, value, cfg.seed, res.status, res.knn_val_acc, res.probe_acc,
                     res.oscillation, step_variance(res.param_distances))


def _run_cells(jobs, workers: int) -> list[SweepCell]:
    if workers <= 1:
        return [_run_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, jobs))


def _cell_dir(out_dir, *parts) -> Path | None:
    if out_dir is None:
        return None
    return Path(out_dir).joinpath(*[str(p) for p in parts])


def sweep_K(base: ExperimentConfig, ks, seeds=(0,), mechanisms=("moco",), out_dir=None, workers: int = 1) -> list[SweepCell]:
    """One run per (mechanism, K, seed).

    End-to-end realizes K through the batch (N = K + 1 rounded up to the
    shard count); cells beyond ``max_batch`` are recorded as skipped.
    """
    ks = list(ks)
    if ks != sorted(ks):
        raise ConfigError("Ks must be ascending")
    jobs, skipped = [], []
    for mech in mechanisms:
        for k in ks:
            for seed in seeds:
                cfg = base.replace(mechanism=mech, K=int(k), seed=int(seed))
                if mech == "end_to_end":
                    s = base.bn_shards
                    nb = int(math.ceil((k + 1) / s) * s)
                    if nb > base.max_batch:
                        skipped.append(SweepCell(mech, k, seed, "skipped", None, None, None,
                                                 note=f"batch {nb} exceeds max_batch {base.max_batch}"))
                        continue
                    cfg = cfg.replace(batch_size=nb, K=nb - 1)
                jobs.append((cfg, "K", k, _cell_dir(out_dir, mech, f"K{k}", f"seed{seed}")))
    cells = _run_cells(jobs, workers) + skipped
    if out_dir is not None:
        write_sweep_table(Path(out_dir) / "sweep_k.csv", cells, "K")
    return cells


def sweep_momentum(base: ExperimentConfig, ms, seeds=(0,), out_dir=None, workers: int = 1) -> list[SweepCell]:
    for m in ms:
        if not 0.0 <= m < 1.0:
            raise ConfigError(f"momentum {m} outside [0, 1)")
    jobs = [(base.replace(mechanism="moco", m=float(m), seed=int(s)), "m", m, _cell_dir(out_dir, f"m{m}", f"seed{s}"))
            for m in ms for s in seeds]
    cells = _run_cells(jobs, workers)
    if out_dir is not None:
        write_sweep_table(Path(out_dir) / "sweep_m.csv", cells, "m")
    return cells


def write_sweep_table(path, cells: list[SweepCell], axis: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mechanism", axis, "seed", "status", "knn_val_acc", "probe_acc", "oscillation", "pd_step_var", "note"])
        for c in cells:
            w.writerow([c.mechanism, c.value, c.seed, c.status,
                        *("" if v is None else format(v, ".17g") for v in (c.knn_val_acc, c.probe_acc, c.oscillation, c.pd_step_var)),
                        c.note])


def summarize(cells: list[SweepCell], metric: str = "knn_val_acc") -> dict[tuple[str, float], tuple[float, float, int]]:
    """(mechanism, axis value) -> (mean, std, n) over seeds with a finite metric."""
    groups: dict[tuple[str, float], list[float]] = {}
    for c in cells:
        v = getattr(c, metric)
        if v is not None and math.isfinite(v):
            groups.setdefault((c.mechanism, c.value), []).append(v)
    return {k: (float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()}


@dataclass
class ShuffleAblation:
    on: RunResult
    off: RunResult

    def curves(self) -> dict[bool, list[tuple[int, float, float]]]:
        return {True: leakage_curves(self.on.records), False: leakage_curves(self.off.records)}


def ablate_shuffle_bn(base: ExperimentConfig, out_dir=None) -> ShuffleAblation:
    if not base.encoder.use_bn or base.bn_shards < 2:
        raise ConfigError("the shuffled-BN ablation needs BN and at least 2 shards")
    on = run_experiment(base.replace(shuffle_bn=True), _cell_dir(out_dir, "shuffle_on"))
    off = run_experiment(base.replace(shuffle_bn=False), _cell_dir(out_dir, "shuffle_off"))
    result = ShuffleAblation(on, off)
    if out_dir is not None:
        write_curves(Path(out_dir) / "shuffle_bn_curves.csv", result)
    return result


def write_curves(path, ab: ShuffleAblation) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shuffle_bn", "epoch", "pretext_acc", "knn_val_acc"])
        for flag, rows in ab.curves().items():
            for epoch, pre, knn in rows:
                w.writerow([str(flag).lower(), epoch, format(pre, ".17g"), format(knn, ".17g")])
