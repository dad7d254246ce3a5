"""Command-line entry point: ``mocolab <command> ...``.

Exit codes: 0 success, 2 config error, 3 divergence, 4 io/format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness, report
from .checkpoint import checkpoint_load
from .config import DataConfig, config_from_dict, load_config, save_config
from .data import AugmentationConfig, load_idx, synth_clusters, train_val_split, write_idx
from .encoder import build_encoder
from .errors import ConfigError, ConsistencyError, FormatError, MocoLabError
from .evaluation import ProbeConfig, extract_features, knn_monitor, linear_probe, raw_features

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mocolab")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    return [int(v) for v in _floats(text)]


def _config(args):
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "deterministic", False):
        changes["deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes).validate() if changes else cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args, f"runs/{cfg.mechanism}-{cfg.config_hash()}-seed{cfg.seed}")
    save_config(cfg, out / "config.json")
    res = harness.run_experiment(cfg, out, resume_from=args.resume)
    report.plot_run(res.records, out / "training.png", f"{cfg.mechanism} K={cfg.K} m={cfg.m} seed={cfg.seed}")
    probe = "n/a" if res.probe_acc is None else f"{res.probe_acc:.4f}"
    knn = "n/a" if res.knn_val_acc is None else f"{res.knn_val_acc:.4f}"
    print(f"status={res.status} knn_val_acc={knn} probe_acc={probe} oscillation={res.oscillation:.4f}")
    print(f"metrics: {res.metrics_path}\ncheckpoint: {res.checkpoint_path}")
    return EXIT_DIVERGED if res.diverged else EXIT_OK


def _print_summary(cells, axis: str) -> None:
    for (mech, value), (mean, std, n) in sorted(harness.summarize(cells).items()):
        print(f"{mech:<12} {axis}={value:<8g} knn={mean:.4f} +/- {std:.4f} (n={n})")
    for c in cells:
        if c.status in ("error", "skipped"):
            print(f"{c.mechanism:<12} {axis}={c.value:<8g} seed={c.seed} {c.status}: {c.note}")


def cmd_sweep_k(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/sweep-k")
    mechs = [m.strip() for m in args.mechanisms.split(",")]
    cells = harness.sweep_K(cfg, _ints(args.ks), _ints(args.seeds), mechs, out, args.workers)
    report.plot_sweep(harness.summarize(cells), "K (dictionary size)", out / "sweep_k.png", log_x=True)
    _print_summary(cells, "K")
    print(f"table: {out / 'sweep_k.csv'}")
    return EXIT_OK


def cmd_sweep_m(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/sweep-m")
    cells = harness.sweep_momentum(cfg, _floats(args.ms), _ints(args.seeds), out, args.workers)
    report.plot_momentum(harness.summarize(cells), out / "sweep_m.png")
    _print_summary(cells, "m")
    for c in cells:
        print(f"m={c.value:<8g} seed={c.seed} status={c.status} oscillation={c.oscillation} pd_step_var={c.pd_step_var}")
    print(f"table: {out / 'sweep_m.csv'}")
    return EXIT_OK


def cmd_ablate_bn(args) -> int:
    cfg = _config(args)
    out = _out(args, "runs/ablate-bn")
    ab = harness.ablate_shuffle_bn(cfg, out)
    report.plot_shuffle_curves(ab.curves(), out / "shuffle_bn.png")
    for flag, res in (("on", ab.on), ("off", ab.off)):
        pre = [r.pretext_acc for r in res.records if r.kind == "step"]
        tail = float(np.mean(pre[-max(1, len(pre) // 20):])) if pre else float("nan")
        print(f"shuffle {flag:<3} final pretext_acc={tail:.4f} knn_val_acc={res.knn_val_acc}")
    print(f"curves: {out / 'shuffle_bn_curves.csv'}")
    return EXIT_OK


def _eval_datasets(cfg, src: str):
    if src in ("config", "synth"):
        return harness.build_datasets(cfg)
    base = Path(src)
    return (load_idx(base / "train-images.idx", base / "train-labels.idx"),
            load_idx(base / "val-images.idx", base / "val-labels.idx"))


def cmd_eval(args) -> int:
    ck = checkpoint_load(args.checkpoint)
    if "config" not in ck.state:
        raise FormatError(f"{args.checkpoint}: checkpoint carries no config")
    cfg = config_from_dict(ck.state["config"])
    enc = build_encoder(harness._encoder_config(cfg), np.random.default_rng(0))
    for name, p in enc.params.items():
        p.data[...] = ck.tensors[f"f_q/{name}"]
    for name, buf in enc.buffers().items():
        buf[...] = ck.tensors[f"f_q/{name}"]
    train, val = _eval_datasets(cfg, args.data)
    if train.sample_shape != tuple(cfg.encoder.input_shape):
        raise ConsistencyError(f"data samples {train.sample_shape} do not fit encoder input {cfg.encoder.input_shape}")
    do_knn = args.knn or not args.probe
    do_probe = args.probe or not args.knn
    result = {"checkpoint": str(args.checkpoint), "step": ck.step,
              "raw_knn_val_acc": knn_monitor(raw_features(train), raw_features(val), cfg.eval.knn_k)}
    if do_knn:
        tap = cfg.eval.knn_tap
        result["knn_val_acc"] = knn_monitor(extract_features(enc, train, tap), extract_features(enc, val, tap),
                                            cfg.eval.knn_k, cfg.eval.knn_temperature)
    if do_probe:
        tap = cfg.eval.probe_tap
        pr = linear_probe(extract_features(enc, train, tap), extract_features(enc, val, tap),
                          ProbeConfig(lrs=list(cfg.eval.probe_lrs), epochs=cfg.eval.probe_epochs,
                                      weight_decay=cfg.eval.probe_weight_decay, seed=cfg.seed))
        result.update(probe_acc=pr.accuracy, probe_best_lr=pr.best_lr,
                      probe_grid={str(k): v for k, v in pr.per_lr.items()})
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import main as run

    return EXIT_OK if run(instances=args.instances, seed=args.seed) else 1


def cmd_gen_data(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.spec}: invalid JSON ({exc})") from exc
    raw = raw.get("data", raw)
    try:
        d = DataConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"{args.spec}: {exc}") from exc
    full = synth_clusters(d.n_classes, d.n_train_per_class + d.n_val_per_class, d.shape, d.class_sep,
                          d.noise_sigma, d.seed, nuisance=AugmentationConfig(**d.nuisance) if d.nuisance else None,
                          noise_smooth=d.noise_smooth)
    train, val = train_val_split(full, d.n_val_per_class, d.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(train, out / "train-images.idx", out / "train-labels.idx")
    write_idx(val, out / "val-images.idx", out / "val-labels.idx")
    print(f"wrote {len(train)} train / {len(val)} val samples of shape {train.sample_shape} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mocolab", description="Momentum-contrast experiments on a numpy autodiff core.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--epochs", type=int, help="override the configured epoch count")
        return sp

    t = with_config(sub.add_parser("train", help="run one experiment"))
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action="store_true")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    for name, flag, default, func in (("sweep-k", "--ks", "16,64,256,1024", cmd_sweep_k),
                                      ("sweep-m", "--ms", "0,0.9,0.99,0.999", cmd_sweep_m)):
        sp = with_config(sub.add_parser(name, help=f"sweep over {flag[2:]}"))
        sp.add_argument(flag, default=default)
        sp.add_argument("--seeds", default="0")
        sp.add_argument("--workers", type=int, default=1)
        if name == "sweep-k":
            sp.add_argument("--mechanisms", default="moco")
        sp.set_defaults(func=func)

    a = with_config(sub.add_parser("ablate-bn", help="paired runs with shuffled BN on and off"))
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate_bn)

    e = sub.add_parser("eval", help="kNN / linear probe on a checkpoint's query encoder")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default="config", help="IDX directory, or 'config' to regenerate the run's corpus")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--probe", action="store_true")
    g.add_argument("--knn", action="store_true")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference suite for every differentiable op")
    gc.add_argument("--instances", type=int, default=20)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    gd = sub.add_parser("gen-data", help="write a synthetic corpus as IDX files")
    gd.add_argument("--spec", required=True, help="data config JSON (bare or under a 'data' key)")
    gd.add_argument("--out", required=True)
    gd.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, ConsistencyError) as exc:
        print(f"io/format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MocoLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if isinstance(exc, FloatingPointError) else 1


if __name__ == "__main__":
    sys.exit(main())
