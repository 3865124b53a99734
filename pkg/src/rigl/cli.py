"""Command-line harness: ``rigl <subcommand> ...``.

Subcommands: train, eval, flops, landscape, compact, heatmap, rewind.
The data root comes from ``$RIGL_DATA_ROOT`` unless the config sets
``experiment.data_path``.
"""
import argparse
import json
import logging
import statistics
import sys
from pathlib import Path

import rigl
from rigl import kernels
from rigl.analysis import (RewindRecord, compact_dead_neurons, input_connection_heatmap,
                           lottery_rewind_train, write_heatmap_csv, write_pgm)
from rigl.checkpoint import (Checkpoint, CheckpointError, checkpoint_from_trainer, load_checkpoint,
                             save_checkpoint)
from rigl.config import ConfigError, load_config
from rigl.data import load_dataset
from rigl.flops import METHODS, build_report
from rigl.landscape import (LOSS_NOTE, barrier_height, evaluate_path, linear_path, optimize_bezier,
                            write_curve_csv)
from rigl.tensor import dataset_loss, error_rate
from rigl.trainers import Trainer, TrainingDiverged, prepare_model, write_trace_csv

log = logging.getLogger("rigl")


def _datasets(cfg, splits=("train", "test")):
    path = cfg.data_path
    return [load_dataset(cfg.dataset, s, path) for s in splits]


def _mean_std(values):
    values = [v for v in values if v == v]
    if not values:
        return float("nan"), float("nan")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), std


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(cfg, seeds):
    return {"version": rigl.__version__, "kernels": kernels.BACKEND, "seeds": list(seeds),
            "method": cfg.method, "arch": cfg.arch}


# --------------------------------------------------------------------------
# train


def train_one(cfg, seed, train_data, test_data, out):
    """Train one seed into ``out``; returns a result dict."""
    out.mkdir(parents=True, exist_ok=True)
    arch = cfg.architecture()
    alloc = None if cfg.method == "dense" else cfg.allocation()
    model, initial = prepare_model(arch, cfg.method, alloc, seed, train_data, cfg.batch_size)
    save_checkpoint(out / "init.srgl", Checkpoint.from_model(initial, 0, {"seed": seed, "dense_init": True}))
    trainer = Trainer(model, train_data, test_data, cfg.train_config(), seed, alloc)
    every = cfg.checkpoint_interval
    result = {"seed": seed, "diverged": False}
    try:
        while trainer.t < trainer.config.steps:
            until = trainer.config.steps if not every else min(trainer.config.steps, trainer.t + every)
            trainer.run(until=until)
            if every and trainer.t < trainer.config.steps:
                save_checkpoint(out / f"step{trainer.t:07d}.srgl", checkpoint_from_trainer(trainer))
    except TrainingDiverged as exc:
        log.error("seed %d: %s", seed, exc)
        result["diverged"] = True
    write_trace_csv(out / "metrics.csv", trainer.trace)
    save_checkpoint(out / "final.srgl", checkpoint_from_trainer(trainer))
    result.update(final_error=trainer.final_error, best_error=trainer.best_error,
                  steps=trainer.t, cumulative_train_flops=trainer.cumulative_flops,
                  final_sparsity=trainer.trace[-1]["sparsity"] if trainer.trace else float("nan"))
    _write_json(out / "result.json", result)
    return result, trainer


def flops_report(cfg, pruning_trace=None):
    arch = cfg.architecture()
    if cfg.method == "dense":
        sparsities, exempt = [0.0] * len(arch.layers), ()
    else:
        alloc = cfg.allocation()
        sparsities, exempt = alloc.sparsities, alloc.dense_layers
    delta_t = cfg.update_schedule().delta_t
    methods = [m for m in METHODS if m != "pruning" or pruning_trace is not None]
    return build_report(arch, sparsities, delta_t, methods, pruning_trace, exempt)


def _write_flops(report, out):
    (out / "flops.json").write_text(report.to_json() + "\n")
    (out / "flops.txt").write_text(report.table() + "\n")


def cmd_train(args):
    cfg = load_config(args.config)
    seeds = (args.seed,) if args.seed is not None else cfg.seeds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.source_text)
    _write_json(out / "manifest.json", _manifest(cfg, seeds))
    train_data, test_data = _datasets(cfg)
    results, pruning_trace = [], None
    for seed in seeds:
        res, trainer = train_one(cfg, seed, train_data, test_data, out / f"seed{seed}")
        if cfg.method == "pruning" and trainer.flops_sparsity_trace:
            pruning_trace = trainer.flops_sparsity_trace
        results.append(res)
        print(f"seed {seed}: final error {res['final_error']:.4f}, best {res['best_error']:.4f}")
    _write_flops(flops_report(cfg, pruning_trace), out)
    fm, fs = _mean_std([r["final_error"] for r in results])
    bm, bs = _mean_std([r["best_error"] for r in results])
    summary = {"method": cfg.method, "seeds": list(seeds), "final_error_mean": fm, "final_error_std": fs,
               "best_error_mean": bm, "best_error_std": bs, "runs": results}
    _write_json(out / "summary.json", summary)
    text = (f"{cfg.method} over {len(seeds)} seed(s): final test error {100 * fm:.2f} +- {100 * fs:.2f}%, "
            f"best {100 * bm:.2f} +- {100 * bs:.2f}%")
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    return 1 if any(r["diverged"] for r in results) else 0


# --------------------------------------------------------------------------
# other subcommands


def _need(args, *names):
    for n in names:
        if getattr(args, n.replace("-", "_")) is None:
            raise ConfigError(n, "required for this subcommand")


def _load(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_eval(args):
    _need(args, "config", "checkpoint-a")
    cfg = load_config(args.config)
    (test_data,) = _datasets(cfg, ("test",))
    model = _load(args.checkpoint_a).model()
    res = {"test_error": error_rate(model, test_data.images, test_data.labels),
           "test_loss": dataset_loss(model, test_data.images, test_data.labels)}
    print(json.dumps(res, sort_keys=True))
    if args.out:
        _write_json(_out(args) / "eval.json", res)
    return 0


def cmd_flops(args):
    _need(args, "config")
    cfg = load_config(args.config)
    report = flops_report(cfg)
    print(report.table())
    if args.out:
        _write_flops(report, _out(args))
    return 0


def cmd_landscape(args):
    _need(args, "config", "checkpoint-a", "checkpoint-b")
    cfg = load_config(args.config)
    a, b = _load(args.checkpoint_a), _load(args.checkpoint_b)
    if a.arch != b.arch:
        raise ValueError("checkpoints have different architectures")
    ma, mb = a.model(), b.model()
    (train_data,) = _datasets(cfg, ("train",))
    ls = cfg.landscape
    eval_data = train_data.subset(ls["eval_size"]) if ls.get("eval_size") else train_data
    points = ls.get("num_points", 21)
    out = _out(args)
    curve = evaluate_path(linear_path(ma, mb, args.space), ma, eval_data, points)
    write_curve_csv(out / "linear.csv", curve)
    summary = {"loss": LOSS_NOTE, "space": args.space, "linear_barrier": barrier_height(curve)}
    if args.order >= 2:
        path, trace = optimize_bezier(ma, mb, train_data, args.order, args.space,
                                      ls.get("iterations", 2000), ls.get("lr", 0.01),
                                      args.seed or 0, ls.get("batch_size", cfg.batch_size),
                                      noise=ls.get("noise", 0.0))
        bez = evaluate_path(path, ma, eval_data, points)
        write_curve_csv(out / f"bezier{args.order}_{args.space}.csv", bez)
        summary.update(order=args.order, bezier_barrier=barrier_height(bez), iterations=len(trace))
    _write_json(out / "landscape.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_compact(args):
    _need(args, "checkpoint-a")
    model = _load(args.checkpoint_a).model()
    res = compact_dead_neurons(model)
    out = _out(args)
    (out / "compaction.txt").write_text(res.report() + "\n")
    save_checkpoint(out / "compact.srgl", Checkpoint.from_model(res.model, meta={"kept_inputs": res.kept[0].tolist()}))
    print(res.report())
    return 0


def cmd_heatmap(args):
    _need(args, "checkpoint-a")
    grid = input_connection_heatmap(_load(args.checkpoint_a).model())
    out = _out(args)
    write_heatmap_csv(out / "heatmap.csv", grid)
    write_pgm(out / "heatmap.pgm", grid)
    print(f"heatmap {grid.shape[0]}x{grid.shape[1]}, {int(grid.sum())} connections")
    return 0


def cmd_rewind(args):
    _need(args, "config", "checkpoint-a", "checkpoint-b")
    cfg = load_config(args.config)
    init, final = _load(args.checkpoint_a), _load(args.checkpoint_b)
    if init.arch != final.arch:
        raise ValueError("initial and final checkpoints have different architectures")
    seed = args.seed if args.seed is not None else init.meta.get("seed", 0)
    record = RewindRecord.from_run(init.model(), final.model(), seed)
    train_data, test_data = _datasets(cfg)
    alloc = None if cfg.method == "dense" else cfg.allocation()
    trainer = lottery_rewind_train(record, args.method, train_data, test_data, cfg.train_config(), alloc,
                                   cfg.architecture())
    out = _out(args)
    write_trace_csv(out / f"rewind_{args.method}.csv", trainer.trace)
    save_checkpoint(out / f"rewind_{args.method}.srgl", checkpoint_from_trainer(trainer))
    res = {"method": args.method, "seed": seed, "final_error": trainer.final_error,
           "best_error": trainer.best_error}
    _write_json(out / f"rewind_{args.method}.json", res)
    print(json.dumps(res, sort_keys=True))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "flops": cmd_flops, "landscape": cmd_landscape,
            "compact": cmd_compact, "heatmap": cmd_heatmap, "rewind": cmd_rewind}


def build_parser():
    p = argparse.ArgumentParser(prog="rigl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default=None if name in ("eval", "flops") else "runs/" + name)
        s.add_argument("--checkpoint-a")
        s.add_argument("--checkpoint-b")
        s.add_argument("--order", type=int, choices=(1, 2, 3), default=2)
        s.add_argument("--space", choices=("dense", "sparse"), default="dense")
        if name == "rewind":
            s.add_argument("--method", choices=("static", "rigl"), default="static")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
