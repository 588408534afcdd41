"""Command-line entry points.

Verbs: train, prune, retrain, bench, verify-theorem, report, print-config.
Every run is deterministic under a fixed config and seed. Exit codes:
0 success, 1 failed theorem verification, 2 validation error, 3 pruning did
not reach its targets.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import checkpoint as ckpt
from . import config as cfgmod
from . import data as datamod
from . import report as reportmod
from . import scheduler as sched
from . import theorem
from .compact import (
    PlanError,
    bench,
    build_plan,
    compact,
    count_gflops,
    render_table,
    write_bench_report,
)
from .network import build_network, evaluate, loss_and_grads, lr_at, sgd_step
from .tensor import GeometryError, ShapeError

VALIDATION_ERRORS = (
    cfgmod.ConfigError,
    datamod.DatasetError,
    sched.ScheduleError,
    ckpt.CheckpointError,
    PlanError,
    reportmod.ReportError,
    GeometryError,
    ShapeError,
)


def _load_config(args) -> cfgmod.RunConfig:
    user = {}
    if args.config:
        if not os.path.exists(args.config):
            raise cfgmod.ConfigError(f"config file not found: {args.config}")
        import yaml

        with open(args.config) as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise cfgmod.ConfigError(f"{args.config} must hold a mapping")
        user = loaded
    if args.seed is not None:
        user["seed"] = args.seed
    if args.out is not None:
        user["out"] = args.out
    return cfgmod.parse_config(user)


def load_dataset(cfg: cfgmod.RunConfig):
    """Resolve the config's dataset into normalized train/val/test arrays.

    Returns (train, val, test, input_shape, means) where each split is an
    (images, labels) pair and means is the per-channel train mean actually
    subtracted (None when normalization is off).
    """
    ds = cfg.dataset
    if ds["kind"] == "synthetic":
        train, val, test = datamod.split_blobs(
            int(ds["n_train"]), int(ds["n_val"]), int(ds["n_test"]),
            classes=int(ds["classes"]), shape=tuple(ds["shape"]),
            noise=float(ds["noise"]), seed=int(ds["seed"]),
        )
    elif ds["kind"] == "cifar10":
        cfgmod.check_files(cfg)
        train, val, test = datamod.load_cifar10(ds["dir"])
    else:
        cfgmod.check_files(cfg)
        x, y = datamod.load_idx_pair(ds["train_images"], ds["train_labels"])
        if ds["test_images"]:
            tx, ty = datamod.load_idx_pair(ds["test_images"], ds["test_labels"])
        else:
            tx, ty = x[:0], y[:0]
        n_val = len(x) // 10
        train = (x[: len(x) - n_val], y[: len(x) - n_val])
        val = (x[len(x) - n_val :], y[len(x) - n_val :])
        test = (tx, ty)
    means = None
    if ds["normalize"]:
        means = datamod.channel_means(train[0])
        train = (datamod.apply_normalization(train[0], means), train[1])
        if len(val[0]):
            val = (datamod.apply_normalization(val[0], means), val[1])
        if len(test[0]):
            test = (datamod.apply_normalization(test[0], means), test[1])
    return train, val, test, train[0].shape[1:], means


def _build_net(cfg: cfgmod.RunConfig, input_shape, means):
    net = build_network(cfg.arch_defs, input_shape, seed=cfg.seed)
    if means is not None:
        net.meta["channel_means"] = [float(m) for m in means]
    return net


def train_network(net, x, y, cfg, seed, iters, val=None, log_rows=None):
    """Plain training loop; logs one row per epoch when a sink is given."""
    stream = datamod.batch_iter(x, y, cfg.batch_size, seed)
    per_epoch = max(len(x) // cfg.batch_size, 1)
    loss_acc = 0.0
    for k in range(iters):
        t = net.iteration
        xb, yb = next(stream)
        loss, dw, db = loss_and_grads(net, xb, yb)
        sgd_step(net, dw, db, cfg, lr=lr_at(cfg, t))
        loss_acc += loss
        if log_rows is not None and (k + 1) % per_epoch == 0:
            row = {
                "iteration": net.iteration,
                "epoch": (k + 1) // per_epoch,
                "lr": lr_at(cfg, t),
                "train_loss": loss_acc / per_epoch,
            }
            if val is not None and len(val[0]):
                acc, vloss = evaluate(net, val[0], val[1])
                row["val_accuracy"] = acc
                row["val_loss"] = vloss
            log_rows.append(row)
            loss_acc = 0.0
    return net


def _write_log(rows: list[dict], path) -> None:
    fields = ["iteration", "epoch", "lr", "train_loss", "val_accuracy", "val_loss"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in r.items()})


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train, val, _test, input_shape, means = load_dataset(cfg)
    net = _build_net(cfg, input_shape, means)
    os.makedirs(cfg.out, exist_ok=True)
    rows: list[dict] = []
    train_network(net, train[0], train[1], cfg.train, cfg.seed,
                  cfg.train.max_iters, val=val, log_rows=rows)
    _write_log(rows, os.path.join(cfg.out, "train_log.csv"))
    path = os.path.join(cfg.out, "baseline.ckpt")
    ckpt.save_checkpoint(path, net)
    if len(val[0]):
        acc, _ = evaluate(net, val[0], val[1])
        print(f"trained {cfg.train.max_iters} iterations, val accuracy {acc:.4f}")
    print(f"checkpoint: {path}")
    return 0


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    train, val, _test, input_shape, means = load_dataset(cfg)
    in_path = args.checkpoint or os.path.join(cfg.out, "baseline.ckpt")
    net, _ = ckpt.load_checkpoint(in_path)
    os.makedirs(cfg.out, exist_ok=True)
    report_path = os.path.join(cfg.out, "prune_report.csv")
    summary_path = os.path.join(cfg.out, "prune_summary.json")
    try:
        net, rep, groups = sched.run_pruning(
            net, train[0], train[1], cfg.prune_train, cfg.schedules,
            seed=cfg.seed, eval_data=val if len(val[0]) else None,
            report_stride=cfg.report_stride,
        )
    except sched.PruneDidNotConverge as e:
        reportmod.write_csv(e.report, report_path)
        reportmod.write_summary(e.report, summary_path)
        print(f"pruning did not converge: {e}", file=sys.stderr)
        return 3
    plan = build_plan(net, groups)
    flops = count_gflops(net, plan)
    rep.summary["flops_base"] = flops.total_base
    rep.summary["flops_pruned"] = flops.total_pruned
    rep.summary["flops_ratio"] = flops.ratio
    reportmod.write_csv(rep, report_path)
    reportmod.write_summary(rep, summary_path)
    out_path = os.path.join(cfg.out, "pruned.ckpt")
    ckpt.save_checkpoint(out_path, net, scheduler=sched.groups_to_meta(groups))
    for lay in rep.summary["layers"]:
        print(f"layer {lay['layer']}: pruned {lay['pruned']}/{lay['n_groups']} "
              f"{lay['kind']} groups (target {lay['target']})")
    print(f"FLOPs ratio {flops.ratio:.4f}x; checkpoint: {out_path}")
    return 0


def cmd_retrain(args) -> int:
    cfg = _load_config(args)
    train, val, _test, input_shape, means = load_dataset(cfg)
    in_path = args.checkpoint or os.path.join(cfg.out, "pruned.ckpt")
    net, scheduler_meta = ckpt.load_checkpoint(in_path)
    if scheduler_meta is None:
        raise cfgmod.ConfigError(f"{in_path} carries no pruning state to freeze")
    groups = sched.groups_from_meta(net, scheduler_meta)
    _, masks, bias_masks = sched.materialize_reg(net, groups)
    os.makedirs(cfg.out, exist_ok=True)
    stream = datamod.batch_iter(train[0], train[1], cfg.retrain.batch_size, cfg.seed + 1)
    rows: list[dict] = []
    per_epoch = max(len(train[0]) // cfg.retrain.batch_size, 1)
    loss_acc = 0.0
    for k in range(cfg.retrain_iters):
        xb, yb = next(stream)
        loss, dw, db = loss_and_grads(net, xb, yb)
        sgd_step(net, dw, db, cfg.retrain, lr=lr_at(cfg.retrain, k),
                 masks=masks, bias_masks=bias_masks)
        loss_acc += loss
        if (k + 1) % per_epoch == 0:
            row = {
                "iteration": net.iteration,
                "epoch": (k + 1) // per_epoch,
                "lr": lr_at(cfg.retrain, k),
                "train_loss": loss_acc / per_epoch,
            }
            if len(val[0]):
                acc, vloss = evaluate(net, val[0], val[1])
                row["val_accuracy"] = acc
                row["val_loss"] = vloss
            rows.append(row)
            loss_acc = 0.0
    _write_log(rows, os.path.join(cfg.out, "retrain_log.csv"))
    out_path = os.path.join(cfg.out, "retrained.ckpt")
    ckpt.save_checkpoint(out_path, net, scheduler=scheduler_meta)
    if len(val[0]):
        acc, _ = evaluate(net, val[0], val[1])
        print(f"retrained {cfg.retrain_iters} iterations, val accuracy {acc:.4f}")
    print(f"checkpoint: {out_path}")
    return 0


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    base_path = args.checkpoint or os.path.join(cfg.out, "baseline.ckpt")
    pruned_path = args.pruned or os.path.join(cfg.out, "pruned.ckpt")
    net, _ = ckpt.load_checkpoint(base_path)
    pruned, scheduler_meta = ckpt.load_checkpoint(pruned_path)
    if scheduler_meta is None:
        raise cfgmod.ConfigError(f"{pruned_path} carries no pruning state")
    groups = sched.groups_from_meta(pruned, scheduler_meta)
    plan = build_plan(pruned, groups)
    cnet = compact(pruned, plan)
    flops = count_gflops(pruned, plan)
    rep = bench(
        pruned, cnet,
        batch=int(cfg.bench["batch"]), repeats=int(cfg.bench["repeats"]),
        warmup=int(cfg.bench["warmup"]), seed=cfg.seed, flops=flops,
    )
    os.makedirs(cfg.out, exist_ok=True)
    out_path = os.path.join(cfg.out, "bench.json")
    write_bench_report(rep, out_path)
    print(render_table(rep))
    print(f"report: {out_path}")
    return 0


def cmd_verify_theorem(args) -> int:
    cfg = _load_config(args)
    passed, rows = theorem.theorem1_suite(deltas=(1e-3, 1e-2, 1e-1))
    os.makedirs(cfg.out, exist_ok=True)
    out_path = os.path.join(cfg.out, "theorem_continuation.csv")
    theorem.write_continuation_csv(rows, out_path)
    by_obj: dict[str, list] = {}
    for r in rows:
        by_obj.setdefault(r.objective, []).append(r)
    for name, rs in by_obj.items():
        ok = sum(r.shrank for r in rs if not r.jumped)
        considered = sum(not r.jumped for r in rs)
        jumped = sum(r.jumped for r in rs)
        print(f"{name}: {ok}/{considered} shrink checks passed"
              + (f", {jumped} basin jumps flagged" if jumped else ""))
    print(f"continuation data: {out_path}")
    if not passed:
        print("theorem verification FAILED", file=sys.stderr)
        return 1
    print("theorem verification passed")
    return 0


_GNUPLOT = """# L1-norm trajectories per group (one file per layer)
set datafile separator ','
set key off
set xlabel 'iteration'
set ylabel 'group L1-norm'
{plots}
pause -1
"""


def cmd_report(args) -> int:
    cfg = _load_config(args)
    in_path = args.report or os.path.join(cfg.out, "prune_report.csv")
    rep = reportmod.read_csv(in_path)
    os.makedirs(cfg.out, exist_ok=True)
    layers = sorted({r[1] for r in rep.rows})
    plots = []
    for layer in layers:
        rows = [r for r in rep.rows if r[1] == layer]
        steps = sorted({r[0] for r in rows})
        gids = sorted({r[2] for r in rows})
        table = {s: {} for s in steps}
        for r in rows:
            table[r[0]][r[2]] = r[3]
        path = os.path.join(cfg.out, f"trajectory_layer{layer}.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step"] + [f"group{g}" for g in gids])
            for s in steps:
                w.writerow([s] + [repr(table[s].get(g, 0.0)) for g in gids])
        plots.append(
            f"plot for [c=2:{len(gids) + 1}] 'trajectory_layer{layer}.csv' "
            f"using 1:c with lines title columnhead"
        )
        print(f"layer {layer}: {len(gids)} groups over {len(steps)} steps -> {path}")
    gp_path = os.path.join(cfg.out, "plot_l1.gp")
    with open(gp_path, "w") as f:
        f.write(_GNUPLOT.format(plots="\n".join(plots)))
    print(f"gnuplot script: {gp_path}")
    return 0


def cmd_print_config(args) -> int:
    cfg = _load_config(args)
    sys.stdout.write(cfgmod.dump_config(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="increg",
        description="Structured pruning by incremental per-group regularization",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="YAML config file")
        sp.add_argument("--seed", type=int, metavar="N", help="override the seed")
        sp.add_argument("--out", metavar="DIR", help="override the output directory")

    common(sub.add_parser("train", help="train a baseline model"))
    sp = sub.add_parser("prune", help="prune a trained model to the target ratios")
    common(sp)
    sp.add_argument("--checkpoint", metavar="PATH", help="baseline checkpoint")
    sp = sub.add_parser("retrain", help="fine-tune a pruned model with frozen masks")
    common(sp)
    sp.add_argument("--checkpoint", metavar="PATH", help="pruned checkpoint")
    sp = sub.add_parser("bench", help="compact a pruned model and time it")
    common(sp)
    sp.add_argument("--checkpoint", metavar="PATH", help="baseline checkpoint")
    sp.add_argument("--pruned", metavar="PATH", help="pruned checkpoint")
    common(sub.add_parser("verify-theorem", help="run the shrinkage test suite"))
    sp = sub.add_parser("report", help="emit trajectory CSVs and a gnuplot script")
    common(sp)
    sp.add_argument("--report", metavar="PATH", help="prune report CSV")
    common(sub.add_parser("print-config", help="print the merged configuration"))
    return p


_COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "retrain": cmd_retrain,
    "bench": cmd_bench,
    "verify-theorem": cmd_verify_theorem,
    "report": cmd_report,
    "print-config": cmd_print_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except sched.PruneDidNotConverge as e:
        print(f"pruning did not converge: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
