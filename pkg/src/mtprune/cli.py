"""Command line entry point: ``mtprune <command> [options]``."""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from mtprune.config import ConfigError, keep_fraction_to_percentile, load_config, smoke_config
from mtprune.netgraph import build_desk_network
from mtprune.pipeline import plots
from mtprune.pipeline import training as T
from mtprune.pipeline.checkpoints import atomic_text, load_weights, save_weights
from mtprune.pipeline.data import datasets_for, load_datasets, save_datasets
from mtprune.pipeline.experiment import (ExperimentFailed, ExperimentReport, mtp_init,
                                         run_experiment, write_summary)
from mtprune.profiler import measure_latency, profile
from mtprune.sparse_trainer import save_checkpoint, train_sparse

log = logging.getLogger("mtprune")
OUT_ENV = "MTPRUNE_OUT"


def _config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "keep_fraction", None) is not None:
        overrides["percentile"] = keep_fraction_to_percentile(args.keep_fraction)
    if getattr(args, "threshold_policy", None):
        overrides["threshold_policy"] = args.threshold_policy
    if args.smoke:
        if args.config:
            raise ConfigError("--smoke and --config are mutually exclusive")
        return smoke_config(**overrides)
    return load_config(args.config, **overrides)


def _out(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data(args, config):
    if getattr(args, "data", None):
        return load_datasets(args.data)
    return datasets_for(config)


def _emit(rows, path=None):
    """Write rows as CSV to stdout and optionally to a file."""
    if not rows:
        return
    keys = list(rows[0])
    writer = csv.DictWriter(sys.stdout, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def cmd_gen_data(args):
    config = _config(args)
    path = _out(args) / "data.pt"
    save_datasets(datasets_for(config), path)
    print(path)


def cmd_pretrain(args):
    config = _config(args)
    graph = build_desk_network(config)
    weights = T.pretrain_backbone(graph, _data(args, config), config)
    print(save_weights(_out(args) / "pretrain.pt", graph, weights, config))


def cmd_train_seg(args):
    config = _config(args)
    graph, weights, _ = load_weights(args.weights)
    weights = T.train_segmentation(graph, weights, _data(args, config), config)
    print(save_weights(_out(args) / "dense.pt", graph, weights, config))


def cmd_mtp_train(args):
    config = _config(args)
    out = _out(args)
    graph, pre, _ = load_weights(args.pretrained)
    _, dense, _ = load_weights(args.dense)
    state, history = train_sparse(graph, mtp_init(graph, pre, dense), _data(args, config), config)
    save_checkpoint(out / "mtp_lagrangian.pt", state, config)
    history.to_csv(out / "history.csv")
    plots.plot_sparsity(history, out / "sparsity.png")
    _emit(history.rows)
    print(save_weights(out / "sparse.pt", graph, state.sparse_weights(), config))


def cmd_prune(args):
    config = _config(args)
    out = _out(args)
    graph, weights, _ = load_weights(args.weights)
    plan, pg, pw = T.prune_with(graph, weights, config.percentile, config.threshold_policy)
    plan.save(out / "plan.txt")
    plots.plot_kept_channels(graph, plan, out / "kept_channels.png",
                             f"p={config.percentile:g}, {config.threshold_policy}")
    _emit([{"tau1": plan.tau1, "tau2": plan.tau2, "params_ratio": plan.predicted_params_ratio,
            "flops_ratio": plan.predicted_flops_ratio}])
    print(save_weights(out / "pruned.pt", pg, pw, config))


def cmd_finetune(args):
    config = _config(args)
    graph, weights, _ = load_weights(args.weights)
    weights, metrics = T.finetune_two_stage(graph, weights, _data(args, config), config,
                                            cls_epochs=0 if args.seg_only else None)
    _emit([{"stage": k, **v} for k, v in metrics.items()])
    print(save_weights(_out(args) / "finetuned.pt", graph, weights, config))


def cmd_profile(args):
    config = _config(args)
    graph, weights, _ = load_weights(args.weights)
    res = measure_latency(graph, weights, runs=config.latency_runs) if args.latency \
        else profile(graph)
    _emit([res.row()], _out(args) / "profile.csv")


def cmd_eval(args):
    config = _config(args)
    graph, weights, _ = load_weights(args.weights)
    m = T.evaluate(graph, weights, _data(args, config), config.seg_classes)
    _emit([{"weights": args.weights, **m}], _out(args) / "eval.csv")


def _load_report(path) -> ExperimentReport:
    doc = json.loads(Path(path).read_text())
    return ExperimentReport(doc["config_hash"], doc["seed"], doc["rows"], doc["plans"],
                            doc["summary"], failed_stage=doc.get("failed_stage"))


def cmd_report(args):
    out = _out(args)
    paths = sorted(Path(args.runs).glob("**/report.json"))
    reports = [r for r in map(_load_report, paths) if r.failed_stage is None]
    if not reports:
        raise SystemExit(f"no complete report.json under {args.runs}")
    summary = write_summary(reports, out / "summary.csv")
    plots.plot_accuracy_flops([row for r in reports for row in r.rows],
                              out / "accuracy_flops.png")
    print(Path(summary).read_text(), end="")


def cmd_run_all(args):
    config = _config(args)
    root = _out(args) / config.replace(seed=0).config_hash()
    seeds = args.seeds if args.seeds else [config.seed]
    reports = []
    for seed in seeds:
        cfg = config.replace(seed=seed)
        try:
            reports.append(run_experiment(cfg, root / f"seed{seed}"))
        except ExperimentFailed as exc:
            log.error("%s", exc)
            return 1
        print(reports[-1].to_csv(), end="")
    write_summary(reports, root / "summary.csv")
    atomic_text(root / "config.ini", config.to_ini())
    plots.plot_accuracy_flops([row for r in reports for row in r.rows],
                              root / "accuracy_flops.png")
    print(root)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with config overrides")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./runs)")
    common.add_argument("--data", help="datasets file written by gen-data")
    common.add_argument("--smoke", action="store_true", help="tiny budgets for quick checks")
    common.add_argument("-v", "--verbose", action="store_true")

    prune_opts = argparse.ArgumentParser(add_help=False)
    prune_opts.add_argument("--keep-fraction", type=float)
    prune_opts.add_argument("--threshold-policy", choices=("independent", "unified"))

    parser = argparse.ArgumentParser(prog="mtprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common]).set_defaults(fn=cmd_gen_data)
    sub.add_parser("pretrain", parents=[common]).set_defaults(fn=cmd_pretrain)
    p = sub.add_parser("train-seg", parents=[common])
    p.add_argument("--weights", required=True)
    p.set_defaults(fn=cmd_train_seg)
    p = sub.add_parser("mtp-train", parents=[common])
    p.add_argument("--pretrained", required=True)
    p.add_argument("--dense", required=True)
    p.set_defaults(fn=cmd_mtp_train)
    p = sub.add_parser("prune", parents=[common, prune_opts])
    p.add_argument("--weights", required=True)
    p.set_defaults(fn=cmd_prune)
    p = sub.add_parser("finetune", parents=[common])
    p.add_argument("--weights", required=True)
    p.add_argument("--seg-only", action="store_true", help="skip the classification stage")
    p.set_defaults(fn=cmd_finetune)
    p = sub.add_parser("profile", parents=[common])
    p.add_argument("--weights", required=True)
    p.add_argument("--latency", action="store_true")
    p.set_defaults(fn=cmd_profile)
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--weights", required=True)
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("report", parents=[common])
    p.add_argument("--runs", required=True, help="directory holding run outputs")
    p.set_defaults(fn=cmd_report)
    p = sub.add_parser("run-all", parents=[common, prune_opts])
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(fn=cmd_run_all)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args) or 0
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"mtprune: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
