"""End-to-end desk experiment: dense training, MTP, baselines, report."""

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from mtprune.netgraph import build_desk_network, extract_scaling_factors
from mtprune.pipeline import training as T
from mtprune.pipeline.checkpoints import atomic_text, atomic_write, save_weights
from mtprune.pipeline.data import datasets_for
from mtprune.pipeline import plots
from mtprune.profiler import count_flops, count_params, measure_latency
from mtprune.sparse_trainer import SPARSITY_EPS, History, save_checkpoint, train_sparse

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("stage", "top1", "miou", "params", "flops", "params_ratio", "flops_ratio",
                  "latency_ms", "sparsity", "policy", "p", "sparse_epochs", "seed",
                  "config_hash")
# measured quantities that legitimately differ between identical runs
NONDETERMINISTIC = ("latency_ms",)


class ExperimentFailed(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ExperimentReport:
    config_hash: str
    seed: int
    rows: List[dict] = field(default_factory=list)
    plans: Dict[str, Dict[str, str]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    history: Optional[History] = None
    control_history: Optional[History] = None
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    def row(self, stage) -> dict:
        for r in self.rows:
            if r["stage"] == stage:
                return r
        raise KeyError(stage)

    def miou(self, stage) -> float:
        return self.row(stage)["miou"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({k: r.get(k, "") for k in REPORT_COLUMNS})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seed": self.seed, "rows": self.rows,
                "plans": self.plans, "summary": self.summary,
                "history": self.history.rows if self.history else [],
                "control_history": self.control_history.rows if self.control_history else [],
                "failed_stage": self.failed_stage, "error": self.error}

    def deterministic_values(self) -> Dict[str, float]:
        """Flat map of every reported number except wall-clock timings."""
        out = {}
        for r in self.rows:
            for k, v in r.items():
                if k not in NONDETERMINISTIC and isinstance(v, (int, float)):
                    out[f"{r['stage']}.{k}"] = float(v)
        for k, v in self.summary.items():
            if isinstance(v, (int, float)):
                out[f"summary.{k}"] = float(v)
        for name, hist in (("history", self.history), ("control", self.control_history)):
            for r in (hist.rows if hist else []):
                for k, v in r.items():
                    out[f"{name}.{r['round']}.{k}"] = float(v)
        return out


def gamma_sparsity(graph, weights) -> float:
    """Fraction of prunable scales (both partitions) with |gamma| < 1e-3."""
    values = np.concatenate([extract_scaling_factors(graph, weights, p).values
                             for p in ("backbone", "decoder")])
    return float((np.abs(values) < SPARSITY_EPS).mean())


def mtp_init(graph, pretrained, dense):
    """W1 from classification pre-training, W2 from the dense segmentation model."""
    init = dict(dense)
    for k, v in pretrained.items():
        layer = k.split(".")[0]
        if layer in graph and graph.layer(layer).partition == "backbone":
            init[k] = v
    return init


def _write_report(report: ExperimentReport, out: Path):
    atomic_text(out / "report.csv", report.to_csv())
    atomic_text(out / "report.json", json.dumps(report.to_dict(), indent=1, sort_keys=True))


def run_experiment(config, out_dir=None, measure: bool = True) -> ExperimentReport:
    """Run every stage for one seed and persist artifacts under ``out_dir``.

    On failure the partial report is written with the failing stage recorded
    and :class:`ExperimentFailed` is raised.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        for sub in ("checkpoints", "plans", "figures"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        atomic_text(out / "config.ini", config.to_ini())
    report = ExperimentReport(config.config_hash(), config.seed)
    graph = build_desk_network(config)
    base_params, base_flops = count_params(graph), count_flops(graph)
    p, policy = config.percentile, config.threshold_policy

    def add_row(stage, g, weights, ds, **extra):
        metrics = T.evaluate(g, weights, ds, config.seg_classes)
        params, flops = count_params(g), count_flops(g)
        row = {"stage": stage, "top1": metrics["top1"], "miou": metrics["miou"],
               "params": params, "flops": flops, "params_ratio": params / base_params,
               "flops_ratio": flops / base_flops, "latency_ms": None, "seed": config.seed,
               "config_hash": report.config_hash, "sparse_epochs": None, "policy": None,
               "p": None, "sparsity": None}
        if measure:
            row["latency_ms"] = measure_latency(g, weights, runs=config.latency_runs).latency_ms
        row.update(extra)
        report.rows.append(row)
        log.info("%s: top1 %.2f mIoU %.2f params %d", stage, row["top1"], row["miou"], params)
        if out is not None:
            save_weights(out / "checkpoints" / f"{stage}.pt", g, weights, config)
        return row

    def pruned_arm(stage, weights, pol, cls_epochs=None, plan_name=None):
        plan, pg, pw = T.prune_with(graph, weights, p, pol)
        tuned, _ = T.finetune_two_stage(pg, pw, ds, config, cls_epochs=cls_epochs)
        report.plans[stage] = plan.bitstrings()
        if out is not None:
            plan.save(out / "plans" / f"{plan_name or stage}.txt")
            plots.plot_kept_channels(graph, plan, out / "figures" / f"kept_{stage}.png",
                                     f"{stage}: p={p:g}, {pol}")
        add_row(stage, pg, tuned, ds, policy=pol, p=p)
        return plan

    stage = "data"
    t0 = time.perf_counter()
    try:
        ds = datasets_for(config)
        if out is not None:
            graph.save(out / "graph.json")

        stage = "pretrain"
        pre = T.pretrain_backbone(graph, ds, config)
        add_row("pretrain", graph, pre, ds)

        stage = "dense"
        dense = T.train_segmentation(graph, pre, ds, config)
        add_row("dense", graph, dense, ds)

        stage = "mtp_sparse"
        init = mtp_init(graph, pre, dense)
        state, history = train_sparse(graph, init, ds, config)
        report.history = history
        sparse = state.sparse_weights()
        add_row("mtp_sparse", graph, sparse, ds, sparsity=gamma_sparsity(graph, sparse),
                sparse_epochs=config.sparse_epochs)
        if out is not None:
            atomic_write(out / "checkpoints" / "mtp_lagrangian.pt",
                         lambda tmp: save_checkpoint(tmp, state, config))
            atomic_write(out / "history.csv", history.to_csv)

        stage = "mtp_control"
        ctrl_cfg = config.replace(alpha1=0.0, alpha2=0.0)
        ctrl_state, ctrl_history = train_sparse(graph, init, ds, ctrl_cfg)
        report.control_history = ctrl_history
        control = ctrl_state.sparse_weights()
        add_row("mtp_control", graph, control, ds, sparsity=gamma_sparsity(graph, control),
                sparse_epochs=config.sparse_epochs)
        if out is not None:
            atomic_write(out / "history_control.csv", ctrl_history.to_csv)
            plots.plot_sparsity(history, out / "figures" / "sparsity.png", ctrl_history)

        stage = "mtp"
        plan = pruned_arm("mtp", sparse, policy)
        stage = "mtp_seg_only"
        pruned_arm("mtp_seg_only", sparse, policy, cls_epochs=0)
        stage = "mtp_alt_policy"
        other = "unified" if policy == "independent" else "independent"
        pruned_arm(f"mtp_{other}", sparse, other)

        stage = "slimming"
        slim = T.run_baseline_slimming(graph, dense, ds, config, p=p, policy=policy)
        report.plans["slimming"] = slim["plan"].bitstrings()
        if out is not None:
            slim["plan"].save(out / "plans" / "slimming.txt")
        add_row("slimming", slim["graph"], slim["weights"], ds, policy=policy, p=p,
                sparse_epochs=config.slimming_epochs,
                sparsity=gamma_sparsity(graph, slim["sparse"]))

        stage = "uniform"
        uni = T.run_baseline_uniform(graph, dense, config.uniform_keep_fraction, ds, config)
        report.plans["uniform"] = uni["plan"].bitstrings()
        if out is not None:
            uni["plan"].save(out / "plans" / "uniform.txt")
        add_row("uniform", uni["graph"], uni["weights"], ds, policy="uniform",
                p=100 * (1 - config.uniform_keep_fraction))

        stage = "report"
        report.summary = {
            "sparsity_mtp": report.row("mtp_sparse")["sparsity"],
            "sparsity_control": report.row("mtp_control")["sparsity"],
            "rel_residual_first": history.rows[0]["rel_residual"] if len(history) else None,
            "rel_residual_last": history.rows[-1]["rel_residual"] if len(history) else None,
            "tau1": plan.tau1, "tau2": plan.tau2,
            "predicted_params_ratio": plan.predicted_params_ratio,
            "predicted_flops_ratio": plan.predicted_flops_ratio,
            "rounds_run": len(history),
            "seconds": time.perf_counter() - t0,
        }
        if out is not None:
            plots.plot_accuracy_flops(report.rows, out / "figures" / "accuracy_flops.png")
            _write_report(report, out)
    except Exception as exc:
        report.failed_stage, report.error = stage, f"{type(exc).__name__}: {exc}"
        log.error("stage %s failed: %s", stage, exc)
        if out is not None:
            _write_report(report, out)
        raise ExperimentFailed(stage, exc) from exc
    return report


def median_table(reports: List[ExperimentReport], stages=None) -> Dict[str, dict]:
    """Median top-1 and mIoU per stage across seeds."""
    stages = stages or [r["stage"] for r in reports[0].rows]
    table = {}
    for s in stages:
        table[s] = {m: statistics.median(rep.row(s)[m] for rep in reports)
                    for m in ("top1", "miou", "params_ratio", "flops_ratio")}
    return table


def write_summary(reports: List[ExperimentReport], path):
    """Per-stage medians across seeds as CSV."""
    table = median_table(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "median_top1", "median_miou", "params_ratio", "flops_ratio",
                     "seeds"])
    for s, m in table.items():
        writer.writerow([s, m["top1"], m["miou"], m["params_ratio"], m["flops_ratio"],
                         " ".join(str(r.seed) for r in reports)])
    return atomic_text(path, buf.getvalue())
