"""Dense training, fine-tuning and the single-task pruning baselines."""

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from mtprune.model import GraphNet, clone_state, head_keys, partition_keys
from mtprune.netgraph import NetworkGraph, extract_scaling_factors
from mtprune.pipeline.data import batches
from mtprune.pipeline.metrics import eval_miou, eval_top1
from mtprune.pruner import apply_plan, build_plan, uniform_plan
from mtprune.sparse_trainer import TrainingDiverged

log = logging.getLogger(__name__)

# tags that decorrelate the batch order of different stages under one seed
STAGE_TAGS = {"pretrain": 11, "seg": 12, "slim": 13, "ft_cls": 14, "ft_seg": 15}


def stage_seed(config, stage, epoch):
    return (int(config.seed) * 7919 + STAGE_TAGS[stage]) * 1009 + epoch


def train_epochs(net: GraphNet, head, data, epochs, lr, batch_size, seed_fn,
                 params=None, alpha=0.0, gammas=(), momentum=0.0, schedule="constant"):
    """SGD on cross-entropy.

    With ``alpha > 0`` the L1 subgradient ``alpha * sign(gamma)`` is added to
    the listed batchnorm scales after every backward pass (network slimming).
    ``schedule="cosine"`` anneals the rate to zero over the whole budget.
    """
    params = list(net.parameters()) if params is None else list(params)
    opt = torch.optim.SGD(params, lr=lr, momentum=momentum)
    sched = None
    if schedule == "cosine" and epochs:
        steps = epochs * math.ceil(data[0].shape[0] / batch_size)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, steps)
    elif schedule not in ("constant", "cosine"):
        raise ValueError(f"unknown schedule {schedule!r}")
    losses = []
    for epoch in range(epochs):
        net.train()
        for x, y in batches(data, batch_size, seed_fn(epoch)):
            opt.zero_grad()
            loss = F.cross_entropy(net(x, head), y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite {head} loss in epoch {epoch}")
            loss.backward()
            if alpha:
                for g in gammas:
                    g.grad.data.add_(alpha * torch.sign(g.data))
            opt.step()
            if sched is not None:
                sched.step()
            losses.append(loss.item())
    return losses


def _net(graph, weights):
    net = GraphNet(graph)
    if weights is not None:
        net.load_state_dict(weights)
    return net


def init_weights(graph: NetworkGraph, seed):
    torch.manual_seed(seed)
    return clone_state(GraphNet(graph).state_dict())


def pretrain_backbone(graph, datasets, config, weights=None):
    """Classification pre-training of backbone + head; the decoder is untouched."""
    net = _net(graph, weights if weights is not None else init_weights(graph, config.seed))
    named = dict(net.named_parameters())
    params = [named[k] for k in partition_keys(graph, "backbone", heads=True)]
    train_epochs(net, "cls", datasets.cls_train, config.pretrain_epochs, config.pretrain_lr,
                 config.batch_size, lambda e: stage_seed(config, "pretrain", e), params,
                 momentum=config.momentum, schedule=config.lr_schedule)
    return clone_state(net.state_dict())


def train_segmentation(graph, weights, datasets, config, epochs=None, lr=None,
                       stage="seg"):
    """Joint backbone + decoder training on segmentation data."""
    net = _net(graph, weights)
    named = dict(net.named_parameters())
    keys = partition_keys(graph, "backbone") + partition_keys(graph, "decoder")
    train_epochs(net, "seg", datasets.seg_train,
                 config.seg_epochs if epochs is None else epochs,
                 config.seg_lr if lr is None else lr, config.batch_size,
                 lambda e: stage_seed(config, stage, e), [named[k] for k in keys],
                 momentum=config.momentum, schedule=config.lr_schedule)
    return clone_state(net.state_dict())


def evaluate(graph, weights, datasets, seg_classes):
    net = _net(graph, weights)
    return {"top1": eval_top1(net, datasets.cls_val),
            "miou": eval_miou(net, datasets.seg_val, seg_classes)}


def finetune_two_stage(graph, weights, datasets, config, cls_epochs=None, seg_epochs=None):
    """Classification fine-tuning of backbone + head, then segmentation fine-tuning.

    Returns ``(weights, metrics)`` with metrics recorded after each stage.
    """
    cls_epochs = config.ft_cls_epochs if cls_epochs is None else cls_epochs
    seg_epochs = config.ft_seg_epochs if seg_epochs is None else seg_epochs
    net = _net(graph, weights)
    named = dict(net.named_parameters())
    metrics = {}
    if cls_epochs:
        params = [named[k] for k in partition_keys(graph, "backbone", heads=True)]
        train_epochs(net, "cls", datasets.cls_train, cls_epochs, config.ft_cls_lr,
                     config.batch_size, lambda e: stage_seed(config, "ft_cls", e), params,
                     momentum=config.momentum, schedule=config.lr_schedule)
        metrics["stage1"] = evaluate(graph, net.state_dict(), datasets, config.seg_classes)
    if seg_epochs:
        keys = partition_keys(graph, "backbone") + partition_keys(graph, "decoder")
        train_epochs(net, "seg", datasets.seg_train, seg_epochs, config.ft_seg_lr,
                     config.batch_size, lambda e: stage_seed(config, "ft_seg", e),
                     [named[k] for k in keys], momentum=config.momentum,
                     schedule=config.lr_schedule)
        metrics["stage2"] = evaluate(graph, net.state_dict(), datasets, config.seg_classes)
    return clone_state(net.state_dict()), metrics


def slimming_sparse_train(graph, weights, datasets, config, alpha=None, epochs=None):
    """Single-task sparse training of the whole segmentation network.

    L1 on every prunable scale of both partitions, segmentation data only.
    """
    alpha = config.slim_alpha if alpha is None else alpha
    net = _net(graph, weights)
    named = dict(net.named_parameters())
    keys = partition_keys(graph, "backbone") + partition_keys(graph, "decoder")
    gammas = [named[f"{graph.scale_layer(c.id).id}.weight"] for c in graph.prunable_layers()]
    train_epochs(net, "seg", datasets.seg_train,
                 config.slimming_epochs if epochs is None else epochs, config.slim_lr,
                 config.batch_size, lambda e: stage_seed(config, "slim", e),
                 [named[k] for k in keys], alpha=alpha, gammas=gammas)
    return clone_state(net.state_dict())


def prune_with(graph, weights, p, policy):
    gb = extract_scaling_factors(graph, weights, "backbone")
    gd = extract_scaling_factors(graph, weights, "decoder")
    plan = build_plan(graph, gb, gd, p, policy)
    pruned_graph, pruned_weights = apply_plan(graph, weights, plan)
    return plan, pruned_graph, pruned_weights


def run_baseline_slimming(graph, weights, datasets, config, p=None, policy=None):
    """Slimming baseline: sparse-train on segmentation, threshold-prune, fine-tune."""
    p = config.percentile if p is None else p
    policy = config.threshold_policy if policy is None else policy
    sparse = slimming_sparse_train(graph, weights, datasets, config)
    plan, pg, pw = prune_with(graph, sparse, p, policy)
    tuned, metrics = finetune_two_stage(pg, pw, datasets, config)
    return {"sparse": sparse, "plan": plan, "graph": pg, "pruned": pw,
            "weights": tuned, "metrics": metrics}


def run_baseline_uniform(graph, weights, keep_fraction, datasets, config):
    """Keep ceil(keep_fraction * C) largest-|gamma| channels per prunable layer."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    gb = extract_scaling_factors(graph, weights, "backbone")
    gd = extract_scaling_factors(graph, weights, "decoder")
    plan = uniform_plan(graph, gb, gd, keep_fraction)
    pg, pw = apply_plan(graph, weights, plan)
    tuned, metrics = finetune_two_stage(pg, pw, datasets, config)
    return {"plan": plan, "graph": pg, "pruned": pw, "weights": tuned, "metrics": metrics}
