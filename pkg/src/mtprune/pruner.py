"""Percentile thresholds on batchnorm scales and channel-elimination surgery."""

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Dict, List, Tuple

import numpy as np
import torch

from mtprune import profiler
from mtprune.netgraph import (
    CHANNELWISE_KINDS,
    NetworkGraph,
    ScalingVector,
    StructuralError,
    validate,
)

POLICIES = ("independent", "unified")
PLAN_HEADER = "# mtprune pruning plan v1"


def cut_count(p: float, n: int) -> int:
    """floor(p/100 * n), evaluated exactly on the binary value of ``p``."""
    return math.floor(Fraction(p) * n / 100)


def _check_p(p):
    if not 0 < p < 100:
        raise ValueError(f"percentile must lie in (0, 100), got {p}")


def prune_order(values) -> np.ndarray:
    """Indices sorted by |value|, ties broken by position (canonical order)."""
    mags = np.abs(np.asarray(values, dtype=np.float64))
    return np.lexsort((np.arange(mags.size), mags))


def _threshold(values, k):
    if k == 0:
        return float("-inf")
    mags = np.abs(np.asarray(values, dtype=np.float64))
    return float(mags[prune_order(mags)[k - 1]])


def pruned_indices(gamma_backbone, gamma_decoder, p, policy="independent"):
    """Entry indices selected for removal in each partition (before the floor)."""
    _check_p(p)
    if policy not in POLICIES:
        raise ValueError(f"unknown threshold policy {policy!r}")
    gb, gd = _values(gamma_backbone), _values(gamma_decoder)
    if gb.size == 0 or gd.size == 0:
        raise ValueError("both partitions need at least one prunable channel")
    if policy == "independent":
        cut_b = prune_order(gb)[:cut_count(p, gb.size)]
        cut_d = prune_order(gd)[:cut_count(p, gd.size)]
    else:
        both = np.concatenate([gb, gd])
        cut = prune_order(both)[:cut_count(p, both.size)]
        cut_b, cut_d = cut[cut < gb.size], cut[cut >= gb.size] - gb.size
    return np.sort(cut_b), np.sort(cut_d)


def _values(vec):
    return vec.values if isinstance(vec, ScalingVector) else np.asarray(vec, dtype=np.float64)


def compute_thresholds(gamma_backbone, gamma_decoder, p: float,
                       policy: str = "independent") -> Tuple[float, float]:
    """Return ``(tau1, tau2)``.

    A channel is removed when its |gamma| is below or tied with the threshold
    and it falls inside the first floor(p/100 n) positions of the canonical
    sort.  ``-inf`` means nothing is cut.
    """
    _check_p(p)
    if policy not in POLICIES:
        raise ValueError(f"unknown threshold policy {policy!r}")
    gb, gd = _values(gamma_backbone), _values(gamma_decoder)
    if gb.size == 0 or gd.size == 0:
        raise ValueError("both partitions need at least one prunable channel")
    if policy == "independent":
        return _threshold(gb, cut_count(p, gb.size)), _threshold(gd, cut_count(p, gd.size))
    both = np.concatenate([gb, gd])
    tau = _threshold(both, cut_count(p, both.size))
    return tau, tau


@dataclass
class PruningPlan:
    keep_masks: Dict[str, Tuple[bool, ...]]
    tau1: float
    tau2: float
    percentile_p: float
    policy: str
    predicted_params: int = 0
    predicted_flops: int = 0
    base_params: int = 0
    base_flops: int = 0
    cut_backbone: int = 0
    cut_decoder: int = 0

    @property
    def predicted_params_ratio(self) -> float:
        return self.predicted_params / self.base_params if self.base_params else 1.0

    @property
    def predicted_flops_ratio(self) -> float:
        return self.predicted_flops / self.base_flops if self.base_flops else 1.0

    def kept(self, layer_id: str) -> List[int]:
        return [i for i, k in enumerate(self.keep_masks[layer_id]) if k]

    def bitstrings(self) -> Dict[str, str]:
        return {k: "".join("1" if b else "0" for b in m) for k, m in self.keep_masks.items()}

    def to_text(self) -> str:
        lines = [
            PLAN_HEADER,
            f"policy = {self.policy}",
            f"percentile = {self.percentile_p!r}",
            f"tau1 = {self.tau1!r}",
            f"tau2 = {self.tau2!r}",
            f"cut_backbone = {self.cut_backbone}",
            f"cut_decoder = {self.cut_decoder}",
            f"base_params = {self.base_params}",
            f"predicted_params = {self.predicted_params}",
            f"predicted_params_ratio = {self.predicted_params_ratio!r}",
            f"base_flops = {self.base_flops}",
            f"predicted_flops = {self.predicted_flops}",
            f"predicted_flops_ratio = {self.predicted_flops_ratio!r}",
            "[masks]",
        ]
        lines += [f"{k} = {v}" for k, v in self.bitstrings().items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PruningPlan":
        lines = [l.strip() for l in text.splitlines() if l.strip()]
        if not lines or lines[0] != PLAN_HEADER:
            raise StructuralError("not a pruning plan")
        head, masks, in_masks = {}, {}, False
        for line in lines[1:]:
            if line == "[masks]":
                in_masks = True
                continue
            key, _, value = (s.strip() for s in line.partition("="))
            if in_masks:
                masks[key] = tuple(ch == "1" for ch in value)
            else:
                head[key] = value
        return cls(masks, float(head["tau1"]), float(head["tau2"]), float(head["percentile"]),
                   head["policy"], int(head["predicted_params"]), int(head["predicted_flops"]),
                   int(head["base_params"]), int(head["base_flops"]),
                   int(head["cut_backbone"]), int(head["cut_decoder"]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "PruningPlan":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _check_vector(graph: NetworkGraph, vec, partition):
    expected = [(l.id, c) for l in graph.prunable_layers(partition)
                for c in range(l.out_channels)]
    got = [(l, c) for l, c, _ in vec.entries]
    if got != expected:
        raise StructuralError(f"{partition} scaling vector does not match the graph's "
                              "prunable channels")


def masks_from_cut(graph: NetworkGraph, gamma_backbone: ScalingVector,
                   gamma_decoder: ScalingVector, cut_b, cut_d):
    """Keep-masks from removal indices, with a one-channel floor per layer."""
    masks = {}
    for vec, cut in ((gamma_backbone, cut_b), (gamma_decoder, cut_d)):
        removed = set(int(i) for i in cut)
        for i, (layer, ch, _) in enumerate(vec.entries):
            masks.setdefault(layer, []).append(i not in removed)
    mags = {}
    for vec in (gamma_backbone, gamma_decoder):
        for layer, ch, v in vec.entries:
            mags.setdefault(layer, []).append(abs(v))
    for layer, mask in masks.items():
        if not any(mask):
            mask[int(np.argmax(mags[layer]))] = True
    return {l.id: tuple(masks[l.id]) for l in graph.prunable_layers()}


def finish_plan(graph, masks, tau1, tau2, p, policy, cut_b=0, cut_d=0) -> PruningPlan:
    plan = PruningPlan(masks, tau1, tau2, float(p), policy, cut_backbone=int(cut_b),
                       cut_decoder=int(cut_d))
    pruned = prune_graph(graph, plan)[0]
    plan.base_params = profiler.count_params(graph)
    plan.base_flops = profiler.count_flops(graph, graph.input_shape)
    plan.predicted_params = profiler.count_params(pruned)
    plan.predicted_flops = profiler.count_flops(pruned, graph.input_shape)
    return plan


def build_plan(graph: NetworkGraph, gamma_backbone: ScalingVector,
               gamma_decoder: ScalingVector, p: float, policy: str = "independent") -> PruningPlan:
    _check_vector(graph, gamma_backbone, "backbone")
    _check_vector(graph, gamma_decoder, "decoder")
    cut_b, cut_d = pruned_indices(gamma_backbone, gamma_decoder, p, policy)
    tau1, tau2 = compute_thresholds(gamma_backbone, gamma_decoder, p, policy)
    masks = masks_from_cut(graph, gamma_backbone, gamma_decoder, cut_b, cut_d)
    return finish_plan(graph, masks, tau1, tau2, p, policy, len(cut_b), len(cut_d))


def uniform_plan(graph: NetworkGraph, gamma_backbone: ScalingVector,
                 gamma_decoder: ScalingVector, keep_fraction: float) -> PruningPlan:
    """Keep ceil(keep_fraction * C) largest-|gamma| channels in every prunable layer."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    _check_vector(graph, gamma_backbone, "backbone")
    _check_vector(graph, gamma_decoder, "decoder")
    per_layer = {}
    for vec in (gamma_backbone, gamma_decoder):
        for layer, _, v in vec.entries:
            per_layer.setdefault(layer, []).append(v)
    masks = {}
    for spec in graph.prunable_layers():
        vals = np.asarray(per_layer[spec.id])
        keep = math.ceil(Fraction(keep_fraction) * spec.out_channels)
        drop = prune_order(vals)[:spec.out_channels - keep]
        mask = np.ones(spec.out_channels, dtype=bool)
        mask[drop] = False
        masks[spec.id] = tuple(bool(b) for b in mask)
    p = (1 - keep_fraction) * 100
    return finish_plan(graph, masks, float("nan"), float("nan"), p, "uniform")


def check_plan(graph: NetworkGraph, plan: PruningPlan):
    for layer_id, mask in plan.keep_masks.items():
        if layer_id not in graph:
            raise StructuralError(f"plan references unknown layer {layer_id}")
        spec = graph.layer(layer_id)
        if not spec.prunable:
            raise StructuralError(f"plan masks non-prunable layer {layer_id}")
        if len(mask) != spec.out_channels:
            raise StructuralError(f"{layer_id}: mask length {len(mask)} != "
                                  f"{spec.out_channels} channels")
        if not any(mask):
            raise StructuralError(f"{layer_id}: mask removes every channel")


def prune_graph(graph: NetworkGraph, plan: PruningPlan):
    """Shrink layer shapes per the plan.

    Returns ``(pruned_graph, kept)`` where ``kept[layer_id]`` lists the
    surviving output-channel indices of every layer (original numbering).
    """
    check_plan(graph, plan)
    kept, layers = {}, []
    in_channels = graph.input_shape[0]
    for spec in graph.layers:
        srcs = graph.inputs(spec.id)
        src_kept = [kept[s] if s in kept else list(range(in_channels)) for s in srcs]
        if spec.kind == "concat":
            idx, offset = [], 0
            for s, k in zip(srcs, src_kept):
                idx += [offset + i for i in k]
                offset += graph.layer(s).out_channels
            cin = len(idx)
            kept[spec.id] = idx
        else:
            cin = len(src_kept[0])
            if spec.kind == "elementwise-add":
                for s, k in zip(srcs, src_kept):
                    if len(k) != graph.layer(s).out_channels:
                        raise StructuralError(f"plan prunes a channel of {s}, which feeds "
                                              f"add junction {spec.id}")
        if spec.is_conv:
            if spec.id in plan.keep_masks:
                kept[spec.id] = plan.kept(spec.id)
            else:
                kept[spec.id] = list(range(spec.out_channels))
            cout = len(kept[spec.id])
        elif spec.kind in CHANNELWISE_KINDS or spec.kind == "elementwise-add":
            kept[spec.id] = src_kept[0]
            cout = cin
        else:
            cout = cin
        layers.append(_resized(spec, cin, cout))
    return graph.with_layers(layers), kept


def _resized(spec, cin, cout):
    if spec.in_channels == cin and spec.out_channels == cout:
        return spec
    return replace(spec, in_channels=cin, out_channels=cout)


def apply_plan(graph: NetworkGraph, weights, plan: PruningPlan):
    """Return ``(pruned_graph, pruned_weights)`` with consistently sliced tensors."""
    tensors = weights.state_dict() if hasattr(weights, "state_dict") else weights
    pruned, kept = prune_graph(graph, plan)
    out = {}
    in_channels = graph.input_shape[0]
    for spec in graph.layers:
        srcs = graph.inputs(spec.id)
        if spec.is_conv:
            src_idx = torch.as_tensor(kept[srcs[0]] if srcs[0] in kept
                                      else list(range(in_channels)))
            out_idx = torch.as_tensor(kept[spec.id])
            w = tensors[f"{spec.id}.weight"]
            out[f"{spec.id}.weight"] = w.index_select(0, out_idx).index_select(1, src_idx).clone()
            if spec.bias:
                out[f"{spec.id}.bias"] = tensors[f"{spec.id}.bias"].index_select(0, out_idx).clone()
        elif spec.kind == "batchnorm":
            idx = torch.as_tensor(kept[spec.id])
            for name in ("weight", "bias", "running_mean", "running_var"):
                out[f"{spec.id}.{name}"] = tensors[f"{spec.id}.{name}"].index_select(0, idx).clone()
            nbt = f"{spec.id}.num_batches_tracked"
            if nbt in tensors:
                out[nbt] = tensors[nbt].clone()
    problems = validate(pruned)
    if problems:
        raise StructuralError("surgery produced an invalid graph: " + "; ".join(problems))
    return pruned, out
