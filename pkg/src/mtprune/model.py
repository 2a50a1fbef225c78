"""Executable torch module for a :class:`NetworkGraph`."""

from typing import Dict, List

import torch
import torch.nn as nn
import torch.nn.functional as F

from mtprune.netgraph import INPUT, NetworkGraph


class GraphNet(nn.Module):
    """Runs the layers of a graph in list order.

    ``forward(x, head="seg")`` returns per-pixel logits at input resolution;
    ``head="cls"`` returns ``(N, num_classes)`` logits.  Only the ancestors of
    the requested output are evaluated.
    """

    def __init__(self, graph: NetworkGraph):
        super().__init__()
        self.graph = graph
        for spec in graph.layers:
            if spec.is_conv:
                mod = nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel_size,
                                stride=spec.stride, padding=spec.padding,
                                dilation=spec.dilation, bias=spec.bias)
            elif spec.kind == "batchnorm":
                mod = nn.BatchNorm2d(spec.out_channels)
                # U(0, 1) scales: some channels start small enough for a mild L1
                # pull to reach zero within a short schedule
                nn.init.uniform_(mod.weight, 0.0, 1.0)
            else:
                continue
            self.add_module(spec.id, mod)
        self._plans = {}
        for head, out in graph.outputs.items():
            needed = graph.ancestors(out)
            self._plans[head] = [(l, graph.inputs(l.id)) for l in graph.layers
                                 if l.id in needed]

    def forward(self, x, head: str = "seg", cache=None):
        if cache is None:
            cache = {}
        cache[INPUT] = x
        for spec, srcs in self._plans[head]:
            args = [cache[s] for s in srcs]
            kind = spec.kind
            if spec.is_conv or kind == "batchnorm":
                y = getattr(self, spec.id)(args[0])
            elif kind == "activation":
                y = F.relu(args[0])
            elif kind == "pool":
                y = F.adaptive_avg_pool2d(args[0], 1)
            elif kind == "upsample":
                size = cache[spec.target].shape[-2:]
                y = F.interpolate(args[0], size=size, mode="bilinear", align_corners=False)
            elif kind == "elementwise-add":
                y = args[0]
                for a in args[1:]:
                    y = y + a
            elif kind == "concat":
                y = torch.cat(args, dim=1)
            else:
                raise ValueError(f"cannot execute layer kind {kind}")
            cache[spec.id] = y
        out = cache[self.graph.outputs[head]]
        if head == "cls":
            out = out.flatten(1)
        return out

    @torch.no_grad()
    def trace(self, x):
        """Outputs of every layer on both heads, keyed by layer id."""
        cache = {}
        for head in self._plans:
            self.forward(x, head, cache)
        return cache


def partition_keys(graph: NetworkGraph, partition: str, heads: bool = False) -> List[str]:
    """Names of trainable parameters in a partition.

    With ``heads=False`` the classification head is left out of the backbone
    set: it belongs to the classification network only and has no copy on the
    segmentation side.
    """
    keys = []
    for spec in graph.layers:
        if spec.partition != partition:
            continue
        if spec.kind == "classifier-head" and not heads:
            continue
        if spec.is_conv:
            keys.append(f"{spec.id}.weight")
            if spec.bias:
                keys.append(f"{spec.id}.bias")
        elif spec.kind == "batchnorm":
            keys += [f"{spec.id}.weight", f"{spec.id}.bias"]
    return keys


def head_keys(graph: NetworkGraph) -> List[str]:
    keys = []
    for spec in graph.layers:
        if spec.kind == "classifier-head":
            keys.append(f"{spec.id}.weight")
            if spec.bias:
                keys.append(f"{spec.id}.bias")
    return keys


def module_ids(graph: NetworkGraph, partition: str, heads: bool = False) -> List[str]:
    return [s.id for s in graph.layers
            if s.partition == partition and (s.is_conv or s.kind == "batchnorm")
            and (heads or s.kind != "classifier-head")]


def params_by_name(net: nn.Module, keys) -> Dict[str, torch.Tensor]:
    named = dict(net.named_parameters())
    return {k: named[k] for k in keys}


def clone_state(state) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in state.items()}


def build_model(graph: NetworkGraph, weights=None, seed=None) -> GraphNet:
    if seed is not None:
        torch.manual_seed(seed)
    net = GraphNet(graph)
    if weights is not None:
        net.load_state_dict(weights)
    return net
