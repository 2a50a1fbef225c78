"""Parameter, FLOP and latency accounting for network graphs.

Conventions (fixed so ratios are comparable across runs):

* params: conv and heads ``k*k*Cin*Cout`` (+ ``Cout`` with bias); batchnorm
  ``2*C`` (scale and shift; running statistics are buffers, not counted).
* FLOPs are multiply-accumulates.  Conv/heads ``k*k*Cin*Cout*Hout*Wout``;
  batchnorm, activation and elementwise add ``C*H*W`` of their output;
  global pooling ``C*Hin*Win``; upsampling ``C*Hout*Wout``; concat is free.
  Bias additions are not counted.
"""

import platform
import statistics
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import torch

from mtprune.netgraph import INPUT, KINDS, NetworkGraph


@dataclass
class ProfileResult:
    params: int
    flops: int
    latency_ms: Optional[float]
    input_shape: Tuple[int, int, int]
    runs: int = 0
    hardware: str = ""

    def row(self) -> dict:
        return {"params": self.params, "flops": self.flops, "latency_ms": self.latency_ms,
                "latency_runs": self.runs, "input_shape": "x".join(map(str, self.input_shape)),
                "hardware": self.hardware}


def count_params(graph: NetworkGraph) -> int:
    total = 0
    for spec in graph.layers:
        if spec.kind not in KINDS:
            raise ValueError(f"unknown layer kind {spec.kind}")
        if spec.is_conv:
            total += spec.kernel_size ** 2 * spec.in_channels * spec.out_channels
            if spec.bias:
                total += spec.out_channels
        elif spec.kind == "batchnorm":
            total += 2 * spec.out_channels
    return total


def _conv_out(size, spec):
    return (size + 2 * spec.padding - spec.dilation * (spec.kernel_size - 1) - 1) // spec.stride + 1


def spatial_sizes(graph: NetworkGraph, input_shape):
    """Output (H, W) of every layer for an input of ``input_shape`` (C, H, W)."""
    sizes = {INPUT: tuple(input_shape[1:])}
    for spec in graph.layers:
        srcs = graph.inputs(spec.id)
        h, w = sizes[srcs[0]] if srcs else sizes[INPUT]
        if spec.is_conv:
            h, w = _conv_out(h, spec), _conv_out(w, spec)
            if h <= 0 or w <= 0:
                raise ValueError(f"{spec.id}: spatial size underflow for input {input_shape}")
        elif spec.kind == "pool":
            h, w = 1, 1
        elif spec.kind == "upsample":
            h, w = sizes[spec.target]
        elif spec.kind in ("elementwise-add", "concat"):
            shapes = {sizes[s] for s in srcs}
            if len(shapes) != 1:
                raise ValueError(f"{spec.id}: inputs disagree on spatial size {shapes}")
        sizes[spec.id] = (h, w)
    return sizes


def count_flops(graph: NetworkGraph, input_shape=None) -> int:
    input_shape = tuple(input_shape or graph.input_shape)
    if input_shape[0] != graph.input_shape[0]:
        raise ValueError(f"input has {input_shape[0]} channels, graph expects "
                         f"{graph.input_shape[0]}")
    sizes = spatial_sizes(graph, input_shape)
    total = 0
    for spec in graph.layers:
        h, w = sizes[spec.id]
        if spec.is_conv:
            total += spec.kernel_size ** 2 * spec.in_channels * spec.out_channels * h * w
        elif spec.kind in ("batchnorm", "activation", "elementwise-add", "upsample"):
            total += spec.out_channels * h * w
        elif spec.kind == "pool":
            hi, wi = sizes[graph.inputs(spec.id)[0]]
            total += spec.in_channels * hi * wi
    return total


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{cpu} torch-{torch.__version__} threads={torch.get_num_threads()}"


def measure_latency(graph: NetworkGraph, weights, input_shape=None, runs: int = 20,
                    warmup: int = 3, head: str = "seg") -> ProfileResult:
    """Median wall-clock of single-image forward passes after warm-up."""
    from mtprune.model import GraphNet

    if runs < 5:
        raise ValueError("need at least 5 timed runs")
    input_shape = tuple(input_shape or graph.input_shape)
    net = GraphNet(graph)
    if weights is not None:
        net.load_state_dict(weights.state_dict() if hasattr(weights, "state_dict") else weights)
    net.eval()
    x = torch.randn(1, *input_shape, generator=torch.Generator().manual_seed(0))
    times = []
    with torch.no_grad():
        for _ in range(max(warmup, 3)):
            net(x, head)
        for _ in range(runs):
            t0 = time.perf_counter()
            net(x, head)
            times.append((time.perf_counter() - t0) * 1e3)
    return ProfileResult(count_params(graph), count_flops(graph, input_shape),
                         statistics.median(times), input_shape, runs, hardware_descriptor())


def profile(graph: NetworkGraph, input_shape=None) -> ProfileResult:
    input_shape = tuple(input_shape or graph.input_shape)
    return ProfileResult(count_params(graph), count_flops(graph, input_shape), None, input_shape)
