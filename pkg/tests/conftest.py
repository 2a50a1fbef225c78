import pytest
import torch

from mtprune.config import MtpConfig
from mtprune.netgraph import LayerSpec, NetworkGraph, build_desk_network

torch.set_num_threads(1)


@pytest.fixture
def config():
    return MtpConfig()


@pytest.fixture
def desk(config):
    return build_desk_network(config)


def conv_bn_graph(cin=2, cout=4, size=5, kernel=3):
    """input -> conv -> bn, used for hand counts."""
    layers = (
        LayerSpec("c", "conv", cin, cout, kernel_size=kernel),
        LayerSpec("bn", "batchnorm", cout, cout),
    )
    return NetworkGraph(layers, (("input", "c"), ("c", "bn")), (cin, size, size), {"seg": "bn"})


def chain_graph(widths=(8, 4), cin=3, size=6):
    """input -> conv/bn/act (prunable) -> conv/bn (not prunable)."""
    layers = (
        LayerSpec("c1", "conv", cin, widths[0], kernel_size=3, prunable=True),
        LayerSpec("bn1", "batchnorm", widths[0], widths[0]),
        LayerSpec("a1", "activation", widths[0], widths[0]),
        LayerSpec("c2", "conv", widths[0], widths[1], kernel_size=1, partition="decoder"),
        LayerSpec("bn2", "batchnorm", widths[1], widths[1], partition="decoder"),
    )
    edges = (("input", "c1"), ("c1", "bn1"), ("bn1", "a1"), ("a1", "c2"), ("c2", "bn2"))
    return NetworkGraph(layers, edges, (cin, size, size), {"seg": "bn2"})


def randomize_bn(net, seed=0, low=-1.0, high=1.0):
    g = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.weight.data = torch.empty_like(m.weight).uniform_(low, high, generator=g)
            m.bias.data = torch.empty_like(m.bias).uniform_(-0.5, 0.5, generator=g)
            m.running_mean = torch.randn(m.running_mean.shape, generator=g) * 0.1
            m.running_var = torch.rand(m.running_var.shape, generator=g) + 0.5
    return net


def tiny_graph(size=4):
    """Two-head network with 42 parameters for finite-difference checks."""
    layers = (
        LayerSpec("c1", "conv", 1, 2, kernel_size=3, prunable=True),
        LayerSpec("bn1", "batchnorm", 2, 2),
        LayerSpec("a1", "activation", 2, 2),
        LayerSpec("pool", "pool", 2, 2),
        LayerSpec("head", "classifier-head", 2, 2, bias=True),
        LayerSpec("d1", "conv", 2, 2, partition="decoder", prunable=True),
        LayerSpec("dbn", "batchnorm", 2, 2, partition="decoder"),
        LayerSpec("da", "activation", 2, 2, partition="decoder"),
        LayerSpec("seg", "segmentation-head", 2, 2, partition="decoder", bias=True),
        LayerSpec("up", "upsample", 2, 2, partition="decoder", target="input"),
    )
    edges = (("input", "c1"), ("c1", "bn1"), ("bn1", "a1"), ("a1", "pool"), ("pool", "head"),
             ("a1", "d1"), ("d1", "dbn"), ("dbn", "da"), ("da", "seg"), ("seg", "up"))
    return NetworkGraph(layers, edges, (1, size, size), {"cls": "head", "seg": "up"})


class TinyData:
    """Stand-in for SynthDatasets with one batch per split."""

    def __init__(self, n=6, size=4, seed=0, dtype=torch.float64):
        g = torch.Generator().manual_seed(seed)
        self.cls_train = (torch.randn(n, 1, size, size, generator=g, dtype=dtype),
                          torch.randint(0, 2, (n,), generator=g))
        self.seg_train = (torch.randn(n, 1, size, size, generator=g, dtype=dtype),
                          torch.randint(0, 2, (n, size, size), generator=g))
        self.cls_val, self.seg_val = self.cls_train, self.seg_train


def central_diff(fn, tensors, h=1e-6):
    """Central finite-difference gradient of scalar ``fn()`` wrt each tensor."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(fn())
                flat[i] = old - h
                down = float(fn())
                flat[i] = old
                gflat[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def rel_err(a, b):
    a, b = torch.cat([x.reshape(-1) for x in a]), torch.cat([x.reshape(-1) for x in b])
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
