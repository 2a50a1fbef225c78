"""Layer graphs for encoder-decoder segmentation networks.

A :class:`NetworkGraph` is an ordered list of :class:`LayerSpec` records plus
producer -> consumer edges.  The pseudo-node ``"input"`` stands for the image
tensor.  Layers are split into a ``backbone`` partition (shared with the
classification task) and a ``decoder`` partition (segmentation only).

Weights are plain ``{name: tensor}`` mappings keyed ``"<layer_id>.<param>"``,
the same keys :class:`mtprune.model.GraphNet` uses in its ``state_dict``.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

GRAPH_FORMAT = "mtprune-graph"
GRAPH_VERSION = 1
INPUT = "input"

KINDS = (
    "conv",
    "batchnorm",
    "activation",
    "pool",
    "upsample",
    "elementwise-add",
    "concat",
    "classifier-head",
    "segmentation-head",
)
CONV_KINDS = ("conv", "classifier-head", "segmentation-head")
# layers whose output channel i is a function of input channel i only
CHANNELWISE_KINDS = ("batchnorm", "activation", "pool", "upsample")
PARTITIONS = ("backbone", "decoder")


class StructuralError(ValueError):
    """Weights, plans or graphs that do not fit together."""


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    in_channels: int
    out_channels: int
    partition: str = "backbone"
    kernel_size: int = 1
    stride: int = 1
    dilation: int = 1
    bias: bool = False
    prunable: bool = False
    residual_group: Optional[str] = None
    # upsample only: id of the layer whose spatial size is matched, or "input"
    target: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.partition not in PARTITIONS:
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError(f"{self.id}: channel counts must be positive")
        if self.kernel_size <= 0 or self.stride <= 0 or self.dilation <= 0:
            raise ValueError(f"{self.id}: kernel, stride and dilation must be positive")

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS

    @property
    def padding(self) -> int:
        return self.dilation * (self.kernel_size // 2)


@dataclass(frozen=True)
class NetworkGraph:
    layers: Tuple[LayerSpec, ...]
    edges: Tuple[Tuple[str, str], ...]
    input_shape: Tuple[int, int, int]
    outputs: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "_index", {l.id: i for i, l in enumerate(self.layers)})

    def __len__(self):
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def layer(self, layer_id: str) -> LayerSpec:
        return self.layers[self._index[layer_id]]

    def index(self, layer_id: str) -> int:
        return -1 if layer_id == INPUT else self._index[layer_id]

    def __contains__(self, layer_id) -> bool:
        return layer_id in self._index

    def inputs(self, layer_id: str) -> List[str]:
        """Producers of ``layer_id`` in edge order (concat order)."""
        return [u for u, v in self.edges if v == layer_id]

    def consumers(self, layer_id: str) -> List[str]:
        return [v for u, v in self.edges if u == layer_id]

    def prunable_layers(self, partition: Optional[str] = None) -> List[LayerSpec]:
        return [l for l in self.layers
                if l.prunable and (partition is None or l.partition == partition)]

    def prunable_count(self, partition: Optional[str] = None) -> int:
        return sum(l.out_channels for l in self.prunable_layers(partition))

    def scale_layer(self, conv_id: str) -> LayerSpec:
        """The batchnorm whose scale acts as the channel factor of ``conv_id``."""
        bns = [self.layer(c) for c in self.consumers(conv_id)
               if self.layer(c).kind == "batchnorm"]
        if len(bns) != 1:
            raise StructuralError(f"{conv_id}: expected exactly one batchnorm consumer")
        return bns[0]

    def ancestors(self, layer_id: str) -> set:
        seen, stack = set(), [layer_id]
        while stack:
            node = stack.pop()
            if node in seen or node == INPUT:
                continue
            seen.add(node)
            stack.extend(self.inputs(node))
        return seen

    def with_layers(self, layers: Sequence[LayerSpec]) -> "NetworkGraph":
        return NetworkGraph(tuple(layers), self.edges, self.input_shape, dict(self.outputs))

    # serialization

    def to_dict(self) -> dict:
        return {
            "format": GRAPH_FORMAT,
            "version": GRAPH_VERSION,
            "input_shape": list(self.input_shape),
            "outputs": dict(self.outputs),
            "layers": [asdict(l) for l in self.layers],
            "edges": [list(e) for e in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkGraph":
        if doc.get("format") != GRAPH_FORMAT:
            raise StructuralError("not a serialized network graph")
        if doc.get("version") != GRAPH_VERSION:
            raise StructuralError(f"unsupported graph version {doc.get('version')}")
        layers = [LayerSpec(**rec) for rec in doc["layers"]]
        return cls(tuple(layers), tuple(map(tuple, doc["edges"])),
                   tuple(doc["input_shape"]), dict(doc.get("outputs", {})))

    @classmethod
    def from_json(cls, text: str) -> "NetworkGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "NetworkGraph":
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass(frozen=True)
class ScalingVector:
    entries: Tuple[Tuple[str, int, float], ...]
    partition: str

    def __len__(self):
        return len(self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([v for _, _, v in self.entries], dtype=np.float64)

    def scaled(self, factor: float) -> "ScalingVector":
        return ScalingVector(tuple((l, c, v * factor) for l, c, v in self.entries),
                             self.partition)


class _Builder:
    def __init__(self):
        self.layers, self.edges = [], []

    def add(self, spec: LayerSpec, *inputs: str) -> str:
        self.layers.append(spec)
        self.edges.extend((src, spec.id) for src in inputs)
        return spec.id

    def conv_bn_act(self, name, src, cin, cout, partition, kernel=3, stride=1,
                    dilation=1, prunable=True, group=None, act=True):
        self.add(LayerSpec(f"{name}_conv", "conv", cin, cout, partition, kernel, stride,
                           dilation, prunable=prunable, residual_group=group), src)
        out = self.add(LayerSpec(f"{name}_bn", "batchnorm", cout, cout, partition,
                                 residual_group=group), f"{name}_conv")
        if act:
            out = self.add(LayerSpec(f"{name}_act", "activation", cout, cout, partition,
                                     residual_group=group), out)
        return out


def build_desk_network(config) -> NetworkGraph:
    """Residual backbone + classification head + miniature ASPP decoder.

    Each residual block is post-activation with three conv-BN stages.  Only
    the first two convs of a block are prunable; the block-output conv and the
    projection shortcut feed the elementwise add and keep their width.
    """
    width, depth = config.width, config.depth
    if width <= 0 or depth <= 0 or config.decoder_width <= 0:
        raise ValueError("width, depth and decoder_width must be positive")
    b = _Builder()
    group = "res0"
    src = b.conv_bn_act("stem", INPUT, config.in_channels, width, "backbone",
                        prunable=False, group=group)
    cin = width
    for i in range(1, depth + 1):
        cout = width * 2 ** (i - 1)
        stride = 1 if i == 1 else 2
        name = f"b{i}"
        identity = stride == 1 and cin == cout
        if not identity:
            group = f"res{i}"
        h = b.conv_bn_act(f"{name}_c1", src, cin, cout, "backbone")
        h = b.conv_bn_act(f"{name}_c2", h, cout, cout, "backbone", stride=stride)
        h = b.conv_bn_act(f"{name}_c3", h, cout, cout, "backbone", kernel=1,
                          prunable=False, group=group, act=False)
        if identity:
            skip = src
        else:
            skip = b.conv_bn_act(f"{name}_proj", src, cin, cout, "backbone", kernel=1,
                                 stride=stride, prunable=False, group=group, act=False)
        b.add(LayerSpec(f"{name}_add", "elementwise-add", cout, cout, "backbone",
                        residual_group=group), h, skip)
        src = b.add(LayerSpec(f"{name}_out", "activation", cout, cout, "backbone",
                              residual_group=group), f"{name}_add")
        cin = cout
    feat = src

    b.add(LayerSpec("cls_pool", "pool", cin, cin, "backbone"), feat)
    b.add(LayerSpec("cls_head", "classifier-head", cin, config.num_classes, "backbone",
                    bias=True), "cls_pool")

    d = config.decoder_width
    branches = [
        b.conv_bn_act("aspp_b0", feat, cin, d, "decoder", kernel=1),
        b.conv_bn_act("aspp_b1", feat, cin, d, "decoder", dilation=2),
        b.conv_bn_act("aspp_b2", feat, cin, d, "decoder", dilation=3),
    ]
    b.add(LayerSpec("aspp_gpool", "pool", cin, cin, "decoder"), feat)
    g = b.conv_bn_act("aspp_gp", "aspp_gpool", cin, d, "decoder", kernel=1)
    branches.append(b.add(LayerSpec("aspp_gp_up", "upsample", d, d, "decoder",
                                    target=branches[0]), g))
    b.add(LayerSpec("aspp_cat", "concat", 4 * d, 4 * d, "decoder"), *branches)
    h = b.conv_bn_act("aspp_proj", "aspp_cat", 4 * d, d, "decoder", kernel=1)
    b.add(LayerSpec("seg_head", "segmentation-head", d, config.seg_classes, "decoder",
                    bias=True), h)
    b.add(LayerSpec("seg_up", "upsample", config.seg_classes, config.seg_classes,
                    "decoder", target=INPUT), "seg_head")

    size = config.image_size
    return NetworkGraph(tuple(b.layers), tuple(b.edges), (config.in_channels, size, size),
                        {"cls": "cls_head", "seg": "seg_up"})


def _trace_origin(graph: NetworkGraph, layer_id: str) -> Optional[LayerSpec]:
    """Walk back through channel-wise layers to the conv that made the channels."""
    node = layer_id
    while node != INPUT:
        spec = graph.layer(node)
        if spec.is_conv:
            return spec
        if spec.kind not in CHANNELWISE_KINDS:
            return None
        prods = graph.inputs(node)
        if len(prods) != 1:
            return None
        node = prods[0]
    return None


def validate(graph: NetworkGraph) -> List[str]:
    """Return a list of human-readable invariant violations (empty if valid)."""
    problems = []
    seen = set()
    for spec in graph.layers:
        if spec.id in seen:
            problems.append(f"duplicate layer id {spec.id}")
        seen.add(spec.id)
    for u, v in graph.edges:
        if (u != INPUT and u not in graph) or v not in graph:
            problems.append(f"edge {u}->{v}: unknown endpoint")
            continue
        if graph.index(u) >= graph.index(v):
            problems.append(f"edge {u}->{v}: violates topological layer order")
    if problems:
        return problems

    def channels_of(node):
        return graph.input_shape[0] if node == INPUT else graph.layer(node).out_channels

    for spec in graph.layers:
        prods = graph.inputs(spec.id)
        ids = f"{spec.id} <- {','.join(prods) or '(none)'}"
        if not prods:
            problems.append(f"{spec.id}: layer has no producer")
            continue
        widths = [channels_of(p) for p in prods]
        if spec.kind == "concat":
            if spec.in_channels != sum(widths):
                problems.append(f"channel mismatch {ids}: concat in_channels "
                                f"{spec.in_channels} != sum {sum(widths)}")
        elif spec.kind == "elementwise-add":
            if len(prods) < 2 or any(w != spec.in_channels for w in widths):
                problems.append(f"channel mismatch {ids}: add inputs {widths} "
                                f"vs in_channels {spec.in_channels}")
        else:
            if len(prods) != 1:
                problems.append(f"{ids}: {spec.kind} takes exactly one input")
            elif widths[0] != spec.in_channels:
                problems.append(f"channel mismatch {ids}: {widths[0]} -> {spec.in_channels}")
        if spec.kind not in CONV_KINDS and spec.in_channels != spec.out_channels:
            problems.append(f"{spec.id}: {spec.kind} must preserve channel count")
        if spec.kind == "batchnorm":
            origin = graph.layer(prods[0]) if prods[0] != INPUT else None
            if origin is None or origin.kind != "conv":
                problems.append(f"{spec.id}: batchnorm must follow a conv")
            elif origin.out_channels != spec.in_channels:
                problems.append(f"{spec.id}: batchnorm width differs from conv {origin.id}")
        if spec.kind == "upsample" and spec.target is None:
            problems.append(f"{spec.id}: upsample needs a target")
        if spec.prunable:
            if spec.kind != "conv":
                problems.append(f"{spec.id}: only conv layers may be prunable")
            elif sum(graph.layer(c).kind == "batchnorm"
                     for c in graph.consumers(spec.id)) != 1:
                problems.append(f"{spec.id}: prunable conv has no batchnorm scale")
        if spec.kind == "elementwise-add":
            for p in prods:
                origin = _trace_origin(graph, p)
                if origin is not None and origin.prunable:
                    problems.append(f"prunability: {origin.id} feeds add junction "
                                    f"{spec.id} but is marked prunable")

    groups = {}
    for spec in graph.layers:
        if spec.residual_group is not None:
            groups.setdefault(spec.residual_group, set()).add(spec.partition)
    for name, parts in sorted(groups.items()):
        if len(parts) > 1:
            problems.append(f"residual group {name} spans partitions {sorted(parts)}")
    return problems


def _as_tensors(weights) -> dict:
    if hasattr(weights, "state_dict"):
        return weights.state_dict()
    return weights


def extract_scaling_factors(graph: NetworkGraph, weights, partition: str) -> ScalingVector:
    """Batchnorm scales of every prunable channel of ``partition``.

    Entries are keyed by the conv layer whose output channel they gate, in
    layer order then channel index.
    """
    if partition not in PARTITIONS:
        raise ValueError(f"unknown partition {partition!r}")
    tensors = _as_tensors(weights)
    entries = []
    for conv in graph.prunable_layers(partition):
        bn = graph.scale_layer(conv.id)
        key = f"{bn.id}.weight"
        if key not in tensors:
            raise StructuralError(f"missing batchnorm scale {key} for prunable {conv.id}")
        gamma = np.asarray(tensors[key].detach().cpu().double()
                           if hasattr(tensors[key], "detach") else tensors[key],
                           dtype=np.float64).reshape(-1)
        if gamma.shape[0] != conv.out_channels:
            raise StructuralError(f"{key}: {gamma.shape[0]} scales for "
                                  f"{conv.out_channels} channels")
        entries.extend((conv.id, c, float(g)) for c, g in enumerate(gamma))
    return ScalingVector(tuple(entries), partition)


def replace_layer(graph: NetworkGraph, layer_id: str, **changes) -> NetworkGraph:
    layers = [replace(l, **changes) if l.id == layer_id else l for l in graph.layers]
    return graph.with_layers(layers)
