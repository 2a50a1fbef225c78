"""Alternating augmented-Lagrangian sparse training over two tasks.

The backbone exists twice: ``w1`` is trained on classification data and
``w3`` (its auxiliary copy) on segmentation data together with the decoder
``w2``.  The two copies are tied by the penalty

    mu/2 * ||w1 - w3||^2 + <E, w1 - w3>

whose multiplier ``E`` and weight ``mu`` are updated after every round.
Batchnorm scales of prunable channels carry an L1 penalty, applied as a
subgradient ``alpha * sign(gamma)`` added to the loss gradient.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from mtprune.model import GraphNet, clone_state, partition_keys, head_keys
from mtprune.netgraph import NetworkGraph, ScalingVector, extract_scaling_factors
from mtprune.pipeline.data import batches

log = logging.getLogger(__name__)

CKPT_FORMAT = "mtprune-lagrangian"
CKPT_VERSION = 1
SPARSITY_EPS = 1e-3


class TrainingDiverged(FloatingPointError):
    pass


def l1_penalty(scales, alpha: float):
    """Return ``(alpha * sum|g|, alpha * sign(g))`` with ``sign(0) = 0``."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    values = scales.values if isinstance(scales, ScalingVector) else np.asarray(scales, dtype=np.float64)
    return alpha * float(np.abs(values).sum()), alpha * np.sign(values)


def _pairs(w1, w3, E):
    if isinstance(w1, dict):
        if not (w1.keys() == w3.keys() == E.keys()):
            raise ValueError("parameter stores have different keys")
        keys = list(w1)
        return [(w1[k], w3[k], E[k], k) for k in keys]
    return [(torch.as_tensor(w1), torch.as_tensor(w3), torch.as_tensor(E), "")]


def coupling_loss(w1, w3, E, mu):
    """``mu/2 ||w1 - w3||^2 + <E, w1 - w3>`` over all tensors of the stores.

    Accepts dicts of tensors (keyed identically) or single array-likes.
    Returns a torch scalar that carries gradients to whichever inputs
    require them.
    """
    total = 0.0
    for a, b, e, key in _pairs(w1, w3, E):
        if a.shape != b.shape or a.shape != e.shape:
            raise ValueError(f"shape mismatch {key}: {tuple(a.shape)}, "
                             f"{tuple(b.shape)}, {tuple(e.shape)}")
        diff = a - b
        total = total + 0.5 * mu * (diff * diff).sum() + (e * diff).sum()
    return torch.as_tensor(total)


def multiplier_update(E, w1, w3, mu, rho, mu_max):
    """One multiplier step: ``E + mu (w1 - w3)`` and ``min(rho mu, mu_max)``."""
    new_E = {k: E[k] + mu * (w1[k] - w3[k]) for k in E}
    return new_E, min(rho * mu, mu_max)


@dataclass
class LagrangianState:
    """Parameters of the alternating scheme.

    ``cls_net`` holds w1 and the classification head; ``seg_net`` holds the
    auxiliary backbone w3 and the decoder w2.  The unused parts of each
    network (decoder of ``cls_net``, head of ``seg_net``) are never trained.
    """
    graph: NetworkGraph
    cls_net: GraphNet
    seg_net: GraphNet
    E: Dict[str, torch.Tensor]
    mu: float
    round: int = 0

    @property
    def backbone_keys(self) -> List[str]:
        return partition_keys(self.graph, "backbone")

    @property
    def w1(self) -> Dict[str, torch.Tensor]:
        named = dict(self.cls_net.named_parameters())
        return {k: named[k] for k in self.backbone_keys}

    @property
    def w3(self) -> Dict[str, torch.Tensor]:
        named = dict(self.seg_net.named_parameters())
        return {k: named[k] for k in self.backbone_keys}

    @property
    def w2(self) -> Dict[str, torch.Tensor]:
        named = dict(self.seg_net.named_parameters())
        return {k: named[k] for k in partition_keys(self.graph, "decoder")}

    @property
    def head(self) -> Dict[str, torch.Tensor]:
        named = dict(self.cls_net.named_parameters())
        return {k: named[k] for k in head_keys(self.graph)}

    def residual_norm(self) -> float:
        with torch.no_grad():
            return math.sqrt(sum(float(((a - b) ** 2).sum())
                                 for a, b in zip(self.w1.values(), self.w3.values())))

    def w1_norm(self) -> float:
        with torch.no_grad():
            return math.sqrt(sum(float((a ** 2).sum()) for a in self.w1.values()))

    def sparse_weights(self) -> Dict[str, torch.Tensor]:
        """Segmentation-network weights from w1 and w2 plus the classification head.

        Backbone batchnorm running statistics come from the w1 network.
        """
        out = clone_state(self.seg_net.state_dict())
        cls_state = self.cls_net.state_dict()
        for spec in self.graph.layers:
            if spec.partition == "backbone":
                for k in cls_state:
                    if k.startswith(spec.id + "."):
                        out[k] = cls_state[k].detach().clone()
        return out

    def scaling_factors(self, which: str) -> ScalingVector:
        if which == "w1":
            return extract_scaling_factors(self.graph, self.cls_net, "backbone")
        if which == "w3":
            return extract_scaling_factors(self.graph, self.seg_net, "backbone")
        if which == "w2":
            return extract_scaling_factors(self.graph, self.seg_net, "decoder")
        raise ValueError(which)


def init_state(graph: NetworkGraph, weights, config) -> LagrangianState:
    """w1 and w3 both start from ``weights``'s backbone; E = 0; mu = mu0."""
    dtype = next(v.dtype for v in weights.values() if v.is_floating_point())
    cls_net, seg_net = GraphNet(graph).to(dtype), GraphNet(graph).to(dtype)
    cls_net.load_state_dict(weights)
    seg_net.load_state_dict(weights)
    E = {k: torch.zeros_like(v) for k, v in dict(cls_net.named_parameters()).items()
         if k in partition_keys(graph, "backbone")}
    return LagrangianState(graph, cls_net, seg_net, E, float(config.mu0), 0)


def gamma_params(graph: NetworkGraph, net, partition: str) -> List[torch.Tensor]:
    """Batchnorm scale tensors of the prunable convs in ``partition``."""
    named = dict(net.named_parameters())
    return [named[f"{graph.scale_layer(c.id).id}.weight"]
            for c in graph.prunable_layers(partition)]


def add_l1_subgradient(gammas, alpha: float):
    if alpha == 0:
        return
    for g in gammas:
        if g.grad is not None:
            g.grad.add_(alpha * torch.sign(g.detach()))


def batch_seed(config, rnd: int, tag: int, epoch: int) -> int:
    return ((int(config.seed) * 1_000_003 + rnd) * 101 + tag) * 1009 + epoch


def _set_mode(net: GraphNet, graph: NetworkGraph, train_partitions, head_train=False):
    net.eval()
    for spec in graph.layers:
        if not (spec.is_conv or spec.kind == "batchnorm"):
            continue
        on = spec.partition in train_partitions
        if spec.kind == "classifier-head":
            on = head_train
        getattr(net, spec.id).train(on)


def _check(loss, step_name, rnd):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"{step_name}: non-finite loss in round {rnd}; "
                               "learning rate or mu too large")


def step_w1(state: LagrangianState, data, config, tag=1):
    """Classification loss + coupling + alpha1 L1 on w1 (and the head)."""
    graph, net = state.graph, state.cls_net
    params = list(state.w1.values()) + list(state.head.values())
    gammas = gamma_params(graph, net, "backbone")
    w3 = {k: v.detach() for k, v in state.w3.items()}
    opt = torch.optim.SGD(params, lr=config.lr_w1)
    _set_mode(net, graph, ("backbone",), head_train=True)
    losses = []
    for epoch in range(config.epochs_w1):
        for x, y in batches(data, config.batch_size, batch_seed(config, state.round, tag, epoch)):
            opt.zero_grad()
            loss = F.cross_entropy(net(x, "cls"), y)
            loss = loss + coupling_loss(state.w1, w3, state.E, state.mu)
            _check(loss, "step_w1", state.round)
            loss.backward()
            add_l1_subgradient(gammas, config.alpha1)
            opt.step()
            losses.append(loss.item())
    return float(np.mean(losses)) if losses else float("nan")


def step_w2(state: LagrangianState, data, config, tag=2):
    """lambda * segmentation loss + alpha2 L1 on w2; backbone w3 frozen."""
    graph, net = state.graph, state.seg_net
    w3 = list(state.w3.values())
    params = list(state.w2.values())
    gammas = gamma_params(graph, net, "decoder")
    opt = torch.optim.SGD(params, lr=config.lr_w2)
    _set_mode(net, graph, ("decoder",))
    for p in w3:
        p.requires_grad_(False)
    losses = []
    try:
        for epoch in range(config.epochs_w2):
            for x, y in batches(data, config.batch_size, batch_seed(config, state.round, tag, epoch)):
                opt.zero_grad()
                loss = config.lambda_tradeoff * F.cross_entropy(net(x, "seg"), y)
                _check(loss, "step_w2", state.round)
                loss.backward()
                add_l1_subgradient(gammas, config.alpha2)
                opt.step()
                losses.append(loss.item())
    finally:
        for p in w3:
            p.requires_grad_(True)
    return float(np.mean(losses)) if losses else float("nan")


def step_w3(state: LagrangianState, data, config, tag=3):
    """lambda * segmentation loss + coupling + alpha2 L1 on w3; decoder frozen."""
    graph, net = state.graph, state.seg_net
    w2 = list(state.w2.values())
    params = list(state.w3.values())
    gammas = gamma_params(graph, net, "backbone")
    w1 = {k: v.detach() for k, v in state.w1.items()}
    opt = torch.optim.SGD(params, lr=config.lr_w3)
    _set_mode(net, graph, ("backbone",))
    for p in w2:
        p.requires_grad_(False)
    losses = []
    try:
        for epoch in range(config.epochs_w3):
            for x, y in batches(data, config.batch_size, batch_seed(config, state.round, tag, epoch)):
                opt.zero_grad()
                loss = config.lambda_tradeoff * F.cross_entropy(net(x, "seg"), y)
                loss = loss + coupling_loss(w1, state.w3, state.E, state.mu)
                _check(loss, "step_w3", state.round)
                loss.backward()
                add_l1_subgradient(gammas, config.alpha2)
                opt.step()
                losses.append(loss.item())
    finally:
        for p in w2:
            p.requires_grad_(True)
    return float(np.mean(losses)) if losses else float("nan")


def update_multipliers(state: LagrangianState, config):
    with torch.no_grad():
        w1 = {k: v.detach() for k, v in state.w1.items()}
        w3 = {k: v.detach() for k, v in state.w3.items()}
        state.E, state.mu = multiplier_update(state.E, w1, w3, state.mu,
                                              config.rho, config.mu_max)
    state.round += 1
    return state.E, state.mu


def sparsity_fraction(scales: ScalingVector, eps: float = SPARSITY_EPS) -> float:
    values = scales.values
    return float((np.abs(values) < eps).mean()) if len(values) else 0.0


@dataclass
class History:
    rows: List[dict] = field(default_factory=list)

    COLUMNS = ("round", "loss_w1", "loss_w2", "loss_w3", "mu", "residual",
               "rel_residual", "sparsity_backbone", "sparsity_decoder", "sparsity_w3")

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: r[k] for k in self.COLUMNS})

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = [{k: (int(v) if k == "round" else float(v)) for k, v in r.items()}
                    for r in csv.DictReader(fh)]
        return cls(rows)


def train_sparse(graph: NetworkGraph, weights, datasets, config, state=None):
    """Run ``config.rounds`` rounds of {w1, w2, w3, multipliers}.

    ``weights`` is a full state dict: backbone and head from pre-training,
    decoder from the dense segmentation model.  Returns ``(state, history)``.
    """
    if state is None:
        state = init_state(graph, weights, config)
    history = History()
    for _ in range(config.rounds):
        rnd = state.round
        try:
            l1 = step_w1(state, datasets.cls_train, config)
            l2 = step_w2(state, datasets.seg_train, config)
            l3 = step_w3(state, datasets.seg_train, config)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"round {rnd}: {exc}") from exc
        update_multipliers(state, config)
        res = state.residual_norm()
        rel = res / max(state.w1_norm(), 1e-12)
        history.append(
            round=rnd + 1, loss_w1=l1, loss_w2=l2, loss_w3=l3, mu=state.mu,
            residual=res, rel_residual=rel,
            sparsity_backbone=sparsity_fraction(state.scaling_factors("w1")),
            sparsity_decoder=sparsity_fraction(state.scaling_factors("w2")),
            sparsity_w3=sparsity_fraction(state.scaling_factors("w3")),
        )
        log.info("round %d: losses %.4f %.4f %.4f mu=%.4g rel=%.3g", rnd + 1, l1, l2, l3,
                 state.mu, rel)
        if config.early_stop_tol and rel < config.early_stop_tol:
            log.info("early stop: relative residual %.3g", rel)
            break
    return state, history


def save_checkpoint(path, state: LagrangianState, config):
    torch.save({
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "graph": state.graph.to_dict(),
        "cls_net": state.cls_net.state_dict(),
        "seg_net": state.seg_net.state_dict(),
        "E": state.E,
        "mu": state.mu,
        "round": state.round,
        "config_hash": config.config_hash(),
    }, path)


def load_checkpoint(path) -> LagrangianState:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != CKPT_FORMAT or blob.get("version") != CKPT_VERSION:
        raise ValueError(f"{path}: not a version-{CKPT_VERSION} sparse-training checkpoint")
    graph = NetworkGraph.from_dict(blob["graph"])
    dtype = next(v.dtype for v in blob["cls_net"].values() if v.is_floating_point())
    cls_net, seg_net = GraphNet(graph).to(dtype), GraphNet(graph).to(dtype)
    cls_net.load_state_dict(blob["cls_net"])
    seg_net.load_state_dict(blob["seg_net"])
    return LagrangianState(graph, cls_net, seg_net, blob["E"], blob["mu"], blob["round"])
