"""Weights checkpoints that carry their graph, plus atomic file writes."""

import os
import tempfile
from pathlib import Path

import torch

from mtprune.model import GraphNet
from mtprune.netgraph import NetworkGraph

WEIGHTS_FORMAT = "mtprune-weights"
WEIGHTS_VERSION = 1


def atomic_write(path, write):
    """Call ``write(tmp_path)`` then move the result over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_text(path, text: str):
    return atomic_write(path, lambda tmp: Path(tmp).write_text(text))


def save_weights(path, graph: NetworkGraph, state, config=None, **extra):
    blob = {"format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION,
            "graph": graph.to_dict(), "state": {k: v.detach().clone() for k, v in state.items()},
            "config_hash": config.config_hash() if config is not None else None}
    blob.update(extra)
    return atomic_write(path, lambda tmp: torch.save(blob, tmp))


def load_weights(path):
    """Returns ``(graph, state, blob)``; the state is checked against the graph."""
    blob = torch.load(path, weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"{path}: not an mtprune weights checkpoint")
    if blob.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {blob.get('version')}")
    graph = NetworkGraph.from_dict(blob["graph"])
    GraphNet(graph).load_state_dict(blob["state"])  # raises on shape mismatch
    return graph, blob["state"], blob
