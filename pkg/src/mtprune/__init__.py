"""Multi-task channel pruning for encoder-decoder segmentation networks."""

from mtprune.config import MtpConfig, load_config
from mtprune.netgraph import (
    LayerSpec,
    NetworkGraph,
    ScalingVector,
    build_desk_network,
    extract_scaling_factors,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "MtpConfig",
    "load_config",
    "LayerSpec",
    "NetworkGraph",
    "ScalingVector",
    "build_desk_network",
    "extract_scaling_factors",
    "validate",
]
