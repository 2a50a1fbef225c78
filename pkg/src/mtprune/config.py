"""Experiment configuration.

All hyper-parameters live in a single flat dataclass.  On disk the config is
an INI file whose sections group the fields; section names are cosmetic and
any key may appear in any section.
"""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple


SECTIONS = {
    "model": ("width", "depth", "decoder_width", "num_classes", "seg_classes",
              "in_channels", "image_size"),
    "data": ("n_cls_train", "n_cls_val", "n_seg_train", "n_seg_val", "batch_size"),
    "mtp": ("lambda_tradeoff", "alpha1", "alpha2", "rho", "mu0", "mu_max", "rounds",
            "epochs_w1", "epochs_w2", "epochs_w3", "lr_w1", "lr_w2", "lr_w3",
            "early_stop_tol", "gamma3_in_plan"),
    "prune": ("percentile", "threshold_policy"),
    "train": ("pretrain_epochs", "pretrain_lr", "seg_epochs", "seg_lr",
              "slim_alpha", "slim_epochs", "slim_lr", "momentum",
              "lr_schedule"),
    "finetune": ("ft_cls_epochs", "ft_seg_epochs", "ft_cls_lr", "ft_seg_lr"),
    "experiment": ("seed", "latency_runs", "uniform_keep_fraction"),
}


class ConfigError(ValueError):
    pass


@dataclass
class MtpConfig:
    # architecture
    width: int = 8
    depth: int = 3
    decoder_width: int = 16
    num_classes: int = 10
    seg_classes: int = 4
    in_channels: int = 3
    image_size: int = 32

    # synthetic data
    n_cls_train: int = 1000
    n_cls_val: int = 500
    n_seg_train: int = 500
    n_seg_val: int = 200
    batch_size: int = 32

    # multi-task sparse training
    lambda_tradeoff: float = 1.0
    alpha1: float = 1e-3
    alpha2: float = 1e-3
    rho: float = 1.5
    mu0: float = 0.5
    mu_max: float = 10.0
    rounds: int = 5
    epochs_w1: int = 1
    epochs_w2: int = 1
    epochs_w3: int = 1
    lr_w1: float = 0.1
    lr_w2: float = 0.1
    lr_w3: float = 0.1
    early_stop_tol: float = 1e-3
    gamma3_in_plan: bool = False

    # pruning
    percentile: float = 50.0
    threshold_policy: str = "independent"

    # dense training and baselines
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.1
    seg_epochs: int = 30
    seg_lr: float = 0.05
    slim_alpha: float = 1e-3
    slim_epochs: Optional[int] = None  # None: matched to the MTP budget
    slim_lr: float = 0.1
    momentum: float = 0.9  # dense training and fine-tuning only
    lr_schedule: str = "cosine"  # dense training and fine-tuning only

    # two-stage fine-tuning
    ft_cls_epochs: int = 3
    ft_seg_epochs: int = 15
    ft_cls_lr: float = 0.01
    ft_seg_lr: float = 0.01

    seed: int = 0
    latency_runs: int = 20
    uniform_keep_fraction: float = 0.5

    def __post_init__(self):
        self.check()

    def check(self):
        if self.width <= 0 or self.depth <= 0 or self.decoder_width <= 0:
            raise ConfigError("width, depth and decoder_width must be positive")
        if self.depth < 2:
            raise ConfigError("the desk backbone needs at least 2 residual blocks")
        if self.num_classes < 2 or self.seg_classes < 2:
            raise ConfigError("need at least two classes per task")
        if self.lambda_tradeoff < 0:
            raise ConfigError("lambda_tradeoff must be >= 0")
        if self.alpha1 < 0 or self.alpha2 < 0 or self.slim_alpha < 0:
            raise ConfigError("sparsity weights must be >= 0")
        if not self.rho > 1:
            raise ConfigError(f"rho must be > 1, got {self.rho}")
        if not self.mu0 > 0:
            raise ConfigError("mu0 must be > 0")
        if self.mu0 > self.mu_max:
            raise ConfigError("mu0 must not exceed mu_max")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not 0 < self.percentile < 100:
            raise ConfigError(f"percentile must lie in (0, 100), got {self.percentile}")
        if self.threshold_policy not in ("independent", "unified"):
            raise ConfigError(f"unknown threshold policy {self.threshold_policy!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if not 0 < self.uniform_keep_fraction <= 1:
            raise ConfigError("uniform_keep_fraction must lie in (0, 1]")

    @property
    def sparse_epochs(self) -> int:
        """Optimizer epochs spent by one full run of the alternating loop."""
        return self.rounds * (self.epochs_w1 + self.epochs_w2 + self.epochs_w3)

    @property
    def slimming_epochs(self) -> int:
        return self.sparse_epochs if self.slim_epochs is None else self.slim_epochs

    def replace(self, **changes) -> "MtpConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        values = self.to_dict()
        for section, keys in SECTIONS.items():
            parser[section] = {k: "" if values[k] is None else str(values[k]) for k in keys}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser[section].items())
            lines.append("")
        return "\n".join(lines)


def keep_fraction_to_percentile(keep_fraction: float) -> float:
    """0.75x -> p=25, 0.5x -> p=50."""
    if not 0 < keep_fraction <= 1:
        raise ConfigError(f"keep fraction must lie in (0, 1], got {keep_fraction}")
    return (1.0 - keep_fraction) * 100.0


def _coerce(value: str, ftype):
    if ftype in (bool, "bool"):
        lowered = value.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if ftype in (int, "int"):
        return int(value)
    if ftype in (float, "float"):
        return float(value)
    if ftype == Optional[int]:
        return None if value.strip() in ("", "none", "None") else int(value)
    return value.strip()


def parse_config(text: str, **overrides) -> MtpConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    types = {f.name: f.type for f in fields(MtpConfig)}
    values = {}
    for section in parser.sections():
        for key, raw in parser[section].items():
            if key not in types:
                raise ConfigError(f"unknown config key [{section}] {key}")
            values[key] = _coerce(raw, types[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return MtpConfig(**values)


def load_config(path=None, **overrides) -> MtpConfig:
    if path is None:
        return MtpConfig(**{k: v for k, v in overrides.items() if v is not None})
    return parse_config(Path(path).read_text(), **overrides)


def smoke_config(**changes) -> MtpConfig:
    """Tiny budgets for end-to-end orchestration checks."""
    base = dict(
        n_cls_train=128, n_cls_val=64, n_seg_train=64, n_seg_val=32,
        image_size=16, rounds=2, pretrain_epochs=1, seg_epochs=1,
        ft_cls_epochs=1, ft_seg_epochs=1, latency_runs=5,
    )
    base.update(changes)
    return MtpConfig(**base)
