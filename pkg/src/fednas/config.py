"""Experiment configuration: JSON in, validated dataclass out.

Defaults follow the full-scale training recipe (125 rounds, 5 local epochs,
batch 256, lr 0.05 cosine-decayed, weight decay 3e-4 on weights and none on
the architecture logits, 250 retraining rounds); the bundled desk-scale
configs override them to values that finish in minutes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .federation import TrainHyper
from .ops import OpKind
from .supernet import SuperNetModel

DEFAULT_CANDIDATES = ["zero", "identity", "dwsep_k3_e1", "dwsep_k3_e3", "dwsep_k5_e3"]


def parse_candidate(name: str, channels: int) -> OpKind:
    if name == "zero":
        return OpKind("zero")
    if name == "identity":
        return OpKind("identity")
    if name == "avgpool_k3":
        return OpKind("avgpool", kernel=3)
    if name.startswith("conv_k"):
        return OpKind("conv", kernel=int(name[6:]), channels=channels)
    if name.startswith("dwsep_k"):
        kpart, epart = name[7:].split("_e")
        return OpKind("dwsep", kernel=int(kpart), channels=channels, expansion=int(epart))
    raise ConfigError(f"unknown candidate op {name!r}")


@dataclass
class ExperimentConfig:
    # dataset
    num_classes: int = 6
    input_shape: tuple = (1, 8, 8)
    per_class: int = 120
    difficulty: float = 0.5
    dataset_path: str = ""          # optional binary import; overrides synthesis
    # partition
    partition: str = "label_shard"  # label_shard | iid
    scheme: list = field(default_factory=list)  # [(classes, clients)]; empty -> 3:3:4 recipe
    test_fraction: float = 0.1
    # federation
    num_clients: int = 6
    rounds: int = 125
    local_epochs: int = 5
    batch_size: int = 256
    participation: float = 1.0
    # optimizers
    lr_w: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    alpha_lr: float = 3e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    # model
    num_layers: int = 6
    stem_channels: int = 8
    candidates: list = field(default_factory=lambda: list(DEFAULT_CANDIDATES))
    downsample_after: list = field(default_factory=list)
    # latency-aware loss
    latency_weight: float = 0.0
    latency_table_path: str = ""
    latency_profile: str = ""
    # clustering
    cluster_spec_path: str = ""
    cluster_key: str = "tag"
    cluster_rounds: int = 25
    # retraining / evaluation
    retrain_rounds: int = 250
    retrain_lr: float = 0.0         # 0 -> reuse lr_w
    retrain_batch_size: int = 0     # 0 -> reuse batch_size
    eval_local_epochs: int = 1
    eval_every: int = 0
    # run control
    seed: int = 0
    threads: int = 1
    out_dir: str = "runs/out"

    def validate(self) -> None:
        positive = ["num_classes", "per_class", "num_clients", "batch_size",
                    "num_layers", "stem_channels"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"config field {name!r} must be >= 1")
        for name in ["rounds", "local_epochs", "cluster_rounds", "retrain_rounds",
                     "eval_local_epochs", "eval_every", "seed"]:
            if getattr(self, name) < 0:
                raise ConfigError(f"config field {name!r} must be >= 0")
        if self.num_classes < 2:
            raise ConfigError("config field 'num_classes' must be >= 2")
        if not 0 < self.participation <= 1:
            raise ConfigError("config field 'participation' must be in (0, 1]")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("config field 'test_fraction' must be in [0, 1)")
        if self.partition not in ("label_shard", "iid"):
            raise ConfigError("config field 'partition' must be 'label_shard' or 'iid'")
        if self.retrain_lr < 0 or self.retrain_batch_size < 0:
            raise ConfigError("config fields 'retrain_lr' and 'retrain_batch_size' must be >= 0")
        if self.latency_weight < 0:
            raise ConfigError("config field 'latency_weight' must be >= 0")
        if self.latency_weight > 0 and not self.latency_table_path:
            raise ConfigError("config field 'latency_table_path' is required when latency_weight > 0")
        if len(self.input_shape) != 3:
            raise ConfigError("config field 'input_shape' must be (channels, height, width)")
        if self.threads < 1:
            raise ConfigError("config field 'threads' must be >= 1")
        for name in self.candidates:
            parse_candidate(name, self.stem_channels)

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        cfg = ExperimentConfig(**d)
        cfg.input_shape = tuple(cfg.input_shape)
        cfg.adam_betas = tuple(cfg.adam_betas)
        cfg.validate()
        return cfg

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return ExperimentConfig.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["adam_betas"] = list(self.adam_betas)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    # -- derived objects -----------------------------------------------------

    def hyper(self) -> TrainHyper:
        return TrainHyper(
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            lr_w=self.lr_w,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            alpha_lr=self.alpha_lr,
            adam_betas=self.adam_betas,
            adam_eps=self.adam_eps,
            participation=self.participation,
        )

    def retrain_hyper(self) -> TrainHyper:
        """Hyperparameters for retraining the derived net from scratch. The
        discrete net tolerates a different (usually smaller) step size than
        the gate-sampled search pass."""
        h = self.hyper()
        if self.retrain_lr > 0:
            h.lr_w = self.retrain_lr
        if self.retrain_batch_size > 0:
            h.batch_size = self.retrain_batch_size
        return h

    def build_model(self) -> SuperNetModel:
        cands = [parse_candidate(n, self.stem_channels) for n in self.candidates]
        return SuperNetModel(
            in_shape=self.input_shape,
            num_classes=self.num_classes,
            layer_candidates=[list(cands) for _ in range(self.num_layers)],
            stem_channels=self.stem_channels,
            downsample_after=self.downsample_after,
        )
