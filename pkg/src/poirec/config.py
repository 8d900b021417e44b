"""Training configuration: a flat dataclass mirrored by flat JSON/TOML files."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

SEQ_VARIANTS = ("full", "disen-stub", "gcn", "att", "mean")


@dataclass
class TrainConfig:
    embed_dim: int = 64
    learning_rate: float = 0.001
    seq_weight: float = 0.5          # mix between sequential and geographic terms
    score_loss_weight: float = 0.2   # weight of the score-matching loss
    l2_reg: float = 1e-3
    dropout: float = 0.2
    patience: int = 10
    max_epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    spatial_bins: int = 256
    temporal_bins: int = 256
    max_seq_len: int = 100
    seq_layers: int = 2
    geo_layers: int = 2
    threshold_km: float = 1.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    horizon: float = 1.0
    step_size: float = 0.01
    stochastic_sampler: bool = True
    backprop_through_sampler: bool = True
    noise_last_step: bool = False
    t_floor: float = 1e-3
    score_hidden: tuple = (64,)
    score_time_feature: bool = False
    wo_graph: bool = False
    wo_location: bool = False
    wo_sampling: bool = False
    wo_condition: bool = False
    seqenc_variant: str = "full"

    def validate(self):
        if not 0.0 <= self.seq_weight <= 1.0:
            raise ValueError(f"seq_weight must be in [0, 1], got {self.seq_weight}")
        if self.score_loss_weight < 0.0 or self.l2_reg < 0.0:
            raise ValueError("loss weights must be nonnegative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.seqenc_variant not in SEQ_VARIANTS:
            raise ValueError(f"seqenc_variant must be one of {SEQ_VARIANTS}")
        if self.embed_dim < 1 or self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("embed_dim/batch_size/max_epochs out of range")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["score_hidden"] = list(self.score_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "score_hidden" in d:
            d["score_hidden"] = tuple(d["score_hidden"])
        return cls(**d).validate()

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path):
    """Read a flat key-value config file (JSON or TOML) into a TrainConfig."""
    text = open(path, "rb").read()
    name = str(path)
    if name.endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        data = tomllib.loads(text.decode("utf-8"))
    else:
        data = json.loads(text.decode("utf-8"))
    return TrainConfig.from_dict(data)
