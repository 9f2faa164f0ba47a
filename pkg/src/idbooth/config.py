"""Run configuration: one dataclass per pipeline section, strict JSON I/O."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

TID_MODES = ("none", "two_point", "triplet")
TID_ORIENTATIONS = ("corrected", "as_printed")
METHODS = {"dreambooth": "none", "portraitbooth": "two_point", "idbooth": "triplet"}
PROMPT_PRESETS = ("base", "background", "negative", "gender", "full")
LOSS_PRESETS = ("rec", "rec_pr", "rec_pr_tid")


@dataclass
class SchedulerConfig:
    T: int = 1000
    beta_start: float = 8.5e-4
    beta_end: float = 0.012
    kind: str = "scaled_linear"


@dataclass
class NetsConfig:
    c_z: int = 4
    ae_width: int = 32
    denoiser_ch: int = 48
    cond_dim: int = 64
    id_dim: int = 64
    feature_dim: int = 64
    lora_rank: int = 4
    lora_scale: float = 1.0


@dataclass
class PretrainConfig:
    wild_n: int = 4000
    cartoon_prob: float = 0.15
    ae_steps: int = 3000
    ae_batch: int = 32
    ae_lr: float = 2e-3
    ae_kl_weight: float = 1e-6
    phi_ids: int = 300
    phi_per_id: int = 12
    phi_steps: int = 2000
    phi_batch: int = 64
    phi_lr: float = 2e-3
    phi_arc_scale: float = 16.0
    phi_arc_margin: float = 0.3
    phi_val_ids: int = 20
    phi_val_per_id: int = 10
    phi_eer_gate: float = 0.05
    feature_steps: int = 800
    feature_batch: int = 32
    feature_lr: float = 2e-3
    base_steps: int = 5000
    base_batch: int = 32
    base_lr: float = 1e-3
    cond_dropout: float = 0.1
    slot_dropout: float = 0.3


@dataclass
class FinetuneConfig:
    lr: float = 3e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 16
    lambda_pr: float = 1.0
    margin: float = 0.4
    tid_orientation: str = "corrected"
    tid_mode: str = "triplet"
    use_prior: bool = True
    lora_rank: int = 4
    lora_scale: float = 1.0
    prior_set_size: int = 64
    grad_clip: float = 1.0
    detector_fail_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.tid_mode not in TID_MODES:
            raise ValueError(f"tid_mode must be one of {TID_MODES}")
        if self.tid_orientation not in TID_ORIENTATIONS:
            raise ValueError(f"tid_orientation must be one of {TID_ORIENTATIONS}")
        if self.lr <= 0 or self.epochs < 1 or self.prior_set_size < 1:
            raise ValueError("lr, epochs and prior_set_size must be positive")
        if self.lambda_pr < 0 or self.margin < 0:
            raise ValueError("lambda_pr and margin must be non-negative")


@dataclass
class SamplerConfig:
    guidance: float = 2.0
    steps: int = 30
    eta: float = 0.0
    per_id: int = 21
    prompt_preset: str = "full"
    batch: int = 64

    def __post_init__(self) -> None:
        if self.prompt_preset not in PROMPT_PRESETS:
            raise ValueError(f"prompt_preset must be one of {PROMPT_PRESETS}")
        if self.guidance < 0:
            raise ValueError("guidance must be >= 0")


@dataclass
class MetricsConfig:
    k_neighbors: int = 5
    reference_n: int = 1000


@dataclass
class VerificationConfig:
    pair_seed: int = 0


@dataclass
class RecognitionConfig:
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.4
    milestones: list[int] = field(default_factory=lambda: [22, 30, 35])
    max_epochs: int = 40
    patience: int = 5
    arc_scale: float = 16.0
    arc_margin: float = 0.3
    width: int = 16
    embedding_dim: int = 64
    val_ids: int = 60
    val_per_id: int = 6
    benchmark_ids: int = 150
    benchmark_per_id: int = 6
    benchmark_pairs: int = 3000

    def __post_init__(self) -> None:
        if list(self.milestones) != sorted(set(self.milestones)):
            raise ValueError("milestones must be strictly increasing")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr and batch_size must be positive")


@dataclass
class ExperimentConfig:
    n_identities: int = 12
    n_per_id: int = 21
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    methods: list[str] = field(default_factory=lambda: ["dreambooth", "portraitbooth", "idbooth"])


@dataclass
class RunConfig:
    name: str = "desk"
    seed: int = 0
    out: str = "runs"
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    nets: NetsConfig = field(default_factory=NetsConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    recognition: RecognitionConfig = field(default_factory=RecognitionConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.name

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ConfigError(ValueError):
    pass


def _build(cls, d: dict[str, Any], where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (``finetune.tid_mode``) with last-wins semantics."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(d)
