"""Model, decision and training configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .errors import ConfigError


@dataclass
class ModelConfig:
    num_classes: int = 4
    dim: int = 256
    heads: int = 8
    hidden: int = 512
    t: int = 15
    n: int = 80
    s: int = 20
    d_global: int = 1024
    d_local: int = 256
    d_text: int = 1024
    dropout: float = 0.7
    k: int = 16
    k_hat: int = 1
    lam: float = 0.8
    multi_label: bool = True
    threshold: float = 0.5
    use_vision: bool = True
    use_text: bool = True
    global_only: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} must be divisible by heads={self.heads}")
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"k={self.k} must lie in [1, n={self.n}]")
        if not 1 <= self.k_hat <= self.s:
            raise ConfigError(f"k_hat={self.k_hat} must lie in [1, s={self.s}]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda={self.lam} must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} must lie in [0, 1)")
        if not self.global_only and not (self.use_vision or self.use_text):
            raise ConfigError("at least one branch must be enabled unless global_only is set")

    @property
    def branch_lambda(self) -> float:
        """Weight on the vision branch after ablation toggles are applied."""
        if not self.use_text:
            return 1.0
        if not self.use_vision:
            return 0.0
        return self.lam

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    phase: str = "main"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.phase not in ("main", "refinement"):
            raise ConfigError(f"unknown phase {self.phase!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


BDD_OIA = dict(num_classes=4, t=15, n=80, s=20, k=16, k_hat=1)
PSI = dict(num_classes=3, t=15, n=40, s=24, k=8, k_hat=1, multi_label=False)

# Desk-scale preset for the synthetic planted benchmark. 2000 training bags
# give ~16 steps/epoch, so lr is raised 10x; dropout 0.7 on a 64-wide
# classifier randomizes which instances win the top-k selection.
DESK_MODEL = dict(num_classes=4, dim=64, heads=8, hidden=128, t=4, n=16, s=8,
                  d_global=64, d_local=64, d_text=64, k=2, k_hat=1, dropout=0.0)
DESK_TRAIN = dict(lr=1e-3, batch_size=128, epochs=60)
