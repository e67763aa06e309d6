"""Run configuration shared by the model, the trainer, and the CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

VARIANTS = ("s2s", "foc", "foccoverage", "focconstrain")


def uses_latent(variant: str) -> bool:
    return variant != "s2s"


def uses_coverage_term(variant: str) -> bool:
    return variant in ("foccoverage", "focconstrain")


def uses_focus_loss(variant: str) -> bool:
    return variant == "focconstrain"


@dataclass
class TrainConfig:
    """Everything a training run needs; round-trips through canonical JSON.

    Desk-scale defaults; `paper_init` switches the uniform init range back to
    [-1, 1].  `grad_clip_norm=0` disables clipping.  The latent size doubles
    as the embedding width.
    """

    variant: str = "focconstrain"
    vocab_size: int = 64
    d_h: int = 64
    d_z: int = 32
    batch_size: int = 32
    total_steps: int = 3000
    warmup_steps: int = 200
    peak_lr: float = 0.002
    kl_anneal_steps: int = 500
    seed: int = 0
    log_var_min: float = -10.0
    log_var_max: float = 10.0
    checkpoint_interval: int = 500
    grad_clip_norm: float = 5.0
    init_scale: float = 0.08
    paper_init: bool = False
    n_latent_samples: int = 1
    context_uses_augmented: bool = False
    s0_uses_latent: bool = True
    w_seq: float = 1.0
    w_foc: float = 1.0
    w_bow: float = 1.0

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be at least 4 (three reserved ids plus content)")
        if self.d_h < 2 or self.d_h % 2:
            raise ConfigError(f"d_h must be even and >= 2 (split across directions), got {self.d_h}")
        if self.d_z < 1:
            raise ConfigError("d_z must be positive")
        for name in ("batch_size", "total_steps", "warmup_steps", "kl_anneal_steps",
                     "checkpoint_interval", "n_latent_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.log_var_min >= self.log_var_max:
            raise ConfigError("log_var_min must be below log_var_max")
        if self.grad_clip_norm < 0:
            raise ConfigError("grad_clip_norm must be >= 0 (0 disables clipping)")
        return self

    @property
    def effective_init_scale(self) -> float:
        return 1.0 if self.paper_init else self.init_scale

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**payload).validate()

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))
