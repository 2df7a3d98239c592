from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 512
    max_len: int = 256
    dropout: float = 0.3

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        for name in ("layers", "d_model", "heads", "ffn_dim", "vocab_size", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def preset(cls, name: str, vocab_size: int, **overrides) -> "ModelConfig":
        try:
            base = MODEL_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}") from None
        return dataclasses.replace(base, vocab_size=vocab_size, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


MODEL_PRESETS = {
    "tiny": ModelConfig(layers=2, d_model=64, heads=4, ffn_dim=256, max_len=256),
    # mBART-large shape; only its structure is used at desk scale
    "paper-mbart-shape": ModelConfig(layers=12, d_model=1024, heads=16, ffn_dim=4096, max_len=1024),
}


@dataclass(frozen=True)
class TrainConfig:
    dropout: float = 0.3
    label_smoothing: float = 0.2
    warmup_steps: int = 2500
    max_lr: float = 3e-5
    max_updates: int = 100_000
    batch_tokens: int = 1024
    seed: int = 1
    schedule: str = "inverse_sqrt"
    save_every: int = 10_000
    keep_last: int = 10
    clip_norm: float = 0.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must be in [0, 1)")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        for name in ("warmup_steps", "max_updates", "batch_tokens", "save_every", "keep_last"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.max_lr > 0:
            raise ValueError("max_lr must be positive")
        if self.schedule not in ("inverse_sqrt", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def bilingual(cls, **kw) -> "TrainConfig":
        return cls(max_updates=100_000, **kw)

    @classmethod
    def multilingual(cls, **kw) -> "TrainConfig":
        return cls(max_updates=300_000, save_every=30_000, **kw)

    def scaled(self, scale: float) -> "TrainConfig":
        """Shrink warmup, update budget and save interval by one factor."""
        return dataclasses.replace(
            self,
            warmup_steps=max(1, round(self.warmup_steps * scale)),
            max_updates=max(1, round(self.max_updates * scale)),
            save_every=max(1, round(self.save_every * scale)),
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``max_lr``, then inverse-square-root decay (or constant).

    ``step`` counts from 1.
    """
    if step <= cfg.warmup_steps:
        return cfg.max_lr * (step / cfg.warmup_steps)
    if cfg.schedule == "constant":
        return cfg.max_lr
    return cfg.max_lr * (cfg.warmup_steps / step) ** 0.5
