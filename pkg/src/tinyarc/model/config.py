from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace

from ..errors import InvalidConfig
from ..serializer import DEFAULT_MAX_CTX, VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    """TinyLM hyperparameters. The defaults give roughly 20.3M scalars."""

    d_model: int = 448
    n_heads: int = 8
    n_layers: int = 8
    d_ffn: int = 1792
    vocab_size: int = VOCAB_SIZE
    max_ctx: int = DEFAULT_MAX_CTX
    dropout_rate: float = 0.10
    embedding_dropout: bool = True
    ln_eps: float = 1e-5

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        if self.d_model < 1 or self.n_heads < 1 or self.n_layers < 0 or self.d_ffn < 1:
            raise InvalidConfig(f"dimensions must be positive: {self}")
        if self.d_model % self.n_heads:
            raise InvalidConfig(f"{self.n_heads} heads do not partition d_model={self.d_model}")
        if self.vocab_size < VOCAB_SIZE:
            raise InvalidConfig(f"vocab_size must be >= {VOCAB_SIZE}")
        if self.max_ctx < 2:
            raise InvalidConfig("max_ctx must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig(f"dropout_rate {self.dropout_rate} not in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known).validate()

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def __str__(self) -> str:
        return json.dumps(self.to_dict())


DEFAULT_CONFIG = ModelConfig()

# 2 layers, d_model 128, 4 heads: the desk-scale learning experiment
MICRO_CONFIG = ModelConfig(d_model=128, n_heads=4, n_layers=2, d_ffn=512)

# gradient checks
TINY_CONFIG = ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ffn=64, max_ctx=64)

PRESETS = {"default": DEFAULT_CONFIG, "micro": MICRO_CONFIG, "tiny": TINY_CONFIG}
