"""AdamW with decoupled weight decay, global-norm clipping and warmup-cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import torch

from ..errors import NonFiniteGradient
from .core import Params, is_embedding, is_norm_or_bias


@dataclass(frozen=True)
class OptHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    warmup_steps: int = 0
    total_steps: int = 1
    min_lr_ratio: float = 0.1


@dataclass
class OptState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def init_opt_state(params: Mapping[str, torch.Tensor]) -> OptState:
    return OptState(0, {k: torch.zeros_like(p) for k, p in params.items()},
                    {k: torch.zeros_like(p) for k, p in params.items()})


def lr_at(step: int, hyper: OptHyper) -> float:
    """Learning rate for the 1-based update ``step``."""
    if hyper.warmup_steps > 0 and step <= hyper.warmup_steps:
        return hyper.lr * step / hyper.warmup_steps
    span = max(1, hyper.total_steps - hyper.warmup_steps)
    progress = min(1.0, (step - hyper.warmup_steps) / span)
    floor = hyper.lr * hyper.min_lr_ratio
    return floor + (hyper.lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Mapping[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))


def clip_grads(grads: Mapping[str, torch.Tensor], max_norm: float) -> tuple[dict[str, torch.Tensor], float]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return dict(grads), norm


def decays(name: str) -> bool:
    return not (is_norm_or_bias(name) or is_embedding(name))


def opt_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: OptState,
             hyper: OptHyper) -> tuple[Params, OptState]:
    """One AdamW update. Inputs are left untouched; new tensors are returned."""
    for k, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {k}")
    grads, _ = clip_grads(grads, hyper.clip_norm)
    t = state.step + 1
    lr = lr_at(t, hyper)
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    new_p: Params = {}
    new_m, new_v = {}, {}
    with torch.no_grad():
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                new_p[k], new_m[k], new_v[k] = p, state.m[k], state.v[k]
                continue
            m = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g
            v = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * g * g
            upd = (m / bc1) / ((v / bc2).sqrt() + hyper.eps)
            q = p
            if hyper.weight_decay and decays(k):
                q = q * (1.0 - lr * hyper.weight_decay)
            new_p[k] = q - lr * upd
            new_m[k], new_v[k] = m, v
    return new_p, OptState(t, new_m, new_v)
