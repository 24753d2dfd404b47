"""Inference helpers: greedy decoding and sequence scoring."""

from __future__ import annotations

from typing import Mapping, Optional, Sequence

import torch

from ..errors import ContextExceeded
from ..serializer import EOS
from .config import ModelConfig
from .core import LoraSpec, Params, forward


def generate_greedy(params: Mapping[str, torch.Tensor], cfg: ModelConfig, prefix: Sequence[int],
                    max_new: int, lora: Optional[LoraSpec] = None, use_cache: bool = True) -> list[int]:
    """Append argmax tokens (lowest id on ties) until EOS or ``max_new``.

    Returns the continuation only. Raises ContextExceeded when the window
    fills before EOS.
    """
    prefix = list(prefix)
    if len(prefix) >= cfg.max_ctx:
        raise ContextExceeded(f"prefix of {len(prefix)} leaves no room in max_ctx={cfg.max_ctx}")
    out: list[int] = []
    cache: list | None = [] if use_cache else None
    with torch.no_grad():
        logits = forward(params, cfg, prefix, lora=lora, cache=cache)
        while len(out) < max_new:
            # torch.argmax returns the first maximal index
            nxt = int(torch.argmax(logits[-1]))
            out.append(nxt)
            if nxt == EOS or len(out) >= max_new:
                break
            pos = len(prefix) + len(out)
            if pos >= cfg.max_ctx:
                raise ContextExceeded(f"context window of {cfg.max_ctx} filled before EOS")
            if use_cache:
                logits = forward(params, cfg, [nxt], lora=lora, cache=cache, start=pos - 1)
            else:
                logits = forward(params, cfg, prefix + out, lora=lora)
    return out


def token_logprobs(params, cfg: ModelConfig, prefix: Sequence[int], continuation: Sequence[int],
                   lora: Optional[LoraSpec] = None) -> torch.Tensor:
    """Per-token log-probabilities of ``continuation`` given ``prefix`` (float64)."""
    prefix, continuation = list(prefix), list(continuation)
    if not continuation:
        return torch.zeros(0, dtype=torch.float64)
    if len(prefix) + len(continuation) > cfg.max_ctx:
        raise ContextExceeded(f"{len(prefix) + len(continuation)} tokens exceed max_ctx={cfg.max_ctx}")
    if not prefix:
        raise ValueError("scoring needs a nonempty prefix")
    seq = prefix + continuation[:-1]
    with torch.no_grad():
        logp = torch.log_softmax(forward(params, cfg, seq, lora=lora).double(), dim=-1)
    rows = logp[len(prefix) - 1:]
    return rows.gather(-1, torch.as_tensor(continuation).unsqueeze(-1)).squeeze(-1)


def seq_logprob(params, cfg: ModelConfig, prefix: Sequence[int], continuation: Sequence[int],
                lora: Optional[LoraSpec] = None) -> float:
    """Sum of next-token log-probabilities of ``continuation`` (dropout off)."""
    return float(token_logprobs(params, cfg, prefix, continuation, lora).sum())


class TinyLM:
    """A parameter set bound to its config, exposing the generation interface
    used by the ensemble and harness."""

    def __init__(self, params: Params, cfg: ModelConfig, lora: Optional[LoraSpec] = None):
        self.params = params
        self.cfg = cfg
        self.lora = lora

    @property
    def max_ctx(self) -> int:
        return self.cfg.max_ctx

    def logits(self, tokens) -> torch.Tensor:
        with torch.no_grad():
            return forward(self.params, self.cfg, tokens, lora=self.lora)

    def generate_greedy(self, prefix: Sequence[int], max_new: int) -> list[int]:
        return generate_greedy(self.params, self.cfg, prefix, max_new, lora=self.lora)

    def seq_logprob(self, prefix: Sequence[int], continuation: Sequence[int]) -> float:
        return seq_logprob(self.params, self.cfg, prefix, continuation, lora=self.lora)
