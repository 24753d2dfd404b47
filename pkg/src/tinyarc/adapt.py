"""Test-time training with low-rank adapters.

Adapters target the attention query and value projections of every layer.
The effective weight is ``W + (alpha / rank) * B @ A`` with ``B`` zero at
attach time, so a fresh adapter leaves the model's outputs unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from .errors import ContextOverflow, EmptyTTTSet, UnknownTarget
from .model.config import ModelConfig
from .model.core import LoraSpec, Params, clone_params
from .model.lm import TinyLM
from .model.train import batch_loss, collate
from .serializer import TrainingSequence, encode_episode, encode_grid, fit_context, training_sequence
from .tasks import TaskRecord
from .views import View, apply_view_to_task

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float = 16.0
    adapter_dropout: float = 0.20
    targets: tuple[str, ...] = ("attn.q", "attn.v")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.adapter_dropout < 1.0:
            raise ValueError("adapter_dropout must lie in [0, 1)")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass(frozen=True)
class TTTConfig:
    steps: int = 10
    learning_rate: float = 5e-5
    patience: int = 3
    eval_every: int = 2
    min_improvement: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    full_finetune: bool = False

    MAX_STEPS = 50

    def __post_init__(self):
        if not 1 <= self.steps <= self.MAX_STEPS:
            raise ValueError(f"steps must lie in [1, {self.MAX_STEPS}]")
        if self.eval_every < 1 or self.patience < 1:
            raise ValueError("eval_every and patience must be >= 1")


@dataclass
class AdaptedModel:
    """Frozen base parameters plus task-private trainable state."""

    base: Params
    cfg: ModelConfig
    acfg: AdapterConfig
    factors: dict[str, tuple[torch.Tensor, torch.Tensor]]  # weight name -> (A, B)
    full: Optional[Params] = None  # replaces base when fine-tuning every weight

    def lora(self, train: bool = False) -> Optional[LoraSpec]:
        if not self.factors:
            return None
        return LoraSpec(self.factors, self.acfg.scale, self.acfg.adapter_dropout if train else 0.0)

    @property
    def weights(self) -> Params:
        return self.full if self.full is not None else self.base

    def lm(self) -> TinyLM:
        return TinyLM(self.weights, self.cfg, self.lora())

    @property
    def max_ctx(self) -> int:
        return self.cfg.max_ctx

    def generate_greedy(self, prefix, max_new):
        return self.lm().generate_greedy(prefix, max_new)

    def seq_logprob(self, prefix, continuation):
        return self.lm().seq_logprob(prefix, continuation)

    def n_adapter_params(self) -> int:
        return sum(a.numel() + b.numel() for a, b in self.factors.values())


def target_names(cfg: ModelConfig, acfg: AdapterConfig) -> list[str]:
    return [f"layers.{i}.{t}.weight" for i in range(cfg.n_layers) for t in acfg.targets]


def attach_adapters(params: Params, cfg: ModelConfig, acfg: AdapterConfig = AdapterConfig(),
                    seed: int = 0) -> AdaptedModel:
    """A ~ N(0, 0.02), B = 0 for every target weight."""
    gen = torch.Generator().manual_seed(int(seed))
    factors = {}
    for name in target_names(cfg, acfg):
        if name not in params:
            raise UnknownTarget(name)
        w = params[name]
        d_in, d_out = w.shape
        a = (torch.randn((acfg.rank, d_out), generator=gen, dtype=torch.float32) * 0.02).to(w.dtype)
        b = torch.zeros((d_in, acfg.rank), dtype=w.dtype)
        factors[name] = (a, b)
    return AdaptedModel(params, cfg, acfg, factors)


def attach_full_finetune(params: Params, cfg: ModelConfig) -> AdaptedModel:
    """Trainable private copy of every weight; the base stays untouched."""
    return AdaptedModel(params, cfg, AdapterConfig(), {}, full=clone_params(params))


def merge_adapters(m: AdaptedModel) -> Params:
    """Standalone parameters with the low-rank deltas folded in."""
    out = dict(m.weights)
    for name, (a, b) in m.factors.items():
        out[name] = (m.weights[name] + m.acfg.scale * (b @ a)).detach()
    return out


def _episode(context, target, max_ctx: int, max_pairs: Optional[int]) -> TrainingSequence:
    ep = encode_episode([(p.input, p.output) for p in context], target.input)
    ep = fit_context(ep, max_ctx, target_len=len(encode_grid(target.output)) + 1, max_pairs=max_pairs)
    return training_sequence(ep, target.output)


def build_ttt_set(t: TaskRecord, views: Sequence[View], leave_one_out: bool = True,
                  max_ctx: int = 2048, max_pairs: Optional[int] = None) -> list[TrainingSequence]:
    """Training episodes built only from the task's demonstrations.

    With ``leave_one_out`` and K >= 2 pairs: K episodes per view, each holding
    one pair out as the target. Otherwise each pair is a target with the full
    demonstration list as context (a single pair is its own context).
    """
    if not t.train:
        raise EmptyTTTSet(f"task {t.id} has no demonstrations")
    out: list[TrainingSequence] = []
    dropped = 0
    for v in views:
        pairs = list(apply_view_to_task(v, t).train)
        for k, target in enumerate(pairs):
            context = pairs[:k] + pairs[k + 1:] if leave_one_out and len(pairs) >= 2 else pairs
            try:
                out.append(_episode(context, target, max_ctx, max_pairs))
            except ContextOverflow:
                dropped += 1
    if not out:
        raise EmptyTTTSet(f"task {t.id}: all {dropped} TTT episodes overflow the context")
    if dropped:
        log.debug("task %s: dropped %d overflowing TTT episodes", t.id, dropped)
    return out


@dataclass
class TTTTrace:
    train_losses: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_losses: list[float] = field(default_factory=list)
    best_step: int = 0
    stopped_early: bool = False

    @property
    def n_updates(self) -> int:
        return len(self.train_losses)

    @property
    def initial_loss(self) -> float:
        return self.eval_losses[0]

    @property
    def best_loss(self) -> float:
        return min(self.eval_losses)


def _trainable(m: AdaptedModel) -> dict[str, torch.Tensor]:
    if m.full is not None:
        return dict(m.full)
    out = {}
    for name, (a, b) in m.factors.items():
        out[name + ".A"] = a
        out[name + ".B"] = b
    return out


def _rebuild(m: AdaptedModel, state: Mapping[str, torch.Tensor]) -> AdaptedModel:
    if m.full is not None:
        return AdaptedModel(m.base, m.cfg, m.acfg, {}, full={k: v.detach() for k, v in state.items()})
    factors = {name: (state[name + ".A"].detach(), state[name + ".B"].detach()) for name in m.factors}
    return AdaptedModel(m.base, m.cfg, m.acfg, factors)


def _loss(m: AdaptedModel, state, batch, train: bool, seed: int) -> torch.Tensor:
    if m.full is not None:
        return batch_loss(state, m.cfg, batch, train_mode=train, dropout_seed=seed)
    factors = {name: (state[name + ".A"], state[name + ".B"]) for name in m.factors}
    rate = m.acfg.adapter_dropout if train else 0.0
    # base dropout stays off; only the adapter path is regularized
    cfg = m.cfg.with_(dropout_rate=0.0)
    return batch_loss(m.base, cfg, batch, train_mode=train, dropout_seed=seed,
                      lora=LoraSpec(factors, m.acfg.scale, rate))


def demo_loss(m: AdaptedModel, episodes: Sequence[TrainingSequence], chunk: int = 16) -> float:
    """Mean token loss over all episodes, dropout off."""
    total, count = 0.0, 0
    state = _trainable(m)
    with torch.no_grad():
        for i in range(0, len(episodes), chunk):
            batch = collate(episodes[i:i + chunk])
            n = int(batch.mask.sum())
            total += float(_loss(m, state, batch, False, 0)) * n
            count += n
    return total / count


def ttt_run(m: AdaptedModel, episodes: Sequence[TrainingSequence],
            tcfg: TTTConfig = TTTConfig()) -> tuple[AdaptedModel, TTTTrace]:
    """Plain gradient descent on the trainable state with early stopping.

    Demonstration loss is evaluated before the first update and every
    ``eval_every`` updates. Training stops after ``patience`` evaluations
    without an improvement larger than ``min_improvement``. The state with the
    lowest recorded evaluation loss is returned.
    """
    if not episodes:
        raise EmptyTTTSet("no TTT episodes")
    episodes = list(episodes)
    rng = np.random.default_rng(tcfg.seed)
    state = {k: v.detach().clone() for k, v in _trainable(m).items()}
    trace = TTTTrace()

    def evaluate(step):
        loss = demo_loss(_rebuild(m, state), episodes)
        trace.eval_steps.append(step)
        trace.eval_losses.append(loss)
        return loss

    best_loss = evaluate(0)
    best_state = dict(state)
    ref_loss = best_loss  # for the stall rule
    stall = 0
    for step in range(1, tcfg.steps + 1):
        if len(episodes) <= tcfg.batch_size:
            chosen = episodes
        else:
            idx = np.sort(rng.choice(len(episodes), size=tcfg.batch_size, replace=False))
            chosen = [episodes[i] for i in idx]
        batch = collate(chosen)
        leaves = {k: v.detach().requires_grad_(True) for k, v in state.items()}
        loss = _loss(m, leaves, batch, True, tcfg.seed * 7919 + step)
        g = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
        with torch.no_grad():
            state = {k: (v if gi is None else v - tcfg.learning_rate * gi).detach()
                     for (k, v), gi in zip(leaves.items(), g)}
        trace.train_losses.append(float(loss.detach()))
        if step % tcfg.eval_every == 0:
            loss_now = evaluate(step)
            if loss_now < best_loss:
                best_loss, best_state, trace.best_step = loss_now, dict(state), step
            if loss_now < ref_loss - tcfg.min_improvement:
                ref_loss, stall = loss_now, 0
            else:
                stall += 1
                if stall >= tcfg.patience:
                    trace.stopped_early = step < tcfg.steps
                    break
    return _rebuild(m, best_state), trace


def adapter_tensors(m: AdaptedModel) -> dict[str, torch.Tensor]:
    """Flat tensor dict for dumping with the checkpoint container."""
    return {"adapter." + k: v for k, v in _trainable(m).items()} if m.full is None else {}
