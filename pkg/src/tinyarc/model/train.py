"""Batching, exact gradients and the pre-training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import torch

from ..errors import NoTrainableEpisodes, TinyArcError
from ..serializer import PAD, TrainingSequence, encode_episode, encode_grid, fit_context, loss_mask, training_sequence
from ..tasks import Pair, TaskRecord, TaskSet
from ..views import GEO_OPS, GeometricOp, View, apply_view_to_task, enumerate_views
from .checkpoint import Checkpoint
from .config import ModelConfig
from .core import LoraSpec, Params, cross_entropy, forward, init_model
from .optim import OptHyper, init_opt_state, lr_at, opt_step

log = logging.getLogger(__name__)


@dataclass
class Batch:
    inputs: torch.Tensor  # [B, T]
    targets: torch.Tensor  # [B, T]
    mask: torch.Tensor  # [B, T] bool

    def __len__(self) -> int:
        return self.inputs.shape[0]


def collate(seqs: Sequence[TrainingSequence], mask_inputs: bool = True) -> Batch:
    """Shift into (input, next-token target) pairs and right-pad with PAD.

    With ``mask_inputs`` the loss covers output grids and EOS only; otherwise
    every real token is a target.
    """
    if not seqs:
        raise ValueError("empty batch")
    T = max(len(s) for s in seqs) - 1
    inp = torch.full((len(seqs), T), PAD, dtype=torch.long)
    tgt = torch.full((len(seqs), T), PAD, dtype=torch.long)
    msk = torch.zeros((len(seqs), T), dtype=torch.bool)
    for b, s in enumerate(seqs):
        ids = torch.as_tensor(s.ids, dtype=torch.long)
        n = len(ids) - 1
        inp[b, :n] = ids[:-1]
        tgt[b, :n] = ids[1:]
        if mask_inputs:
            m = loss_mask(s.ids, s.segments)
            msk[b, :n] = torch.as_tensor(m[1:], dtype=torch.bool)
        else:
            msk[b, :n] = True
    return Batch(inp, tgt, msk)


def batch_loss(params, cfg: ModelConfig, batch: Batch, train_mode: bool = False, dropout_seed: int = 0,
               lora: Optional[LoraSpec] = None) -> torch.Tensor:
    logits = forward(params, cfg, batch.inputs, train_mode=train_mode, dropout_seed=dropout_seed, lora=lora)
    return cross_entropy(logits, batch.targets, batch.mask)


def grads(params: Mapping[str, torch.Tensor], cfg: ModelConfig, batch: Batch,
          wrt: Optional[Iterable[str]] = None) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and exact gradients of the token-mean cross-entropy, dropout off.

    Returns gradients for every parameter (or the names in ``wrt``).
    """
    names = list(params) if wrt is None else list(wrt)
    leaves = {k: v.detach().requires_grad_(k in names) for k, v in params.items()}
    loss = batch_loss(leaves, cfg, batch)
    g = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out = {k: (torch.zeros_like(params[k]) if gi is None else gi.detach().to(params[k].dtype))
           for k, gi in zip(names, g)}
    return float(loss.detach()), out


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    warmup_frac: float = 0.02
    weight_decay: float = 0.01
    views_per_task: int = 64
    fix_background: bool = True
    geo_ops: Optional[tuple[str, ...]] = None  # restrict view geometry; None = all eight
    max_pairs: Optional[int] = None
    mask_inputs: bool = True
    log_every: int = 50
    seed: int = 0
    bucket: int = 1  # >1: draw bucket * batch_size episodes at once and batch them by length

    def hyper(self) -> OptHyper:
        warm = max(1, int(round(self.warmup_frac * self.steps))) if self.warmup_frac > 0 else 0
        return OptHyper(lr=self.lr, weight_decay=self.weight_decay, warmup_steps=warm,
                        total_steps=self.steps)


def all_pairs(t: TaskRecord) -> list[Pair]:
    """Training pairs plus any test items with known outputs."""
    return list(t.train) + [Pair(it.input, it.output) for it in t.test if it.output is not None]


def sample_sequence(t: TaskRecord, view: View, rng: np.random.Generator, cfg: ModelConfig,
                    max_pairs: Optional[int] = None) -> TrainingSequence:
    """One leave-one-out training episode of ``t`` seen through ``view``."""
    vt = apply_view_to_task(view, t)
    pairs = all_pairs(vt)
    if len(pairs) < 2:
        target = pairs[0]
        context = pairs
    else:
        k = int(rng.integers(len(pairs)))
        target = pairs[k]
        context = pairs[:k] + pairs[k + 1:]
    ep = encode_episode([(p.input, p.output) for p in context], target.input)
    ep = fit_context(ep, cfg.max_ctx, target_len=len(encode_grid(target.output)) + 1, max_pairs=max_pairs)
    return training_sequence(ep, target.output)


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def smoothed(self, window: int = 50) -> list[float]:
        out, acc = [], 0.0
        for i, l in enumerate(self.losses):
            acc += l
            if i >= window:
                acc -= self.losses[i - window]
            out.append(acc / min(i + 1, window))
        return out

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain(corpus: TaskSet | Sequence[TaskRecord], cfg: ModelConfig, tcfg: TrainConfig,
             seed: Optional[int] = None, init: Optional[Params] = None,
             callback=None) -> tuple[Checkpoint, TrainLog]:
    """Run ``tcfg.steps`` AdamW updates on view-augmented leave-one-out episodes."""
    seed = tcfg.seed if seed is None else seed
    tasks = list(corpus)
    if not tasks:
        raise NoTrainableEpisodes("empty corpus")
    cfg.validate()
    rng = np.random.default_rng(seed)

    geo = None if tcfg.geo_ops is None else {GeometricOp(g) for g in tcfg.geo_ops}
    usable: list[tuple[TaskRecord, list[View]]] = []
    for i, t in enumerate(tasks):
        views = enumerate_views(t, tcfg.views_per_task, seed=seed + i, fix_background=tcfg.fix_background)
        if geo is not None:
            views = [v for v in views if v.geo in geo] or [views[0]]
        try:
            sample_sequence(t, views[0], np.random.default_rng(0), cfg, tcfg.max_pairs)
        except TinyArcError as exc:
            log.debug("skipping task %s: %s", t.id, exc)
            continue
        usable.append((t, views))
    if not usable:
        raise NoTrainableEpisodes("no task yields an episode that fits the context window")

    params = init if init is not None else init_model(cfg, seed)
    params = {k: v.detach().clone() for k, v in params.items()}
    state = init_opt_state(params)
    hyper = tcfg.hyper()
    trace = TrainLog()

    def draw(n):
        seqs = []
        while len(seqs) < n:
            t, views = usable[int(rng.integers(len(usable)))]
            v = views[int(rng.integers(len(views)))]
            try:
                seqs.append(sample_sequence(t, v, rng, cfg, tcfg.max_pairs))
            except TinyArcError:
                continue
        return seqs

    pending: list[list[TrainingSequence]] = []
    for step in range(1, tcfg.steps + 1):
        if tcfg.bucket <= 1:
            seqs = draw(tcfg.batch_size)
        else:
            if not pending:
                pool = sorted(draw(tcfg.batch_size * tcfg.bucket), key=lambda s: len(s.ids))
                pending = [pool[i:i + tcfg.batch_size] for i in range(0, len(pool), tcfg.batch_size)]
                order = rng.permutation(len(pending))
                pending = [pending[i] for i in order]
            seqs = pending.pop()
        batch = collate(seqs, tcfg.mask_inputs)
        leaves = {k: p.requires_grad_(True) for k, p in params.items()}
        loss = batch_loss(leaves, cfg, batch, train_mode=True, dropout_seed=seed * 1_000_003 + step)
        g = torch.autograd.grad(loss, list(leaves.values()))
        gd = {k: gi for k, gi in zip(leaves, g)}
        params = {k: p.detach() for k, p in params.items()}
        params, state = opt_step(params, gd, state, hyper)
        lv = float(loss.detach())
        trace.steps.append(step)
        trace.losses.append(lv)
        trace.lrs.append(lr_at(step, hyper))
        if step % tcfg.log_every == 0 or step == tcfg.steps:
            log.info("step %d loss %.4f lr %.2e", step, lv, trace.lrs[-1])
        if callback is not None:
            callback(step, lv, params)
    meta = {"train": asdict(tcfg), "seed": seed, "final_loss": trace.losses[-1],
            "n_tasks": len(usable)}
    return Checkpoint(cfg, params, meta), trace
