"""Functional TinyLM: parameter layout, initialization, forward pass and loss.

Weights are stored input-major (``y = x @ W + b``) in a plain ordered dict
keyed by dotted names, which doubles as the checkpoint manifest order.
"""

from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ContextExceeded, EmptyMask, InvalidConfig, UnknownToken
from .config import ModelConfig

Params = dict[str, torch.Tensor]

# dropout site ids for the counter-based generator
_SITE_EMB, _SITE_ATTN, _SITE_FFN, _SITE_LORA = 0, 1, 2, 3


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (cfg.max_ctx, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.scale"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"attn.{proj}.weight"] = (d, d)
            shapes[p + f"attn.{proj}.bias"] = (d,)
        shapes[p + "ln2.scale"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.up.weight"] = (d, f)
        shapes[p + "ffn.up.bias"] = (f,)
        shapes[p + "ffn.down.weight"] = (f, d)
        shapes[p + "ffn.down.bias"] = (d,)
    shapes["ln_f.scale"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["head.weight"] = (d, v)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def is_norm_or_bias(name: str) -> bool:
    return name.endswith(".bias") or name.endswith(".scale")


def is_embedding(name: str) -> bool:
    return name in ("tok_emb", "pos_emb")


def init_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Params:
    """N(0, 0.02) weights, residual outputs shrunk by 1/sqrt(2 * n_layers)."""
    cfg.validate()
    gen = torch.Generator().manual_seed(int(seed))
    resid_scale = 1.0 / math.sqrt(2 * cfg.n_layers) if cfg.n_layers else 1.0
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            t = torch.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            t = torch.zeros(shape, dtype=dtype)
        else:
            t = torch.randn(shape, generator=gen, dtype=torch.float32).to(dtype) * 0.02
            if name.endswith("attn.o.weight") or name.endswith("ffn.down.weight"):
                t = t * resid_scale
        params[name] = t
    return params


def clone_params(p: Mapping[str, torch.Tensor]) -> Params:
    return {k: v.detach().clone() for k, v in p.items()}


def params_digest(p: Mapping[str, torch.Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(p):
        h.update(k.encode())
        h.update(p[k].detach().contiguous().cpu().numpy().tobytes())
    return h.hexdigest()


def site_seed(seed: int, layer: int, site: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, layer + 1, site]).generate_state(1)[0])


def dropout(x: torch.Tensor, rate: float, seed: int, layer: int, site: int) -> torch.Tensor:
    """Inverted dropout with a mask fully determined by (seed, layer, site)."""
    if rate <= 0.0:
        return x
    gen = torch.Generator().manual_seed(site_seed(seed, layer, site))
    keep = torch.rand(x.shape, generator=gen) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


class LoraSpec:
    """Low-rank deltas attached to named projection weights."""

    def __init__(self, factors: Mapping[str, tuple[torch.Tensor, torch.Tensor]], scale: float,
                 rate: float = 0.0):
        self.factors = factors  # weight name -> (A [r x d_out], B [d_in x r])
        self.scale = scale
        self.rate = rate


def _linear(x, params, name, lora: Optional[LoraSpec], train, seed, layer, site):
    y = x @ params[name + ".weight"] + params[name + ".bias"]
    if lora is not None:
        ab = lora.factors.get(name + ".weight")
        if ab is not None:
            a, b = ab
            xin = dropout(x, lora.rate, seed, layer, site) if train else x
            y = y + lora.scale * ((xin @ b) @ a)
    return y


def check_tokens(tokens: torch.Tensor, cfg: ModelConfig) -> None:
    if tokens.shape[-1] > cfg.max_ctx:
        raise ContextExceeded(f"{tokens.shape[-1]} tokens exceed max_ctx={cfg.max_ctx}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab_size):
        raise UnknownToken("token id outside the vocabulary")


def as_tokens(tokens) -> torch.Tensor:
    if isinstance(tokens, torch.Tensor):
        return tokens.long()
    return torch.as_tensor(list(tokens), dtype=torch.long)


def forward(params: Mapping[str, torch.Tensor], cfg: ModelConfig, tokens, train_mode: bool = False,
            dropout_seed: int = 0, lora: Optional[LoraSpec] = None, return_attn: bool = False,
            cache: Optional[list] = None, start: int = 0):
    """Logits for every position: ``[T, vocab]`` for 1-D input, ``[B, T, vocab]`` for 2-D.

    ``cache`` (a list, filled in place) holds per-layer keys and values for
    incremental decoding; ``start`` is the absolute position of ``tokens[0]``.
    """
    tokens = as_tokens(tokens)
    squeeze = tokens.dim() == 1
    if squeeze:
        tokens = tokens[None]
    B, T = tokens.shape
    if start + T > cfg.max_ctx:
        raise ContextExceeded(f"{start + T} tokens exceed max_ctx={cfg.max_ctx}")
    check_tokens(tokens, cfg)
    rate = cfg.dropout_rate if train_mode else 0.0
    H, hd = cfg.n_heads, cfg.head_dim

    x = params["tok_emb"][tokens] + params["pos_emb"][start:start + T]
    if cfg.embedding_dropout:
        x = dropout(x, rate, dropout_seed, -1, _SITE_EMB)
    attn_maps = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = F.layer_norm(x, (cfg.d_model,), params[p + "ln1.scale"], params[p + "ln1.bias"], cfg.ln_eps)
        q = _linear(h, params, p + "attn.q", lora, train_mode, dropout_seed, i, _SITE_LORA * 10 + 0)
        k = _linear(h, params, p + "attn.k", lora, train_mode, dropout_seed, i, _SITE_LORA * 10 + 1)
        v = _linear(h, params, p + "attn.v", lora, train_mode, dropout_seed, i, _SITE_LORA * 10 + 2)
        q = q.view(B, T, H, hd).transpose(1, 2)
        k = k.view(B, T, H, hd).transpose(1, 2)
        v = v.view(B, T, H, hd).transpose(1, 2)
        if cache is not None:
            if len(cache) > i:
                pk, pv = cache[i]
                k = torch.cat([pk, k], dim=2)
                v = torch.cat([pv, v], dim=2)
                cache[i] = (k, v)
            else:
                cache.append((k, v))
        S = k.shape[2]
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        # query t (absolute start + t) may see keys 0..start + t
        causal = torch.ones(T, S, dtype=torch.bool).tril(diagonal=S - T)
        scores = scores.masked_fill(~causal, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        if return_attn:
            attn_maps.append(att.detach())
        a = (att @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
        a = _linear(a, params, p + "attn.o", lora, train_mode, dropout_seed, i, _SITE_LORA * 10 + 3)
        x = x + dropout(a, rate, dropout_seed, i, _SITE_ATTN)

        h = F.layer_norm(x, (cfg.d_model,), params[p + "ln2.scale"], params[p + "ln2.bias"], cfg.ln_eps)
        h = F.gelu(h @ params[p + "ffn.up.weight"] + params[p + "ffn.up.bias"])
        h = h @ params[p + "ffn.down.weight"] + params[p + "ffn.down.bias"]
        x = x + dropout(h, rate, dropout_seed, i, _SITE_FFN)

    x = F.layer_norm(x, (cfg.d_model,), params["ln_f.scale"], params["ln_f.bias"], cfg.ln_eps)
    logits = x @ params["head.weight"]
    if squeeze:
        logits = logits[0]
        attn_maps = [m[0] for m in attn_maps]
    return (logits, attn_maps) if return_attn else logits


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean NLL of ``targets`` over positions where ``mask`` is set (float64)."""
    mask = torch.as_tensor(mask, dtype=torch.bool)
    n = int(mask.sum())
    if n == 0:
        raise EmptyMask("loss mask selects no positions")
    logp = torch.log_softmax(logits.double(), dim=-1)
    nll = -logp.gather(-1, as_tokens(targets).unsqueeze(-1)).squeeze(-1)
    return (nll * mask.double()).sum() / n


def log_probs(params, cfg, tokens, lora=None) -> torch.Tensor:
    with torch.no_grad():
        return torch.log_softmax(forward(params, cfg, tokens, lora=lora).double(), dim=-1)
