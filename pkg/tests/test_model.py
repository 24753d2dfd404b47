import math

import numpy as np
import pytest
import torch

from tinyarc import errors
from tinyarc.model import (
    DEFAULT_CONFIG, MICRO_CONFIG, TINY_CONFIG, ModelConfig, OptHyper, TinyLM,
    collate, count_params, cross_entropy, forward, generate_greedy, grads, init_model,
    init_opt_state, lr_at, opt_step, param_shapes, params_digest, seq_logprob,
)
from tinyarc.model.core import dropout
from tinyarc.model.optim import global_norm
from tinyarc.model.train import batch_loss
from tinyarc.serializer import EOS, encode_episode, training_sequence

from conftest import random_grid


def test_count_params_default_in_band():
    n = count_params(DEFAULT_CONFIG)
    d, f, L, V, ctx = 448, 1792, 8, 46, 2048
    per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d + 4 * d
    assert n == V * d + ctx * d + L * per_layer + 2 * d + d * V == 20_273_792
    assert 19_000_000 <= n <= 21_000_000


def test_count_params_degenerate_and_linear():
    c0 = DEFAULT_CONFIG.with_(n_layers=0)
    assert count_params(c0) == 46 * 448 + 2048 * 448 + 2 * 448 + 448 * 46
    c4, c8 = DEFAULT_CONFIG.with_(n_layers=4), DEFAULT_CONFIG
    assert count_params(c8) - count_params(c0) == 2 * (count_params(c4) - count_params(c0))


def test_init_deterministic_and_stats():
    a, b = init_model(TINY_CONFIG, 3), init_model(TINY_CONFIG, 3)
    assert params_digest(a) == params_digest(b)
    assert params_digest(init_model(TINY_CONFIG, 4)) != params_digest(a)
    assert torch.equal(a["layers.0.ln1.scale"], torch.ones(16))
    assert torch.equal(a["layers.1.attn.q.bias"], torch.zeros(16))
    big = init_model(MICRO_CONFIG, 0)
    assert abs(float(big["layers.0.attn.q.weight"].std()) - 0.02) < 1e-3
    assert abs(float(big["layers.0.attn.o.weight"].std()) - 0.02 / math.sqrt(4)) < 1e-3


def test_invalid_config():
    with pytest.raises(errors.InvalidConfig):
        init_model(DEFAULT_CONFIG.with_(n_heads=3), 0)
    with pytest.raises(errors.InvalidConfig):
        ModelConfig(dropout_rate=1.0).validate()
    assert DEFAULT_CONFIG.head_dim == 56


@pytest.fixture(scope="module")
def tiny():
    return init_model(TINY_CONFIG, 0)


def test_forward_shape_and_softmax(tiny):
    toks = list(range(46))[:40]
    out = forward(tiny, TINY_CONFIG, toks)
    assert out.shape == (40, 46)
    probs = torch.softmax(out.double(), -1).sum(-1)
    assert torch.allclose(probs, torch.ones(40, dtype=torch.float64), atol=1e-6)
    batch = forward(tiny, TINY_CONFIG, torch.tensor([toks, toks]))
    assert batch.shape == (2, 40, 46)


def test_attention_rows_stochastic(tiny):
    _, maps = forward(tiny, TINY_CONFIG, list(range(30)), return_attn=True)
    for m in maps:
        assert m.shape == (2, 30, 30)
        assert torch.allclose(m.sum(-1).double(), torch.ones(2, 30, dtype=torch.float64), atol=1e-6)
        assert float(m.triu(1).abs().max()) == 0.0


def test_forward_errors(tiny):
    with pytest.raises(errors.ContextExceeded):
        forward(tiny, TINY_CONFIG, [0] * 65)
    with pytest.raises(errors.UnknownToken):
        forward(tiny, TINY_CONFIG, [0, 46])


def test_causality_bit_exact(tiny):
    rng = np.random.default_rng(0)
    for _ in range(20):
        toks = rng.integers(0, 46, size=50)
        t = int(rng.integers(0, 49))
        other = toks.copy()
        other[t + 1:] = rng.integers(0, 46, size=49 - t)
        a = forward(tiny, TINY_CONFIG, toks)
        b = forward(tiny, TINY_CONFIG, other)
        assert torch.equal(a[:t + 1], b[:t + 1])


def test_dropout_deterministic():
    x = torch.ones(4, 8)
    assert torch.equal(dropout(x, 0.5, 1, 0, 0), dropout(x, 0.5, 1, 0, 0))
    assert not torch.equal(dropout(x, 0.5, 1, 0, 0), dropout(x, 0.5, 2, 0, 0))
    assert not torch.equal(dropout(x, 0.5, 1, 0, 0), dropout(x, 0.5, 1, 1, 0))
    kept = dropout(torch.ones(20000), 0.1, 5, 0, 0)
    vals = kept.unique().tolist()
    assert len(vals) == 2 and vals[0] == 0.0 and vals[1] == pytest.approx(1 / 0.9)
    assert abs(float((kept == 0).float().mean()) - 0.1) < 0.01


def test_train_mode_changes_logits_only_with_dropout(tiny):
    toks = list(range(20))
    a = forward(tiny, TINY_CONFIG, toks, train_mode=True, dropout_seed=1)
    b = forward(tiny, TINY_CONFIG, toks, train_mode=True, dropout_seed=1)
    c = forward(tiny, TINY_CONFIG, toks, train_mode=True, dropout_seed=2)
    assert torch.equal(a, b) and not torch.equal(a, c)
    off = TINY_CONFIG.with_(dropout_rate=0.0)
    assert torch.equal(forward(tiny, off, toks, train_mode=True), forward(tiny, off, toks))


def test_cross_entropy_cases():
    logits = torch.zeros(5, 46)
    tg = torch.arange(5)
    assert float(cross_entropy(logits, tg, torch.ones(5, dtype=torch.bool))) == pytest.approx(math.log(46), abs=1e-12)
    assert math.log(46) == pytest.approx(3.8286, abs=1e-4)
    losses = []
    for margin in (1.0, 5.0, 20.0, 60.0):
        lg = torch.zeros(5, 46)
        lg[torch.arange(5), tg] = margin
        losses.append(float(cross_entropy(lg, tg, torch.ones(5, dtype=torch.bool))))
    assert losses == sorted(losses, reverse=True) and losses[-1] < 1e-20
    with pytest.raises(errors.EmptyMask):
        cross_entropy(logits, tg, torch.zeros(5, dtype=torch.bool))
    # stable for huge logits
    lg = torch.full((1, 46), 1e4)
    assert float(cross_entropy(lg, torch.tensor([0]), torch.tensor([True]))) == pytest.approx(math.log(46))


def _seqs(rng, n, side=3, k=2):
    out = []
    for _ in range(n):
        gs = [random_grid(rng, side) for _ in range(2 * k + 2)]
        ep = encode_episode(list(zip(gs[:2 * k:2], gs[1:2 * k:2])), gs[2 * k])
        out.append(training_sequence(ep, gs[-1]))
    return out


def test_unused_positional_rows_get_zero_grad(tiny):
    batch = collate(_seqs(np.random.default_rng(1), 2))
    _, g = grads(tiny, TINY_CONFIG, batch)
    T = batch.inputs.shape[1]
    assert float(g["pos_emb"][T:].abs().max()) == 0.0
    assert float(g["pos_emb"][:T].abs().max()) > 0.0


def test_gradient_mean_consistency():
    p = init_model(TINY_CONFIG, 0, dtype=torch.float64)
    rng = np.random.default_rng(2)
    a, b = _seqs(rng, 2, side=2)
    na = int(collate([a]).mask.sum())
    nb = int(collate([b]).mask.sum())
    _, ga = grads(p, TINY_CONFIG, collate([a]))
    _, gb = grads(p, TINY_CONFIG, collate([b]))
    _, gaab = grads(p, TINY_CONFIG, collate([a, a, b]))
    for k in p:
        lhs = gaab[k] * (2 * na + nb)
        rhs = 2 * na * ga[k] + nb * gb[k]
        assert torch.allclose(lhs, rhs, atol=1e-10, rtol=1e-7), k


def test_opt_zero_grad_no_decay_is_noop(tiny):
    st = init_opt_state(tiny)
    zero = {k: torch.zeros_like(v) for k, v in tiny.items()}
    new, st2 = opt_step(tiny, zero, st, OptHyper(weight_decay=0.0, total_steps=10))
    assert all(torch.equal(new[k], tiny[k]) for k in tiny)
    assert st2.step == 1


def test_opt_clips_to_unit_norm(tiny):
    g = {k: torch.randn_like(v) for k, v in tiny.items()}
    n = global_norm(g)
    g = {k: v * (10.0 / n) for k, v in g.items()}
    st = init_opt_state(tiny)
    _, st2 = opt_step(tiny, g, st, OptHyper(total_steps=10))
    # first moment is (1 - beta1) * clipped gradient
    m_norm = global_norm(st2.m) / (1 - 0.9)
    assert m_norm == pytest.approx(1.0, rel=1e-5)


def test_opt_rejects_nan(tiny):
    g = {k: torch.zeros_like(v) for k, v in tiny.items()}
    g["head.weight"] = g["head.weight"].clone()
    g["head.weight"][0, 0] = float("nan")
    before = params_digest(tiny)
    with pytest.raises(errors.NonFiniteGradient):
        opt_step(tiny, g, init_opt_state(tiny), OptHyper())
    assert params_digest(tiny) == before


def test_opt_decay_skips_norms_biases_embeddings(tiny):
    zero = {k: torch.zeros_like(v) for k, v in tiny.items()}
    h = OptHyper(lr=0.1, weight_decay=0.5, warmup_steps=0, total_steps=100)
    new, _ = opt_step(tiny, zero, init_opt_state(tiny), h)
    assert torch.equal(new["tok_emb"], tiny["tok_emb"])
    assert torch.equal(new["layers.0.ln1.scale"], tiny["layers.0.ln1.scale"])
    assert torch.allclose(new["head.weight"], tiny["head.weight"] * (1 - lr_at(1, h) * 0.5))


def test_schedule():
    h = OptHyper(lr=1.0, warmup_steps=10, total_steps=110, min_lr_ratio=0.1)
    assert lr_at(5, h) == pytest.approx(0.5)
    assert lr_at(10, h) == pytest.approx(1.0)
    assert lr_at(60, h) == pytest.approx(0.55)
    assert lr_at(110, h) == pytest.approx(0.1)
    assert all(lr_at(s, h) >= lr_at(s + 1, h) for s in range(10, 110))


def test_generate_eos_first():
    p = init_model(TINY_CONFIG, 0)
    p["head.weight"] = torch.zeros_like(p["head.weight"])
    p["head.weight"][:, EOS] = 0.0
    p["ln_f.bias"] = torch.zeros_like(p["ln_f.bias"])
    # with a zero head every logit ties at 0; the EOS column gets a bias via ln_f
    p["ln_f.scale"] = torch.zeros_like(p["ln_f.scale"])
    p["ln_f.bias"][0] = 1.0
    p["head.weight"][0, EOS] = 5.0
    assert generate_greedy(p, TINY_CONFIG, [0, 6, 6, 36, 2], 10) == [EOS]


def test_generate_tie_breaks_to_lowest_id():
    p = init_model(TINY_CONFIG, 0)
    p["head.weight"] = torch.zeros_like(p["head.weight"])
    # all logits equal: argmax is id 0 (BOS), never EOS, so the budget runs out
    assert generate_greedy(p, TINY_CONFIG, [0, 1, 2], 3) == [0, 0, 0]


def test_generate_deterministic_and_budget(tiny):
    pre = [0, 6, 7, 36, 37, 2]
    a = generate_greedy(tiny, TINY_CONFIG, pre, 12)
    assert a == generate_greedy(tiny, TINY_CONFIG, pre, 12)
    assert len(generate_greedy(tiny, TINY_CONFIG, pre, 1)) == 1


def test_generate_context_exceeded():
    p = init_model(TINY_CONFIG, 0)
    p["head.weight"] = torch.zeros_like(p["head.weight"])
    with pytest.raises(errors.ContextExceeded):
        generate_greedy(p, TINY_CONFIG, [0] * 60, 100)
    with pytest.raises(errors.ContextExceeded):
        generate_greedy(p, TINY_CONFIG, [0] * 64, 1)


def test_cache_matches_full_recompute():
    p = init_model(MICRO_CONFIG.with_(max_ctx=256), 1)
    cfg = MICRO_CONFIG.with_(max_ctx=256)
    rng = np.random.default_rng(0)
    for _ in range(3):
        pre = rng.integers(0, 46, size=40).tolist()
        assert generate_greedy(p, cfg, pre, 30) == generate_greedy(p, cfg, pre, 30, use_cache=False)
        cache = []
        full = forward(p, cfg, pre + [7, 8, 9])
        forward(p, cfg, pre, cache=cache)
        inc = [forward(p, cfg, [t], cache=cache, start=len(pre) + i)[0] for i, t in enumerate([7, 8, 9])]
        assert float((torch.stack(inc) - full[-3:]).abs().max()) < 1e-5


def test_seq_logprob_properties(tiny):
    pre = [0, 6, 6, 36, 2]
    assert seq_logprob(tiny, TINY_CONFIG, pre, []) == 0.0
    cont = [6, 6, 40, EOS]
    total = seq_logprob(tiny, TINY_CONFIG, pre, cont)
    assert total <= 0.0
    # stepwise oracle: one forward per continuation token
    step = 0.0
    for i, tok in enumerate(cont):
        logits = forward(tiny, TINY_CONFIG, pre + cont[:i])[-1].double()
        step += float(torch.log_softmax(logits, -1)[tok])
    assert total == pytest.approx(step, abs=1e-5)
    with pytest.raises(errors.ContextExceeded):
        seq_logprob(tiny, TINY_CONFIG, [0] * 60, [1] * 5)


def test_tinylm_wrapper(tiny):
    m = TinyLM(tiny, TINY_CONFIG)
    pre = [0, 6, 6, 36, 2]
    assert m.generate_greedy(pre, 5) == generate_greedy(tiny, TINY_CONFIG, pre, 5)
    assert m.max_ctx == 64


def test_finite_difference_gradients():
    """Autograd against central differences on every tensor role of a tiny float64 model."""
    cfg = TINY_CONFIG
    p = init_model(cfg, 7, dtype=torch.float64)
    # non-trivial norms and biases so their gradients are exercised
    gen = torch.Generator().manual_seed(0)
    p = {k: (v + 0.1 * torch.randn(v.shape, generator=gen, dtype=torch.float64)) if v.dim() == 1 else v
         for k, v in p.items()}
    batch = collate(_seqs(np.random.default_rng(3), 2, side=2, k=1))
    _, g = grads(p, cfg, batch)

    def loss_at(name, idx, delta):
        q = dict(p)
        t = p[name].clone()
        t[idx] += delta
        q[name] = t
        return float(batch_loss(q, cfg, batch))

    rng = np.random.default_rng(0)
    used_tok = sorted(set(batch.inputs.flatten().tolist()))
    T = batch.inputs.shape[1]
    h = 1e-4
    checked, worst = 0, 0.0
    for name, v in p.items():
        for _ in range(8):
            if name == "tok_emb":
                idx = (int(rng.choice(used_tok)), int(rng.integers(v.shape[1])))
            elif name == "pos_emb":
                idx = (int(rng.integers(T)), int(rng.integers(v.shape[1])))
            else:
                idx = tuple(int(rng.integers(s)) for s in v.shape)
            num = (loss_at(name, idx, h) - loss_at(name, idx, -h)) / (2 * h)
            ana = float(g[name][idx])
            scale = max(abs(num), abs(ana))
            if scale < 1e-7:
                continue
            worst = max(worst, abs(num - ana) / scale)
            checked += 1
    assert checked >= 200
    assert worst < 1e-4, worst
