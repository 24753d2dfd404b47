"""Multi-view candidate generation and product-of-experts selection.

Any object with ``generate_greedy(prefix, max_new)``, ``seq_logprob(prefix,
continuation)`` and ``max_ctx`` can act as the model, which lets tests drive
this module with hand-built stubs.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Hashable, Optional, Protocol, Sequence

from .errors import AllViewsSkipped, ContextExceeded, DecodeError, NoCandidates, TinyArcError
from .grid import Grid
from .serializer import (
    DEFAULT_MAX_CTX,
    EOS,
    MAX_GRID_TOKENS,
    Episode,
    encode_episode,
    encode_grid,
    decode_generation,
    fit_context,
)
from .tasks import TaskRecord
from .views import View, apply_view, apply_view_to_task, invert_view

log = logging.getLogger(__name__)

DEFAULT_MAX_NEW = MAX_GRID_TOKENS + 1


class LanguageModel(Protocol):
    max_ctx: int

    def generate_greedy(self, prefix: Sequence[int], max_new: int) -> list[int]: ...

    def seq_logprob(self, prefix: Sequence[int], continuation: Sequence[int]) -> float: ...


class StrategyKind(enum.Enum):
    BASELINE = "baseline"
    POE = "poe"
    TTT = "ttt"
    TTT_POE = "ttt_poe"

    @property
    def uses_ttt(self) -> bool:
        return self in (StrategyKind.TTT, StrategyKind.TTT_POE)

    @property
    def uses_poe(self) -> bool:
        return self in (StrategyKind.POE, StrategyKind.TTT_POE)


@dataclass(frozen=True)
class Failure:
    view: str
    stage: str  # "context", "generate", "decode", "score", "filter"
    error: str


def expert_key(v: View, order: str) -> Hashable:
    return v if order == "row" else (v, order)


@dataclass
class Candidate:
    grid: Grid
    source_views: list[View] = field(default_factory=list)
    per_view_scores: dict = field(default_factory=dict)
    demo_consistent: bool = False

    @property
    def total_score(self) -> float:
        return float(sum(self.per_view_scores.values()))

    @property
    def tie_key(self) -> tuple[int, ...]:
        return tuple(encode_grid(self.grid))


def _ctx(model) -> int:
    return getattr(model, "max_ctx", DEFAULT_MAX_CTX)


def view_episode(model, t: TaskRecord, test_index: int, v: View, order: str = "row",
                 max_pairs: Optional[int] = None, target_len: Optional[int] = None) -> Episode:
    """Episode of ``v(t)`` trimmed so ``target_len`` answer tokens still fit."""
    vt = apply_view_to_task(v, t)
    ep = encode_episode([(p.input, p.output) for p in vt.train], vt.test[test_index].input, order)
    return fit_context(ep, _ctx(model), target_len=target_len, max_pairs=max_pairs)


def generate_for_view(model, t: TaskRecord, test_index: int, v: View, max_new: int = DEFAULT_MAX_NEW,
                      order: str = "row", max_pairs: Optional[int] = None) -> Grid:
    """Greedy answer under ``v``, mapped back to the task's own orientation and colors."""
    ep = view_episode(model, t, test_index, v, order, max_pairs, target_len=min(max_new, DEFAULT_MAX_NEW))
    raw = model.generate_greedy(ep.prefix, max_new)
    return apply_view(invert_view(v), decode_generation(raw, order))


def propose(model, t: TaskRecord, test_index: int, views: Sequence[View], max_new: int = DEFAULT_MAX_NEW,
            order: str = "row", max_pairs: Optional[int] = None,
            failures: Optional[list[Failure]] = None) -> list[Candidate]:
    """One greedy generation per view; identical canonical grids are merged."""
    if not views:
        raise ValueError("propose needs at least one view")
    failures = failures if failures is not None else []
    by_grid: dict[Grid, Candidate] = {}
    for v in views:
        try:
            g = generate_for_view(model, t, test_index, v, max_new, order, max_pairs)
        except DecodeError as exc:
            failures.append(Failure(str(v), "decode", f"{type(exc).__name__}: {exc}"))
            continue
        except ContextExceeded as exc:
            failures.append(Failure(str(v), "generate", f"{type(exc).__name__}: {exc}"))
            continue
        except TinyArcError as exc:
            failures.append(Failure(str(v), "context", f"{type(exc).__name__}: {exc}"))
            continue
        if g in by_grid:
            by_grid[g].source_views.append(v)
        else:
            by_grid[g] = Candidate(g, [v])
    if not by_grid:
        raise NoCandidates(f"task {t.id} item {test_index}: every view failed")
    return list(by_grid.values())


def poe_score(model, t: TaskRecord, test_index: int, views: Sequence[View], c: Candidate,
              orders: Sequence[str] = ("row",), max_pairs: Optional[int] = None,
              failures: Optional[list[Failure]] = None) -> Candidate:
    """Sum the candidate's log-probability under every view (and serialization order)."""
    failures = failures if failures is not None else []
    scores = {}
    for order in orders:
        for v in views:
            try:
                cont = encode_grid(apply_view(v, c.grid), order) + [EOS]
                ep = view_episode(model, t, test_index, v, order, max_pairs, target_len=len(cont))
                if len(ep.prefix) + len(cont) > _ctx(model):
                    raise ContextExceeded("scoring sequence exceeds the context window")
                scores[expert_key(v, order)] = float(model.seq_logprob(ep.prefix, cont))
            except TinyArcError as exc:
                failures.append(Failure(str(v), "score", f"{type(exc).__name__}: {exc}"))
    if not scores:
        raise AllViewsSkipped(f"task {t.id}: no view could score the candidate")
    return replace(c, per_view_scores=scores, source_views=list(c.source_views))


def demo_episode(model, t: TaskRecord, v: View, k: int, order: str = "row",
                 max_pairs: Optional[int] = None, target_len: Optional[int] = None):
    """Leave-one-out episode with training pair ``k`` as the pseudo-test (under ``v``)."""
    pairs = list(apply_view_to_task(v, t).train)
    context = pairs[:k] + pairs[k + 1:] if len(pairs) >= 2 else pairs
    ep = encode_episode([(p.input, p.output) for p in context], pairs[k].input, order)
    want = pairs[k].output
    if target_len is None:
        target_len = len(encode_grid(want, order)) + 1
    return fit_context(ep, _ctx(model), target_len=target_len, max_pairs=max_pairs), want


@dataclass
class FilterResult:
    views: list[View]
    fallback: bool
    warnings: list[str] = field(default_factory=list)


def demo_filter(model, t: TaskRecord, views: Sequence[View], max_new: int = DEFAULT_MAX_NEW,
                order: str = "row", max_pairs: Optional[int] = None,
                failures: Optional[list[Failure]] = None) -> FilterResult:
    """Keep views under which greedy generation reproduces every demonstration output.

    When no view survives, all views are returned and a warning is recorded.
    """
    if not t.train:
        raise ValueError(f"task {t.id} has no demonstrations")
    failures = failures if failures is not None else []
    survivors = []
    for v in views:
        ok = True
        for k in range(len(t.train)):
            try:
                ep, want = demo_episode(model, t, v, k, order, max_pairs, min(max_new, DEFAULT_MAX_NEW))
                got = decode_generation(model.generate_greedy(ep.prefix, max_new), order)
            except TinyArcError as exc:
                failures.append(Failure(str(v), "filter", f"pair {k}: {type(exc).__name__}: {exc}"))
                ok = False
                break
            if got != want:
                ok = False
                break
        if ok:
            survivors.append(v)
    if survivors:
        return FilterResult(survivors, False)
    msg = f"task {t.id}: no view reproduces the demonstrations; falling back to all {len(views)} views"
    log.warning(msg)
    return FilterResult(list(views), True, [msg])


def ranked(candidates: Sequence[Candidate]) -> list[Candidate]:
    """Best first: demo-consistent candidates (if any), then score, then token order."""
    if not candidates:
        raise NoCandidates("nothing to select from")
    pool = [c for c in candidates if c.demo_consistent] or list(candidates)
    rest = [c for c in candidates if c not in pool]
    order = lambda c: (-c.total_score, c.tie_key)
    return sorted(pool, key=order) + sorted(rest, key=order)


def select(candidates: Sequence[Candidate]) -> Grid:
    return ranked(candidates)[0].grid


def best_view(model, t: TaskRecord, views: Sequence[View], order: str = "row",
              max_pairs: Optional[int] = None) -> View:
    """View under which the demonstrations are most likely (earliest wins ties)."""
    if not views:
        raise ValueError("best_view needs at least one view")
    best, best_score = views[0], None
    for v in views:
        total = 0.0
        try:
            for k in range(len(t.train)):
                ep, want = demo_episode(model, t, v, k, order, max_pairs)
                cont = encode_grid(want, order) + [EOS]
                if len(ep.prefix) + len(cont) > _ctx(model):
                    raise ContextExceeded("demonstration does not fit")
                total += float(model.seq_logprob(ep.prefix, cont))
        except TinyArcError:
            continue
        if best_score is None or total > best_score:
            best, best_score = v, total
    return best


def poe_candidates(model, t: TaskRecord, test_index: int, views: Sequence[View],
                   max_new: int = DEFAULT_MAX_NEW, orders: Sequence[str] = ("row",),
                   max_pairs: Optional[int] = None, failures: Optional[list[Failure]] = None,
                   warnings: Optional[list[str]] = None) -> list[Candidate]:
    """Filter experts, propose under the surviving views, score and rank."""
    failures = failures if failures is not None else []
    fr = demo_filter(model, t, views, max_new, "row", max_pairs, failures)
    if warnings is not None:
        warnings.extend(fr.warnings)
    cands = propose(model, t, test_index, fr.views, max_new, "row", max_pairs, failures)
    scored = []
    for c in cands:
        try:
            sc = poe_score(model, t, test_index, fr.views, c, orders, max_pairs, failures)
        except AllViewsSkipped as exc:
            failures.append(Failure("*", "score", str(exc)))
            continue
        sc.demo_consistent = not fr.fallback
        scored.append(sc)
    if not scored:
        raise NoCandidates(f"task {t.id} item {test_index}: no candidate could be scored")
    return ranked(scored)
