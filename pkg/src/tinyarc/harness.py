"""Strategy orchestration, metrics and reports.

The unit of every rate is the test item: a task with several test inputs
contributes one item per input.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional, Sequence

from .adapt import AdapterConfig, TTTConfig, attach_adapters, attach_full_finetune, build_ttt_set, ttt_run
from .ensemble import (
    DEFAULT_MAX_NEW,
    Failure,
    StrategyKind,
    best_view,
    generate_for_view,
    poe_candidates,
)
from .errors import NoStrategies, TinyArcError
from .grid import Grid
from .tasks import TaskRecord, TaskSet
from .views import IDENTITY_VIEW, View, enumerate_views

log = logging.getLogger(__name__)


class Status(enum.Enum):
    CORRECT = "Correct"
    INCORRECT_VALID = "IncorrectValid"
    FAILED = "FailedGeneration"
    UNSCORED = "ValidUnscored"  # decodable prediction, no ground truth

    @property
    def valid(self) -> bool:
        return self is not Status.FAILED


@dataclass
class SolveConfig:
    views: int = 64
    fix_background: bool = True
    ttt: TTTConfig = field(default_factory=TTTConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    ttt_views: int = 8
    leave_one_out: bool = True
    pipeline1: bool = False
    attempts: int = 1
    max_new: int = DEFAULT_MAX_NEW
    orders: tuple[str, ...] = ("row",)

    @property
    def max_pairs(self) -> Optional[int]:
        return 3 if self.pipeline1 else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "views": self.views, "fix_background": self.fix_background,
            "ttt_steps": self.ttt.steps, "ttt_lr": self.ttt.learning_rate,
            "ttt_full_finetune": self.ttt.full_finetune, "ttt_views": self.ttt_views,
            "adapter_rank": self.adapter.rank, "adapter_alpha": self.adapter.alpha,
            "adapter_dropout": self.adapter.adapter_dropout, "leave_one_out": self.leave_one_out,
            "pipeline1": self.pipeline1, "attempts": self.attempts, "max_new": self.max_new,
            "orders": list(self.orders),
        }


@dataclass
class ItemResult:
    index: int
    status: Status
    prediction: Optional[Grid] = None
    attempts: list[Grid] = field(default_factory=list)
    reason: Optional[str] = None
    ms: float = 0.0


@dataclass
class TaskResult:
    task_id: str
    strategy: StrategyKind
    items: list[ItemResult]
    wall_ms: float = 0.0
    failures: list[Failure] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def task_seed(seed: int, task_id: str) -> int:
    return (seed ^ zlib.crc32(task_id.encode("utf-8"))) & 0x7FFFFFFF


def _score(item_truth: Optional[Grid], preds: list[Grid], attempts: int) -> Status:
    if not preds:
        return Status.FAILED
    if item_truth is None:
        return Status.UNSCORED
    # Grid equality compares both dimensions and every cell
    return Status.CORRECT if any(p == item_truth for p in preds[:attempts]) else Status.INCORRECT_VALID


def _adapt(model, t: TaskRecord, cfg: SolveConfig, seed: int, res: TaskResult):
    from .model.lm import TinyLM

    if not isinstance(model, TinyLM):
        raise TypeError("test-time training needs a TinyLM")
    if cfg.ttt.full_finetune:
        m = attach_full_finetune(model.params, model.cfg)
    else:
        m = attach_adapters(model.params, model.cfg, cfg.adapter, seed)
    views = enumerate_views(t, cfg.ttt_views, seed, cfg.fix_background)
    episodes = build_ttt_set(t, views, cfg.leave_one_out, model.cfg.max_ctx, cfg.max_pairs)
    tcfg = TTTConfig(**{**cfg.ttt.__dict__, "seed": seed})
    adapted, trace = ttt_run(m, episodes, tcfg)
    res.warnings.append(f"ttt: {trace.n_updates} updates, demo loss {trace.initial_loss:.4f} -> "
                        f"{trace.best_loss:.4f}")
    return adapted


def run_strategy(model, t: TaskRecord, kind: StrategyKind, cfg: SolveConfig = SolveConfig(),
                 seed: int = 0) -> TaskResult:
    """Solve every test item of ``t``; generation failures are recorded, not raised."""
    kind = StrategyKind(kind)
    t0 = time.perf_counter()
    res = TaskResult(t.id, kind, [])
    active = model
    adapt_error = None
    if kind.uses_ttt:
        try:
            active = _adapt(model, t, cfg, seed, res)
        except TinyArcError as exc:
            adapt_error = f"ttt: {type(exc).__name__}: {exc}"

    views: list[View] = [IDENTITY_VIEW]
    if kind.uses_poe or cfg.pipeline1:
        views = enumerate_views(t, cfg.views, seed, cfg.fix_background)
    base_view = IDENTITY_VIEW
    if cfg.pipeline1 and adapt_error is None:
        base_view = best_view(active, t, views, max_pairs=cfg.max_pairs)
        res.warnings.append(f"pipeline1: best view {base_view}")

    for i, item in enumerate(t.test):
        ti = time.perf_counter()
        preds: list[Grid] = []
        reason = adapt_error
        if adapt_error is None:
            try:
                if kind.uses_poe:
                    ranked = poe_candidates(active, t, i, views, cfg.max_new, cfg.orders, cfg.max_pairs,
                                            res.failures, res.warnings)
                    preds = [c.grid for c in ranked[:max(1, cfg.attempts)]]
                else:
                    preds = [generate_for_view(active, t, i, base_view, cfg.max_new, max_pairs=cfg.max_pairs)]
            except TinyArcError as exc:
                reason = f"{type(exc).__name__}: {exc}"
                res.failures.append(Failure(str(base_view), "item", reason))
        status = _score(item.output, preds, cfg.attempts)
        res.items.append(ItemResult(i, status, preds[0] if preds else None, preds, reason,
                                    (time.perf_counter() - ti) * 1000.0))
    res.wall_ms = (time.perf_counter() - t0) * 1000.0
    return res


@dataclass
class StrategyRow:
    name: str
    n_tasks: int
    n_items: int
    n_scorable: int
    n_correct: int
    n_valid: int

    @property
    def accuracy(self) -> Fraction:
        return Fraction(self.n_correct, self.n_scorable) if self.n_scorable else Fraction(0)

    @property
    def valid_rate(self) -> Fraction:
        return Fraction(self.n_valid, self.n_items) if self.n_items else Fraction(0)

    @property
    def failed_rate(self) -> Fraction:
        return 1 - self.valid_rate if self.n_items else Fraction(0)


def aggregate(name: str, results: Sequence[TaskResult], truth_known: Sequence[Sequence[bool]]) -> StrategyRow:
    n_items = sum(len(r.items) for r in results)
    n_scorable = sum(sum(k) for k in truth_known)
    n_correct = sum(1 for r in results for it in r.items if it.status is Status.CORRECT)
    n_valid = sum(1 for r in results for it in r.items if it.status.valid)
    return StrategyRow(name, len(results), n_items, n_scorable, n_correct, n_valid)


@dataclass
class EvalReport:
    strategies: list[StrategyRow]
    tasks: list[TaskResult]
    meta: dict[str, Any] = field(default_factory=dict)

    def row(self, name: str) -> StrategyRow:
        return next(r for r in self.strategies if r.name == name)


def evaluate(model, ts: TaskSet | Sequence[TaskRecord], kinds: Sequence[StrategyKind],
             cfg: SolveConfig = SolveConfig(), parallelism: int = 1, seed: int = 0,
             meta: Optional[dict[str, Any]] = None) -> EvalReport:
    """Run each strategy on every task. Per-task seeds make serial and parallel runs identical."""
    kinds = [StrategyKind(k) for k in kinds]
    if not kinds:
        raise NoStrategies("no strategies requested")
    tasks = sorted(ts, key=lambda t: t.id)
    rows, all_results = [], []
    for kind in kinds:
        jobs = [(t, task_seed(seed, t.id)) for t in tasks]
        if parallelism > 1:
            with ThreadPoolExecutor(max_workers=parallelism) as pool:
                results = list(pool.map(lambda j: run_strategy(model, j[0], kind, cfg, j[1]), jobs))
        else:
            results = [run_strategy(model, t, kind, cfg, s) for t, s in jobs]
        known = [[it.output is not None for it in t.test] for t in tasks]
        rows.append(aggregate(kind.value, results, known))
        all_results.extend(results)
    info = {"unit": "test item", "attempts": cfg.attempts,
            "metric_note": "pass@2: an item is Correct if either of the top-2 candidates matches"
            if cfg.attempts >= 2 else "pass@1",
            "seed": seed, "solve_config": cfg.to_dict(), "n_tasks": len(tasks)}
    info.update(meta or {})
    return EvalReport(rows, all_results, info)


def _r5(x: Fraction) -> float:
    return round(float(x), 5)


def report_to_dict(r: EvalReport, timing: bool = True) -> dict[str, Any]:
    strategies = [{
        "name": s.name, "accuracy": _r5(s.accuracy), "valid_rate": _r5(s.valid_rate),
        "failed_rate": _r5(s.failed_rate), "n_tasks": s.n_tasks, "n_items": s.n_items,
        "n_scorable": s.n_scorable, "n_correct": s.n_correct, "n_valid": s.n_valid,
    } for s in r.strategies]
    tasks = []
    for t in r.tasks:
        items = []
        for it in t.items:
            row: dict[str, Any] = {"status": it.status.value}
            if timing:
                row["ms"] = round(it.ms, 3)
            row["prediction"] = None if it.prediction is None else it.prediction.to_list()
            if it.reason:
                row["reason"] = it.reason
            items.append(row)
        tasks.append({"id": t.task_id, "strategy": t.strategy.value, "items": items})
    return {"meta": r.meta, "strategies": strategies, "tasks": tasks}


def recompute_aggregates(doc: dict[str, Any]) -> dict[str, dict[str, Fraction]]:
    """Rebuild strategy rates from the per-task rows of an emitted report."""
    out: dict[str, dict[str, Fraction]] = {}
    for s in doc["strategies"]:
        rows = [t for t in doc["tasks"] if t["strategy"] == s["name"]]
        items = [it for t in rows for it in t["items"]]
        n = len(items)
        valid = sum(it["status"] != Status.FAILED.value for it in items)
        correct = sum(it["status"] == Status.CORRECT.value for it in items)
        scorable = s["n_scorable"]
        out[s["name"]] = {
            "accuracy": Fraction(correct, scorable) if scorable else Fraction(0),
            "valid_rate": Fraction(valid, n) if n else Fraction(0),
            "failed_rate": (1 - Fraction(valid, n)) if n else Fraction(0),
        }
    return out


def pct(x: Fraction) -> str:
    return f"{float(x) * 100:.1f}%"


def summary_table(r: EvalReport) -> str:
    head = f"{'strategy':<10} {'items':>6} {'accuracy':>9} {'valid':>8} {'failed':>8}"
    lines = [head, "-" * len(head)]
    for s in r.strategies:
        lines.append(f"{s.name:<10} {s.n_items:>6} {pct(s.accuracy):>9} {pct(s.valid_rate):>8} "
                     f"{pct(s.failed_rate):>8}")
    return "\n".join(lines)


def emit_report(r: EvalReport, path: str | Path, fmt: str = "json", figures: bool = False,
                timing: bool = True, echo: bool = True) -> list[Path]:
    """Write the report (json or csv), optionally a metrics figure, and print a summary table."""
    path = Path(path)
    written = []
    if fmt == "json":
        path.write_text(json.dumps(report_to_dict(r, timing), indent=2))
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["strategy", "accuracy", "valid_rate", "failed_rate", "n_tasks", "n_items"])
        for s in r.strategies:
            w.writerow([s.name, f"{float(s.accuracy):.5f}", f"{float(s.valid_rate):.5f}",
                        f"{float(s.failed_rate):.5f}", s.n_tasks, s.n_items])
        path.write_text(buf.getvalue())
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    written.append(path)
    if figures:
        from .plotting import plot_metrics

        written.append(plot_metrics(r, path.with_name(path.stem + "_metrics.png")))
    if echo:
        print(summary_table(r))
    return written
