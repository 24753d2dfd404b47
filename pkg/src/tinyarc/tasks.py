"""ARC-AGI JSON ingestion.

Accepts either one JSON file mapping task id to ``{"train", "test"}``, a single
task file, or a directory of per-task files named ``<task_id>.json``. An
optional Kaggle-style solutions file maps each task id to its list of test
output grids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Mapping, Optional

from .errors import GridError, GridValidationError, MissingSolution, ParseError, SchemaError
from .grid import Grid, validate_grid


@dataclass(frozen=True)
class Pair:
    input: Grid
    output: Grid


@dataclass(frozen=True)
class TestItem:
    input: Grid
    output: Optional[Grid] = None

    __test__ = False  # keep pytest from collecting this


@dataclass(frozen=True)
class TaskRecord:
    id: str
    train: tuple[Pair, ...]
    test: tuple[TestItem, ...]

    def __post_init__(self):
        if not self.train:
            raise SchemaError(f"task {self.id}: no training pairs")
        if not self.test:
            raise SchemaError(f"task {self.id}: no test items")

    def grids(self) -> Iterator[Grid]:
        for p in self.train:
            yield p.input
            yield p.output
        for t in self.test:
            yield t.input
            if t.output is not None:
                yield t.output

    @property
    def scorable(self) -> bool:
        return all(t.output is not None for t in self.test)

    def to_json(self) -> dict[str, Any]:
        test = []
        for t in self.test:
            item = {"input": t.input.to_list()}
            if t.output is not None:
                item["output"] = t.output.to_list()
            test.append(item)
        return {
            "train": [{"input": p.input.to_list(), "output": p.output.to_list()} for p in self.train],
            "test": test,
        }


@dataclass
class TaskSet:
    tasks: list[TaskRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self) -> Iterator[TaskRecord]:
        return iter(self.tasks)

    def __getitem__(self, i: int) -> TaskRecord:
        return self.tasks[i]

    def by_id(self, task_id: str) -> TaskRecord:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)

    def require_solutions(self) -> None:
        for t in self.tasks:
            for i, item in enumerate(t.test):
                if item.output is None:
                    raise MissingSolution(f"task {t.id}: test item {i} has no ground truth")


def _grid(task_id: str, location: str, raw: Any) -> Grid:
    try:
        return validate_grid(raw)
    except GridError as exc:
        raise GridValidationError(task_id, location, exc) from exc
    except TypeError as exc:
        raise GridValidationError(task_id, location, exc) from exc


def parse_task(task_id: str, obj: Any) -> TaskRecord:
    """Build a TaskRecord from one decoded task object."""
    if not isinstance(obj, Mapping) or "train" not in obj or "test" not in obj:
        raise SchemaError(f"task {task_id}: expected an object with 'train' and 'test'")
    train, test = obj["train"], obj["test"]
    if not isinstance(train, list) or not isinstance(test, list):
        raise SchemaError(f"task {task_id}: 'train' and 'test' must be lists")
    pairs = []
    for i, ex in enumerate(train):
        if not isinstance(ex, Mapping) or "input" not in ex or "output" not in ex:
            raise SchemaError(f"task {task_id}: train[{i}] needs 'input' and 'output'")
        pairs.append(Pair(_grid(task_id, f"train[{i}].input", ex["input"]),
                          _grid(task_id, f"train[{i}].output", ex["output"])))
    items = []
    for i, ex in enumerate(test):
        if not isinstance(ex, Mapping) or "input" not in ex:
            raise SchemaError(f"task {task_id}: test[{i}] needs 'input'")
        out = ex.get("output")
        items.append(TestItem(_grid(task_id, f"test[{i}].input", ex["input"]),
                              None if out is None else _grid(task_id, f"test[{i}].output", out)))
    return TaskRecord(task_id, tuple(pairs), tuple(items))


def _read_json(path: Path) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _is_single_task(obj: Any) -> bool:
    return isinstance(obj, Mapping) and isinstance(obj.get("train"), list) and "test" in obj


def load_tasks(tasks_path: str | Path, solutions_path: str | Path | None = None) -> TaskSet:
    """Load and validate tasks; join ground-truth outputs when a solutions file is given."""
    tasks_path = Path(tasks_path)
    records: list[TaskRecord] = []
    if tasks_path.is_dir():
        for f in sorted(tasks_path.glob("*.json")):
            records.append(parse_task(f.stem, _read_json(f)))
    else:
        obj = _read_json(tasks_path)
        if _is_single_task(obj):
            records.append(parse_task(tasks_path.stem, obj))
        elif isinstance(obj, Mapping):
            for task_id in sorted(obj):
                records.append(parse_task(str(task_id), obj[task_id]))
        else:
            raise SchemaError(f"{tasks_path}: top level must be a JSON object")

    if solutions_path is not None:
        sol = _read_json(Path(solutions_path))
        if not isinstance(sol, Mapping):
            raise SchemaError(f"{solutions_path}: top level must be a JSON object")
        records = [_join_solutions(r, sol.get(r.id)) for r in records]
    return TaskSet(records)


def _join_solutions(rec: TaskRecord, outputs: Any) -> TaskRecord:
    if outputs is None:
        return rec
    if not isinstance(outputs, list) or len(outputs) != len(rec.test):
        raise SchemaError(f"task {rec.id}: solutions must list one grid per test item")
    items = tuple(
        replace(item, output=_grid(rec.id, f"solutions[{i}]", out))
        for i, (item, out) in enumerate(zip(rec.test, outputs))
    )
    return replace(rec, test=items)


def dump_tasks(ts: TaskSet | list[TaskRecord], path: str | Path) -> None:
    """Write tasks as one id-keyed JSON file."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({t.id: t.to_json() for t in ts}, fh)
