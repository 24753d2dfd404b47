import csv
import json
from fractions import Fraction

import numpy as np
import pytest

from tinyarc import errors
from tinyarc.ensemble import StrategyKind
from tinyarc.harness import (
    SolveConfig, Status, emit_report, evaluate, pct, recompute_aggregates, report_to_dict, run_strategy,
    task_seed,
)
from tinyarc.serializer import encode_grid
from tinyarc.tasks import Pair, TaskRecord, TestItem, dump_tasks, load_tasks
from tinyarc.views import enumerate_views

from conftest import G, copy_task
from stubs import ConstantStub, GarbageStub, LookupStub

TASK = {"train": [{"input": [[1, 2]], "output": [[2, 1]]}], "test": [{"input": [[3, 4]], "output": [[4, 3]]}]}


def test_load_two_task_file(tmp_path):
    f = tmp_path / "tasks.json"
    f.write_text(json.dumps({"b": TASK, "a": TASK}))
    ts = load_tasks(f)
    assert len(ts) == 2 and [t.id for t in ts] == ["a", "b"]
    assert ts.by_id("a").test[0].output == G([[4, 3]])


def test_load_directory_and_single_file(tmp_path):
    (tmp_path / "x.json").write_text(json.dumps(TASK))
    (tmp_path / "y.json").write_text(json.dumps(TASK))
    assert [t.id for t in load_tasks(tmp_path)] == ["x", "y"]
    assert [t.id for t in load_tasks(tmp_path / "x.json")] == ["x"]


def test_missing_output_is_unscorable(tmp_path):
    obj = {"train": TASK["train"], "test": [{"input": [[3, 4]]}]}
    f = tmp_path / "t.json"
    f.write_text(json.dumps({"u": obj}))
    ts = load_tasks(f)
    assert ts[0].test[0].output is None
    with pytest.raises(errors.MissingSolution):
        ts.require_solutions()
    rep = evaluate(ConstantStub(G([[4, 3]])), ts, [StrategyKind.BASELINE])
    row = rep.strategies[0]
    assert row.n_scorable == 0 and row.accuracy == 0 and row.valid_rate == 1
    assert rep.tasks[0].items[0].status is Status.UNSCORED


def test_solutions_join(tmp_path):
    obj = {"train": TASK["train"], "test": [{"input": [[3, 4]]}]}
    (tmp_path / "t.json").write_text(json.dumps({"u": obj}))
    (tmp_path / "s.json").write_text(json.dumps({"u": [[[4, 3]]]}))
    ts = load_tasks(tmp_path / "t.json", tmp_path / "s.json")
    assert ts[0].test[0].output == G([[4, 3]])
    (tmp_path / "s.json").write_text(json.dumps({"u": [[[4, 3]], [[1]]]}))
    with pytest.raises(errors.SchemaError):
        load_tasks(tmp_path / "t.json", tmp_path / "s.json")


def test_load_errors(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text("{not json")
    with pytest.raises(errors.ParseError):
        load_tasks(f)
    f.write_text(json.dumps({"z": {"train": [], "test": TASK["test"]}}))
    with pytest.raises(errors.SchemaError):
        load_tasks(f)
    bad = json.loads(json.dumps(TASK))
    bad["train"][0]["output"] = [[2, 11]]
    f.write_text(json.dumps({"eleven": bad}))
    with pytest.raises(errors.GridValidationError) as ei:
        load_tasks(f)
    assert ei.value.task_id == "eleven" and "train[0]" in ei.value.location
    assert isinstance(ei.value.cause, errors.ColorOutOfRange)


def test_dump_round_trip(tmp_path):
    t = copy_task()
    dump_tasks([t], tmp_path / "d.json")
    assert load_tasks(tmp_path / "d.json")[0] == t


def test_baseline_correct_and_failed():
    t = copy_task()
    ok = run_strategy(LookupStub.from_task(t, enumerate_views(t, 1)), t, StrategyKind.BASELINE)
    assert ok.items[0].status is Status.CORRECT
    assert ok.items[0].prediction == t.test[0].output
    bad = run_strategy(GarbageStub(), t, StrategyKind.BASELINE)
    assert bad.items[0].status is Status.FAILED and bad.items[0].reason
    wrong = run_strategy(ConstantStub(G([[0]])), t, StrategyKind.BASELINE)
    assert wrong.items[0].status is Status.INCORRECT_VALID


def test_poe_with_fallback_still_predicts():
    t = copy_task()
    res = run_strategy(ConstantStub(G([[5]])), t, StrategyKind.POE, SolveConfig(views=8))
    assert res.items[0].prediction == G([[5]])
    assert any("falling back" in w for w in res.warnings)


def test_poe_correct_with_oracle():
    t = copy_task()
    views = enumerate_views(t, 8, seed=task_seed(0, t.id))
    res = run_strategy(LookupStub.from_task(t, views), t, StrategyKind.POE, SolveConfig(views=8),
                       seed=task_seed(0, t.id))
    assert res.items[0].status is Status.CORRECT


def test_ttt_needs_real_model_fails_cleanly():
    t = copy_task()
    with pytest.raises(TypeError):
        run_strategy(ConstantStub(G([[0]])), t, StrategyKind.TTT)


def test_attempts_two():
    t = copy_task()
    res = run_strategy(ConstantStub(G([[5]])), t, StrategyKind.POE, SolveConfig(views=4, attempts=2))
    assert len(res.items[0].attempts) == 1
    assert res.items[0].status is Status.INCORRECT_VALID


def _forced_set(n=120, n_correct=26):
    tasks, table = [], {}
    for i in range(n):
        g = G([[i // 100 + 1, (i // 10) % 10, i % 10]])
        tasks.append(TaskRecord(f"item{i:03d}", (Pair(g, g),), (TestItem(g, g),)))
        if i < n_correct:
            table[tuple(encode_grid(g))] = encode_grid(g)
    return tasks, LookupStub(table, default=encode_grid(G([[0]])))


def test_forced_accuracy_21_7():
    tasks, stub = _forced_set()
    rep = evaluate(stub, tasks, [StrategyKind.BASELINE])
    row = rep.strategies[0]
    assert row.n_items == 120 and row.n_correct == 26
    assert row.accuracy == Fraction(26, 120)
    assert pct(row.accuracy) == "21.7%"
    assert row.valid_rate + row.failed_rate == 1
    assert row.accuracy <= row.valid_rate
    doc = report_to_dict(rep)
    assert doc["strategies"][0]["accuracy"] == 0.21667


def test_all_failed():
    tasks, _ = _forced_set(10)
    row = evaluate(GarbageStub(), tasks, [StrategyKind.BASELINE]).strategies[0]
    assert row.accuracy == 0 and row.failed_rate == 1 and row.valid_rate == 0


def test_no_strategies():
    with pytest.raises(errors.NoStrategies):
        evaluate(GarbageStub(), [], [])


def test_empty_task_list(tmp_path):
    rep = evaluate(GarbageStub(), [], [StrategyKind.BASELINE])
    emit_report(rep, tmp_path / "e.json", echo=False)
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["tasks"] == [] and doc["strategies"][0]["n_items"] == 0


def test_parallel_equals_serial():
    tasks, stub = _forced_set(40, 9)
    kinds = [StrategyKind.BASELINE, StrategyKind.POE]
    cfg = SolveConfig(views=4)
    a = report_to_dict(evaluate(stub, tasks, kinds, cfg, parallelism=1, seed=3), timing=False)
    b = report_to_dict(evaluate(stub, tasks[::-1], kinds, cfg, parallelism=4, seed=3), timing=False)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_correct_means_cell_equal():
    tasks, stub = _forced_set(30, 7)
    rep = evaluate(stub, tasks, [StrategyKind.BASELINE])
    truth = {t.id: t.test[0].output for t in tasks}
    for r in rep.tasks:
        it = r.items[0]
        same = (it.prediction is not None and it.prediction.shape == truth[r.task_id].shape
                and np.array_equal(it.prediction.cells, truth[r.task_id].cells))
        assert (it.status is Status.CORRECT) == same


def test_emit_json_csv_figure(tmp_path, capsys):
    tasks, stub = _forced_set()
    rep = evaluate(stub, tasks, [StrategyKind.BASELINE])
    written = emit_report(rep, tmp_path / "r.json", figures=True)
    assert written[1].name == "r_metrics.png" and written[1].stat().st_size > 0
    assert "21.7%" in capsys.readouterr().out
    doc = json.loads((tmp_path / "r.json").read_text())
    assert set(doc) == {"meta", "strategies", "tasks"}
    s = doc["strategies"][0]
    assert {"name", "accuracy", "valid_rate", "failed_rate", "n_tasks", "n_items"} <= set(s)
    assert {"status", "ms"} <= set(doc["tasks"][0]["items"][0])
    assert doc["meta"]["unit"] == "test item"
    emit_report(rep, tmp_path / "r.csv", fmt="csv", echo=False)
    rows = list(csv.reader((tmp_path / "r.csv").open()))
    assert rows[0][:2] == ["strategy", "accuracy"] and rows[1][1] == "0.21667"
    with pytest.raises(ValueError):
        emit_report(rep, tmp_path / "r.xml", fmt="xml", echo=False)


def test_recomputation_oracle(tmp_path):
    tasks, stub = _forced_set(50, 13)
    tasks[5] = TaskRecord("item005", tasks[5].train, (TestItem(tasks[5].test[0].input),))
    rep = evaluate(stub, tasks, [StrategyKind.BASELINE, StrategyKind.POE], SolveConfig(views=2))
    emit_report(rep, tmp_path / "r.json", echo=False)
    doc = json.loads((tmp_path / "r.json").read_text())
    again = recompute_aggregates(doc)
    for s in rep.strategies:
        assert again[s.name] == {"accuracy": s.accuracy, "valid_rate": s.valid_rate, "failed_rate": s.failed_rate}
