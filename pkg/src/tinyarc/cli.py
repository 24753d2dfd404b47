"""Command-line entry point: ``tinyarc {train,solve,eval,inspect,augment,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__

log = logging.getLogger("tinyarc")


def _load_model(path):
    from .model import TinyLM, load_checkpoint

    ck = load_checkpoint(path)
    return TinyLM(ck.params, ck.config), ck


def _solve_config(args):
    from .adapt import TTTConfig
    from .harness import SolveConfig

    ttt = TTTConfig(steps=args.ttt_steps, learning_rate=args.ttt_lr, full_finetune=args.full_finetune)
    orders = ("row", "col") if getattr(args, "col_major_experts", False) else ("row",)
    return SolveConfig(views=args.views, ttt=ttt, pipeline1=args.pipeline1, attempts=args.attempts,
                       fix_background=not args.recolor_background, orders=orders)


def cmd_train(args) -> int:
    from .model import PRESETS, TrainConfig, pretrain, save_checkpoint
    from .tasks import load_tasks

    ts = load_tasks(args.tasks, args.solutions)
    cfg = PRESETS[args.preset]
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr, seed=args.seed,
                       views_per_task=args.views_per_task,
                       geo_ops=tuple(args.geo_ops.split(",")) if args.geo_ops else None,
                       mask_inputs=not args.full_loss, log_every=args.log_every)
    ck, trace = pretrain(ts, cfg, tcfg)
    out = Path(args.out_checkpoint)
    save_checkpoint(ck.params, ck.config, out, meta=ck.meta)
    log_path = out.with_suffix(".log.json")
    log_path.write_text(json.dumps(trace.to_dict()))
    print(f"wrote {out} ({len(ts)} tasks, {args.steps} steps, final loss {trace.losses[-1]:.4f})")
    if args.plot:
        from .plotting import plot_loss

        print(f"wrote {plot_loss(trace.steps, trace.losses, out.with_name(out.stem + '_loss.png'))}")
    return 0


def cmd_solve(args) -> int:
    from .ensemble import StrategyKind
    from .harness import run_strategy
    from .tasks import load_tasks

    model, _ = _load_model(args.checkpoint)
    ts = load_tasks(args.task)
    cfg = _solve_config(args)
    results = []
    for t in ts:
        res = run_strategy(model, t, StrategyKind(args.strategy), cfg, seed=args.seed)
        results.append(res)
        for it in res.items:
            print(f"{t.id}[{it.index}] {it.status.value}")
            if it.prediction is not None:
                print(it.prediction)
            elif it.reason:
                print(f"  {it.reason}")
        for w in res.warnings:
            print(f"  note: {w}")
        if args.plot:
            from .plotting import plot_task

            p = plot_task(t, Path(args.plot).with_name(f"{Path(args.plot).stem}_{t.id}.png"),
                          [it.prediction for it in res.items])
            print(f"wrote {p}")
    if args.out:
        Path(args.out).write_text(json.dumps({r.task_id: [
            None if it.prediction is None else it.prediction.to_list() for it in r.items] for r in results}))
    return 0


def cmd_eval(args) -> int:
    from .ensemble import StrategyKind
    from .harness import emit_report, evaluate
    from .model.checkpoint import file_digest
    from .tasks import load_tasks

    model, ck = _load_model(args.checkpoint)
    ts = load_tasks(args.tasks, args.solutions)
    kinds = [StrategyKind(s.strip()) for s in args.strategies.split(",") if s.strip()]
    meta = {"checkpoint": str(args.checkpoint), "checkpoint_sha256": file_digest(args.checkpoint),
            "model_config": ck.config.to_dict()}
    report = evaluate(model, ts, kinds, _solve_config(args), args.parallelism, args.seed, meta)
    for p in emit_report(report, args.out, args.format, figures=not args.no_figures):
        print(f"wrote {p}")
    return 0


def cmd_inspect(args) -> int:
    if args.checkpoint:
        from .model import count_params

        _, ck = _load_model(args.checkpoint)
        print(json.dumps({"config": ck.config.to_dict(), "n_params": count_params(ck.config),
                          "meta": ck.meta}, indent=2))
    if args.task:
        from .tasks import load_tasks

        for t in load_tasks(args.task):
            print(f"== {t.id}: {len(t.train)} train, {len(t.test)} test")
            for i, p in enumerate(t.train):
                print(f"-- train {i} input {p.input.height}x{p.input.width}\n{p.input}")
                print(f"-- train {i} output {p.output.height}x{p.output.width}\n{p.output}")
            for i, it in enumerate(t.test):
                print(f"-- test {i} input {it.input.height}x{it.input.width}\n{it.input}")
                if it.output is not None:
                    print(f"-- test {i} output\n{it.output}")
    return 0


def cmd_augment(args) -> int:
    from .tasks import load_tasks
    from .views import apply_view_to_task, enumerate_views

    out = {}
    for t in load_tasks(args.task):
        views = enumerate_views(t, args.budget, args.seed, not args.recolor_background)
        entry = [v.to_json() for v in views]
        if args.apply:
            entry = [{"view": v.to_json(), "task": apply_view_to_task(v, t).to_json()} for v in views]
        out[t.id] = entry
    json.dump(out, sys.stdout, indent=None if args.apply else 1)
    print()
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_family
    from .tasks import dump_tasks

    tasks = make_family(args.n, seed=args.seed, max_side=args.max_side, prefix=args.prefix)
    dump_tasks(tasks, args.out)
    print(f"wrote {len(tasks)} tasks to {args.out}")
    return 0


def _add_solve_flags(p):
    p.add_argument("--views", type=int, default=64, help="view budget for PoE / best-view search")
    p.add_argument("--ttt-steps", type=int, default=10)
    p.add_argument("--ttt-lr", type=float, default=5e-5)
    p.add_argument("--full-finetune", action="store_true", help="TTT on all weights instead of adapters")
    p.add_argument("--pipeline1", action="store_true", help="best-view selection, at most 3 context pairs")
    p.add_argument("--attempts", type=int, choices=(1, 2), default=1)
    p.add_argument("--recolor-background", action="store_true", help="let recolorings move color 0")
    p.add_argument("--col-major-experts", action="store_true", help="also score under column-major serialization")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tinyarc", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train TinyLM on a task corpus")
    p.add_argument("--tasks", required=True)
    p.add_argument("--solutions")
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views-per-task", type=int, default=64)
    p.add_argument("--preset", choices=("default", "micro", "tiny"), default="default")
    p.add_argument("--geo-ops", help="comma-separated geometric ops allowed in training views")
    p.add_argument("--full-loss", action="store_true", help="train on every token, not just outputs")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--plot", action="store_true", help="write a loss curve next to the checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="predict the test outputs of task file(s)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--strategy", choices=("baseline", "poe", "ttt", "ttt_poe"), default="baseline")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write predictions as JSON")
    p.add_argument("--plot", help="figure path stem for task/prediction images")
    _add_solve_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("eval", help="run strategies over a task set and write a report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--solutions")
    p.add_argument("--strategies", default="baseline,poe,ttt,ttt_poe")
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--no-figures", action="store_true")
    _add_solve_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print a checkpoint's config or a task's grids")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--task")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("augment", help="dump the enumerated views of task(s)")
    p.add_argument("--task", required=True)
    p.add_argument("--budget", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recolor-background", action="store_true")
    p.add_argument("--apply", action="store_true", help="include the transformed tasks")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("synth", help="generate the identity / flip / color-swap toy family")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-side", type=int, default=6)
    p.add_argument("--prefix", default="toy")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import TinyArcError

    try:
        return args.func(args)
    except TinyArcError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
