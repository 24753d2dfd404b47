"""Generated toy task families for desk-scale learning experiments."""

from __future__ import annotations

import numpy as np

from .grid import Grid
from .tasks import Pair, TaskRecord, TestItem

RULES = ("identity", "flip_h", "color_swap")


def _random_board(rng: np.random.Generator, colors: np.ndarray, max_side: int) -> np.ndarray:
    h, w = rng.integers(2, max_side + 1, size=2)
    return rng.choice(colors, size=(h, w))


def _apply_rule(rule: str, a: np.ndarray, swap: tuple[int, int]) -> np.ndarray:
    if rule == "identity":
        return a.copy()
    if rule == "flip_h":
        return a[:, ::-1].copy()
    x, y = swap
    out = a.copy()
    out[a == x] = y
    out[a == y] = x
    return out


def make_task(task_id: str, rule: str, rng: np.random.Generator, n_train: int = 3,
              max_side: int = 6) -> TaskRecord:
    """One task whose pairs all follow ``rule``.

    Boards are resampled until the demonstrations rule out the other rules:
    a flip task has an asymmetric demo, a swap task shows both swapped colors
    and its test input contains at least one of them.
    """
    n_colors = int(rng.integers(3, 6))
    colors = rng.choice(10, size=n_colors, replace=False)
    swap = tuple(int(c) for c in rng.choice(colors, size=2, replace=False))
    while True:
        boards = [_random_board(rng, colors, max_side) for _ in range(n_train + 1)]
        demos = boards[:n_train]
        if rule == "flip_h" and all(np.array_equal(b, b[:, ::-1]) for b in demos):
            continue
        if rule == "color_swap":
            seen = set(np.unique(np.concatenate([b.ravel() for b in demos])).tolist())
            if not set(swap) <= seen or not np.isin(boards[-1], swap).any():
                continue
        break
    pairs = tuple(Pair(Grid(b), Grid(_apply_rule(rule, b, swap))) for b in demos)
    test = boards[-1]
    return TaskRecord(task_id, pairs, (TestItem(Grid(test), Grid(_apply_rule(rule, test, swap))),))


def make_family(n_tasks: int, seed: int = 0, rules=RULES, n_train: int = 3, max_side: int = 6,
                prefix: str = "toy") -> list[TaskRecord]:
    """``n_tasks`` tasks cycling through ``rules``."""
    rng = np.random.default_rng(seed)
    return [make_task(f"{prefix}{i:04d}-{rules[i % len(rules)]}", rules[i % len(rules)], rng,
                      n_train, max_side) for i in range(n_tasks)]
