"""Reversible task views: the eight symmetries of the square times a color bijection."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np

from .grid import N_COLORS, Grid, palette_union
from .tasks import Pair, TaskRecord, TestItem


class GeometricOp(enum.Enum):
    IDENTITY = "identity"
    ROT90 = "rot90"  # clockwise: (r, c) -> (c, H-1-r)
    ROT180 = "rot180"
    ROT270 = "rot270"
    FLIP_H = "flip_h"  # mirror left-right
    FLIP_V = "flip_v"  # mirror top-bottom
    TRANSPOSE = "transpose"
    ANTI_TRANSPOSE = "anti_transpose"

    @property
    def swaps_dims(self) -> bool:
        return self in _SWAPPING

    def apply(self, a: np.ndarray) -> np.ndarray:
        return _APPLY[self](a)

    def inverse(self) -> "GeometricOp":
        return _INVERSE[self]

    def then(self, other: "GeometricOp") -> "GeometricOp":
        """The op equal to applying ``self`` first, then ``other``."""
        return _COMPOSE[(other, self)]


GEO_OPS: tuple[GeometricOp, ...] = tuple(GeometricOp)

_SWAPPING = frozenset({GeometricOp.ROT90, GeometricOp.ROT270,
                       GeometricOp.TRANSPOSE, GeometricOp.ANTI_TRANSPOSE})

_APPLY = {
    GeometricOp.IDENTITY: lambda a: a,
    GeometricOp.ROT90: lambda a: np.rot90(a, k=-1),
    GeometricOp.ROT180: lambda a: np.rot90(a, k=2),
    GeometricOp.ROT270: lambda a: np.rot90(a, k=1),
    GeometricOp.FLIP_H: lambda a: a[:, ::-1],
    GeometricOp.FLIP_V: lambda a: a[::-1, :],
    GeometricOp.TRANSPOSE: lambda a: a.T,
    GeometricOp.ANTI_TRANSPOSE: lambda a: np.rot90(a, k=2).T,
}


def _build_tables():
    # A 2x3 board of distinct values has eight distinct images, so each op is
    # identified by its image of it.
    ref = np.arange(6).reshape(2, 3)
    images = {op: _APPLY[op](ref) for op in GEO_OPS}

    def identify(img):
        for op, im in images.items():
            if im.shape == img.shape and np.array_equal(im, img):
                return op
        raise AssertionError("dihedral group not closed")

    compose = {(a, b): identify(_APPLY[a](_APPLY[b](ref))) for a in GEO_OPS for b in GEO_OPS}
    inverse = {a: next(b for b in GEO_OPS if compose[(b, a)] is GeometricOp.IDENTITY) for a in GEO_OPS}
    return compose, inverse


# _COMPOSE[(a, b)] == "a after b"
_COMPOSE, _INVERSE = _build_tables()


def compose_geo(a: GeometricOp, b: GeometricOp) -> GeometricOp:
    """Op equal to applying ``b`` then ``a``."""
    return _COMPOSE[(a, b)]


IDENTITY_PERM: tuple[int, ...] = tuple(range(N_COLORS))


@dataclass(frozen=True)
class ColorMap:
    """Bijection on the ten colors; ``mapping[c]`` is the image of color c."""

    mapping: tuple[int, ...] = IDENTITY_PERM

    def __post_init__(self):
        m = tuple(int(v) for v in self.mapping)
        if len(m) != N_COLORS or sorted(m) != list(range(N_COLORS)):
            raise ValueError(f"color map must be a permutation of 0..9, got {m}")
        object.__setattr__(self, "mapping", m)

    @classmethod
    def from_pairs(cls, pairs: dict[int, int]) -> "ColorMap":
        m = list(IDENTITY_PERM)
        for k, v in pairs.items():
            m[k] = v
        return cls(tuple(m))

    @classmethod
    def swap(cls, a: int, b: int) -> "ColorMap":
        return cls.from_pairs({a: b, b: a})

    @property
    def is_identity(self) -> bool:
        return self.mapping == IDENTITY_PERM

    def inverse(self) -> "ColorMap":
        inv = [0] * N_COLORS
        for c, d in enumerate(self.mapping):
            inv[d] = c
        return ColorMap(tuple(inv))

    def then(self, other: "ColorMap") -> "ColorMap":
        return ColorMap(tuple(other.mapping[self.mapping[c]] for c in range(N_COLORS)))

    def apply(self, a: np.ndarray) -> np.ndarray:
        lut = np.asarray(self.mapping, dtype=np.int8)
        return lut[a]


@dataclass(frozen=True)
class View:
    geo: GeometricOp = GeometricOp.IDENTITY
    colors: ColorMap = ColorMap()

    @property
    def is_identity(self) -> bool:
        return self.geo is GeometricOp.IDENTITY and self.colors.is_identity

    def key(self) -> tuple[str, tuple[int, ...]]:
        return (self.geo.value, self.colors.mapping)

    def to_json(self) -> dict:
        return {"geo": self.geo.value, "colors": list(self.colors.mapping)}

    @classmethod
    def from_json(cls, obj: dict) -> "View":
        return cls(GeometricOp(obj["geo"]), ColorMap(tuple(obj["colors"])))

    def __str__(self) -> str:
        if self.colors.is_identity:
            return self.geo.value
        return f"{self.geo.value}+{''.join(map(str, self.colors.mapping))}"


IDENTITY_VIEW = View()


def apply_view(v: View, g: Grid) -> Grid:
    """Geometric op first, then recolor."""
    return Grid(v.colors.apply(v.geo.apply(g.array)))


def invert_view(v: View) -> View:
    # (colors . geo)^-1 = geo^-1 . colors^-1, and recoloring commutes with geometry
    return View(v.geo.inverse(), v.colors.inverse())


def compose(a: View, b: View) -> View:
    """View equal to applying ``b`` first, then ``a``."""
    return View(compose_geo(a.geo, b.geo), b.colors.then(a.colors))


def apply_view_to_task(v: View, t: TaskRecord) -> TaskRecord:
    if v.is_identity:
        return t
    train = tuple(Pair(apply_view(v, p.input), apply_view(v, p.output)) for p in t.train)
    test = tuple(
        TestItem(apply_view(v, it.input), None if it.output is None else apply_view(v, it.output))
        for it in t.test
    )
    return TaskRecord(t.id, train, test)


def permutable_colors(t: TaskRecord, fix_background: bool = True) -> tuple[int, ...]:
    pal = palette_union(t.grids())
    return tuple(c for c in pal if not (fix_background and c == 0))


def _perm_to_map(colors: Sequence[int], image: Sequence[int]) -> ColorMap:
    return ColorMap.from_pairs(dict(zip(colors, image)))


def enumerate_views(t: TaskRecord, budget: int = 64, seed: int = 0,
                    fix_background: bool = True) -> list[View]:
    """Deterministic, distinct views of ``t``; the identity view comes first.

    Geometric ops cycle through all eight tags. The first cycle uses the
    identity recoloring; later cycles draw fresh permutations of the task's
    palette (excluding 0 when ``fix_background``).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    colors = permutable_colors(t, fix_background)
    n_perms = math.factorial(len(colors))
    total = len(GEO_OPS) * n_perms
    rng = np.random.default_rng(seed)

    used: dict[GeometricOp, set[tuple[int, ...]]] = {op: set() for op in GEO_OPS}
    # small palettes: enumerate every permutation in a seeded order
    pools: dict[GeometricOp, list[tuple[int, ...]]] = {}
    if n_perms <= 5040:
        all_perms = [p for p in permutations(colors) if p != tuple(colors)]
        for op in GEO_OPS:
            order = rng.permutation(len(all_perms)) if all_perms else []
            pools[op] = [all_perms[i] for i in order]

    views: list[View] = []
    limit = min(budget, total)
    i = 0
    while len(views) < limit:
        op = GEO_OPS[i % len(GEO_OPS)]
        if i < len(GEO_OPS):
            image = tuple(colors)
        elif op in pools:
            if not pools[op]:
                i += 1
                continue
            image = pools[op].pop(0)
        else:
            while True:
                image = tuple(int(c) for c in rng.permutation(colors))
                if image != tuple(colors) and image not in used[op]:
                    break
        used[op].add(image)
        views.append(View(op, _perm_to_map(colors, image)))
        i += 1
    return views


def random_color_map(rng: np.random.Generator, colors: Sequence[int]) -> ColorMap:
    image = rng.permutation(list(colors))
    return _perm_to_map(colors, [int(c) for c in image])
