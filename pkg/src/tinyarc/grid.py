"""Validated, immutable ARC boards."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ColorOutOfRange, EmptyGrid, OversizeGrid, RaggedRows, ShapeMismatch

MAX_SIDE = 30
N_COLORS = 10


class Grid:
    """A 2-D board of color identifiers in [0, 9], at most 30x30.

    Backed by a read-only ``int8`` array; every transform returns a new Grid.
    """

    __slots__ = ("_a", "_hash")

    def __init__(self, array: np.ndarray):
        a = np.asarray(array)
        if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
            raise EmptyGrid(f"grid must be 2-D and nonempty, got shape {a.shape}")
        if a.shape[0] > MAX_SIDE or a.shape[1] > MAX_SIDE:
            raise OversizeGrid(f"grid {a.shape[0]}x{a.shape[1]} exceeds {MAX_SIDE}x{MAX_SIDE}")
        if a.min() < 0 or a.max() >= N_COLORS:
            raise ColorOutOfRange(f"colors must lie in [0, {N_COLORS - 1}]")
        a = np.array(a, dtype=np.int8, copy=True)
        a.flags.writeable = False
        self._a = a
        self._hash = None

    @property
    def array(self) -> np.ndarray:
        return self._a

    @property
    def height(self) -> int:
        return self._a.shape[0]

    @property
    def width(self) -> int:
        return self._a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self._a.shape

    @property
    def cells(self) -> tuple[int, ...]:
        """Row-major flat view of the colors."""
        return tuple(int(v) for v in self._a.ravel())

    def __getitem__(self, rc: tuple[int, int]) -> int:
        return int(self._a[rc])

    def to_list(self) -> list[list[int]]:
        return self._a.astype(int).tolist()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Grid):
            return NotImplemented
        return self._a.shape == other._a.shape and bool(np.array_equal(self._a, other._a))

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash((self._a.shape, self._a.tobytes()))
        return self._hash

    def __repr__(self) -> str:
        return f"Grid({self.height}x{self.width}, {self.to_list()})"

    def __str__(self) -> str:
        return "\n".join(" ".join(str(v) for v in row) for row in self.to_list())


def validate_grid(raw: Sequence[Sequence[int]]) -> Grid:
    """Check a nested-list board against the ARC format and wrap it.

    Raises EmptyGrid, RaggedRows, ColorOutOfRange or OversizeGrid.
    """
    if isinstance(raw, Grid):
        return raw
    rows = list(raw) if raw is not None else []
    if not rows:
        raise EmptyGrid("grid has no rows")
    width = None
    for i, row in enumerate(rows):
        if isinstance(row, (str, bytes)) or not hasattr(row, "__len__"):
            raise RaggedRows(f"row {i} is not a list")
        if len(row) == 0:
            raise EmptyGrid(f"row {i} is empty")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise RaggedRows(f"row {i} has length {len(row)}, expected {width}")
        for j, v in enumerate(row):
            # bool is an int subclass but never a color
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ColorOutOfRange(f"cell ({i},{j}) = {v!r} is not an integer color")
            if not 0 <= v < N_COLORS:
                raise ColorOutOfRange(f"cell ({i},{j}) = {v} outside [0, {N_COLORS - 1}]")
    if len(rows) > MAX_SIDE or width > MAX_SIDE:
        raise OversizeGrid(f"grid {len(rows)}x{width} exceeds {MAX_SIDE}x{MAX_SIDE}")
    return Grid(np.asarray(rows, dtype=np.int8))


def palette(g: Grid) -> tuple[int, ...]:
    """Distinct colors present in ``g``, ascending."""
    return tuple(int(c) for c in np.unique(g.array))


def palette_union(grids: Iterable[Grid]) -> tuple[int, ...]:
    seen: set[int] = set()
    for g in grids:
        seen.update(palette(g))
    return tuple(sorted(seen))


class BoolMask:
    """Row-major boolean mask with grid-shaped bounds."""

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray):
        b = np.array(bits, dtype=bool, copy=True)
        b.flags.writeable = False
        self.bits = b

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def popcount(self) -> int:
        return int(self.bits.sum())

    def to_list(self) -> list[list[bool]]:
        return self.bits.tolist()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BoolMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def __repr__(self) -> str:
        return f"BoolMask({self.to_list()})"


def diff_mask(a: Grid, b: Grid) -> BoolMask:
    """Cells where ``a`` and ``b`` disagree. Grids must share a shape."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot diff {a.height}x{a.width} against {b.height}x{b.width}")
    return BoolMask(a.array != b.array)


def same_shape(a: Grid, b: Grid) -> bool:
    return a.shape == b.shape
