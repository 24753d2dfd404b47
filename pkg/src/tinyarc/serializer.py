"""Grid and episode token serialization with a strict decoder.

Token id layout (stable, part of the checkpoint contract)::

    0 BOS   1 EOS   2 SEP_IO   3 SEP_EX   4 ROW   5 PAD
    6..35   SIZE(1)..SIZE(30)
    36..45  C(0)..C(9)

A grid encodes as ``SIZE(h) SIZE(w)`` followed by its rows, each row a run of
color tokens, with one ``ROW`` between consecutive rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    BadHeader,
    ContextOverflow,
    InconsistentBounds,
    RowCountMismatch,
    RowLengthMismatch,
    TrailingTokens,
    Truncated,
    UnexpectedToken,
)
from .grid import MAX_SIDE, N_COLORS, Grid

VOCAB_VERSION = "tinyarc-v1"

BOS, EOS, SEP_IO, SEP_EX, ROW, PAD = range(6)
SIZE_BASE = 6
COLOR_BASE = SIZE_BASE + MAX_SIDE  # 36
VOCAB_SIZE = COLOR_BASE + N_COLORS  # 46

SPECIAL_NAMES = ("BOS", "EOS", "SEP_IO", "SEP_EX", "ROW", "PAD")

# 2 header tokens + 900 cells + 29 row separators
MAX_GRID_TOKENS = 2 + MAX_SIDE * MAX_SIDE + (MAX_SIDE - 1)
DEFAULT_MAX_CTX = 2048


def size_token(n: int) -> int:
    if not 1 <= n <= MAX_SIDE:
        raise ValueError(f"size {n} outside 1..{MAX_SIDE}")
    return SIZE_BASE + n - 1


def color_token(c: int) -> int:
    if not 0 <= c < N_COLORS:
        raise ValueError(f"color {c} outside 0..{N_COLORS - 1}")
    return COLOR_BASE + c


def is_size(t: int) -> bool:
    return SIZE_BASE <= t < COLOR_BASE


def is_color(t: int) -> bool:
    return COLOR_BASE <= t < VOCAB_SIZE


def token_name(t: int) -> str:
    if 0 <= t < SIZE_BASE:
        return SPECIAL_NAMES[t]
    if is_size(t):
        return f"SIZE({t - SIZE_BASE + 1})"
    if is_color(t):
        return f"C({t - COLOR_BASE})"
    return f"<?{t}>"


@dataclass(frozen=True)
class Vocab:
    forward: dict[str, int]
    backward: dict[int, str]

    def __len__(self) -> int:
        return len(self.forward)


def build_vocab() -> Vocab:
    fwd = {token_name(i): i for i in range(VOCAB_SIZE)}
    return Vocab(fwd, {i: n for n, i in fwd.items()})


def grid_token_count(h: int, w: int) -> int:
    return 2 + h * w + (h - 1)


def encode_grid(g: Grid, order: str = "row") -> list[int]:
    """Serialize ``g``. ``order="col"`` emits columns instead of rows (ablation only)."""
    a = g.array if order == "row" else g.array.T
    if order not in ("row", "col"):
        raise ValueError(f"unknown order {order!r}")
    ids = [size_token(g.height), size_token(g.width)]
    body = a.astype(np.int64) + COLOR_BASE
    for r in range(body.shape[0]):
        if r:
            ids.append(ROW)
        ids.extend(body[r].tolist())
    return ids


def decode_grid(seq: Sequence[int], order: str = "row") -> Grid:
    """Strict inverse of :func:`encode_grid`; accepts only sequences it can emit."""
    s = list(seq)
    if order not in ("row", "col"):
        raise ValueError(f"unknown order {order!r}")
    for i in range(min(2, len(s))):
        if not is_size(s[i]):
            raise BadHeader(f"position {i}: expected SIZE token, got {token_name(s[i])}")
    if len(s) < 2:
        raise Truncated("sequence ends inside the size header")
    h, w = s[0] - SIZE_BASE + 1, s[1] - SIZE_BASE + 1
    n_rows, n_cols = (h, w) if order == "row" else (w, h)

    cells = np.empty((n_rows, n_cols), dtype=np.int8)
    pos = 2
    for r in range(n_rows):
        if r:
            if pos >= len(s):
                raise Truncated(f"missing row {r} of {n_rows}")
            t = s[pos]
            if is_color(t):
                raise RowLengthMismatch(f"row {r - 1} longer than {n_cols}")
            if t != ROW:
                raise UnexpectedToken(f"position {pos}: {token_name(t)} between rows")
            pos += 1
        for c in range(n_cols):
            if pos >= len(s):
                raise Truncated(f"sequence ends in row {r} at column {c}")
            t = s[pos]
            if not is_color(t):
                if t == ROW:
                    raise RowLengthMismatch(f"row {r} has {c} cells, expected {n_cols}")
                raise UnexpectedToken(f"position {pos}: {token_name(t)} inside row {r}")
            cells[r, c] = t - COLOR_BASE
            pos += 1
    if pos < len(s):
        if s[pos] == ROW:
            raise RowCountMismatch(f"more than {n_rows} rows")
        raise TrailingTokens(f"{len(s) - pos} tokens after the last row")
    return Grid(cells if order == "row" else cells.T)


def decode_generation(seq: Sequence[int], order: str = "row") -> Grid:
    """Decode model output that must end in exactly one EOS."""
    s = list(seq)
    if not s or s[-1] != EOS:
        raise Truncated("generation did not terminate with EOS")
    if EOS in s[:-1]:
        raise UnexpectedToken("EOS before the end of the grid")
    return decode_grid(s[:-1], order)


@dataclass(frozen=True)
class Span:
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    def shift(self, d: int) -> "Span":
        return Span(self.start + d, self.stop + d)


@dataclass(frozen=True)
class Episode:
    """Serialized context of demonstration pairs plus a test input.

    ``prefix`` ends with the SEP_IO after the test input; the expected
    continuation is the test output encoding followed by EOS. Spans index
    into ``prefix``.
    """

    prefix: tuple[int, ...]
    pair_spans: tuple[tuple[Span, Span], ...]
    test_span: Span
    order: str = "row"

    @property
    def n_pairs(self) -> int:
        return len(self.pair_spans)

    def output_spans(self) -> list[Span]:
        return [out for _, out in self.pair_spans]


def encode_episode(pairs: Sequence[tuple[Grid, Grid]], test_input: Grid, order: str = "row") -> Episode:
    """``BOS (in SEP_IO out SEP_EX)* test_in SEP_IO``."""
    if not pairs:
        raise ValueError("episode needs at least one demonstration pair")
    ids = [BOS]
    spans = []
    for gi, go in pairs:
        a = len(ids)
        ids.extend(encode_grid(gi, order))
        ia = Span(a, len(ids))
        ids.append(SEP_IO)
        b = len(ids)
        ids.extend(encode_grid(go, order))
        spans.append((ia, Span(b, len(ids))))
        ids.append(SEP_EX)
    a = len(ids)
    ids.extend(encode_grid(test_input, order))
    test_span = Span(a, len(ids))
    ids.append(SEP_IO)
    return Episode(tuple(ids), tuple(spans), test_span, order)


def target_tokens(g: Grid, order: str = "row") -> list[int]:
    return encode_grid(g, order) + [EOS]


@dataclass(frozen=True)
class TrainingSequence:
    """Full token sequence for teacher forcing with its output-grid segments."""

    ids: tuple[int, ...]
    segments: tuple[Span, ...]  # output grids, the last one followed by EOS

    def __len__(self) -> int:
        return len(self.ids)


def training_sequence(ep: Episode, test_output: Grid) -> TrainingSequence:
    tgt = encode_grid(test_output, ep.order)
    start = len(ep.prefix)
    ids = ep.prefix + tuple(tgt) + (EOS,)
    segs = tuple(ep.output_spans()) + (Span(start, start + len(tgt)),)
    return TrainingSequence(ids, segs)


def loss_mask(seq: Sequence[int], segment_bounds: Sequence[Span]) -> list[bool]:
    """True on every output-grid token and on the final EOS; False elsewhere.

    ``segment_bounds`` lists the output-grid spans; the last span must be
    followed immediately by the closing EOS.
    """
    n = len(seq)
    if not segment_bounds:
        raise InconsistentBounds("no output segments given")
    mask = [False] * n
    prev = 0
    for sp in segment_bounds:
        if sp.start < prev or sp.stop > n or len(sp) < 3:
            raise InconsistentBounds(f"segment {sp} out of order or out of range")
        if not (is_size(seq[sp.start]) and is_size(seq[sp.start + 1])):
            raise InconsistentBounds(f"segment {sp} does not start with a size header")
        for i in range(sp.start, sp.stop):
            mask[i] = True
        prev = sp.stop
    last = segment_bounds[-1]
    if last.stop >= n or seq[last.stop] != EOS:
        raise InconsistentBounds("final output segment is not followed by EOS")
    mask[last.stop] = True
    return mask


def fit_context(ep: Episode, max_ctx: int = DEFAULT_MAX_CTX, target_len: int | None = None,
                max_pairs: int | None = None) -> Episode:
    """Drop the earliest demonstration pairs until prefix plus target fits.

    ``target_len`` defaults to the worst case: the largest legal grid plus EOS.
    ``max_pairs`` caps the number of retained pairs (latest kept).
    """
    budget = (MAX_GRID_TOKENS + 1) if target_len is None else target_len
    pairs = list(ep.pair_spans)
    if max_pairs is not None and len(pairs) > max_pairs:
        pairs = pairs[len(pairs) - max_pairs:]
    if len(pairs) == len(ep.pair_spans) and len(ep.prefix) + budget <= max_ctx:
        return ep

    def length(ps):
        return 1 + sum(len(i) + len(o) + 2 for i, o in ps) + len(ep.test_span) + 1

    while pairs and length(pairs) + budget > max_ctx:
        pairs.pop(0)
    if length(pairs) + budget > max_ctx:
        raise ContextOverflow(
            f"test input ({len(ep.test_span)} tokens) plus target budget {budget} exceeds {max_ctx}")

    ids = [BOS]
    new_spans = []
    for i_sp, o_sp in pairs:
        a = len(ids)
        ids.extend(ep.prefix[i_sp.start:i_sp.stop])
        ids.append(SEP_IO)
        b = len(ids)
        ids.extend(ep.prefix[o_sp.start:o_sp.stop])
        ids.append(SEP_EX)
        new_spans.append((Span(a, a + len(i_sp)), Span(b, b + len(o_sp))))
    a = len(ids)
    ids.extend(ep.prefix[ep.test_span.start:ep.test_span.stop])
    ids.append(SEP_IO)
    return Episode(tuple(ids), tuple(new_spans), Span(a, len(ids) - 1), ep.order)


def split_segments(seq: Sequence[int]) -> list[list[int]]:
    """Split a token stream on BOS/SEP/EOS markers into its grid segments."""
    out: list[list[int]] = []
    cur: list[int] = []
    for t in seq:
        if t in (BOS, SEP_IO, SEP_EX, EOS):
            if cur:
                out.append(cur)
            cur = []
        else:
            cur.append(t)
    if cur:
        out.append(cur)
    return out


def describe(seq: Sequence[int]) -> str:
    return " ".join(token_name(t) for t in seq)
