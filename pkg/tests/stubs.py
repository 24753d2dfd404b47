"""Hand-built stand-ins for the language model used by ensemble and harness tests."""

from tinyarc.serializer import EOS, decode_grid, encode_grid, split_segments
from tinyarc.views import apply_view, apply_view_to_task


def last_grid(prefix):
    return tuple(split_segments(prefix)[-1])


class LookupStub:
    """Answers by looking the episode's final input grid up in a table.

    Unknown inputs get ``default`` (tokens). Scores are 0 for the tabled
    answer and ``miss`` otherwise.
    """

    max_ctx = 2048

    def __init__(self, table=None, default=None, miss=-10.0):
        self.table = dict(table or {})
        self.default = default
        self.miss = miss
        self.calls = 0

    @classmethod
    def from_task(cls, t, views, **kw):
        table = {}
        for v in views:
            vt = apply_view_to_task(v, t)
            for p in vt.train:
                table[tuple(encode_grid(p.input))] = encode_grid(p.output)
            for it in vt.test:
                if it.output is not None:
                    table[tuple(encode_grid(it.input))] = encode_grid(it.output)
        return cls(table, **kw)

    def answer(self, prefix):
        key = last_grid(prefix)
        if key in self.table:
            return list(self.table[key])
        return None if self.default is None else list(self.default)

    def generate_greedy(self, prefix, max_new):
        self.calls += 1
        ans = self.answer(prefix)
        if ans is None:
            return [EOS]  # undecodable
        return (ans + [EOS])[:max_new]

    def seq_logprob(self, prefix, continuation):
        ans = self.answer(prefix)
        if ans is not None and list(continuation) == ans + [EOS]:
            return 0.0
        return self.miss


class ConstantStub:
    """Always emits the same grid."""

    max_ctx = 2048

    def __init__(self, grid):
        self.tokens = encode_grid(grid)

    def generate_greedy(self, prefix, max_new):
        return (self.tokens + [EOS])[:max_new]

    def seq_logprob(self, prefix, continuation):
        return -1.0 * len(continuation)


class GarbageStub:
    """Emits tokens that never decode."""

    max_ctx = 2048

    def generate_greedy(self, prefix, max_new):
        return [4, 4, EOS]

    def seq_logprob(self, prefix, continuation):
        return -100.0
