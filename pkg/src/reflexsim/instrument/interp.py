"""Interpreting (instrumented) module IR as a stream of runtime operations.

A procedure run is a generator yielding the runtime's handler operations;
shared objects are read and written through the context's local copies.

Requester batching needs a little runtime help. An entry PreAccess runs
only when no enclosing activation already covers the objects (callee
accesses are part of the caller's summary); the activation that ran it is
the cover and its exit PostAccess releases what it acquired. A split
PostAccess releases and suspends the cover, the matching split PreAccess
re-acquires.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterator, Protocol

from .. import runtime as rt
from .ir import (Blocking, Branch, Call, Compute, Goto, Loop, ModuleIR, Post, Pre, Prob, Read, Ret, Sense,
                 SendData, Write)

MASK = 0xFFFFFFFF


class Context(Protocol):
    def read(self, obj: str, idx: int = 0) -> int: ...
    def write(self, obj: str, idx: int, value: int) -> None: ...
    def get_sensor_data(self, channel: str) -> tuple[int, ...]: ...
    @property
    def rng(self): ...


class StepLimit(RuntimeError):
    pass


@dataclass
class InterpStats:
    checks: Counter = field(default_factory=Counter)      # executed PreAccess per site
    skipped: Counter = field(default_factory=Counter)     # entry checks elided by a cover
    releases: Counter = field(default_factory=Counter)    # executed PostAccess per site
    statements: int = 0

    def merge(self, other: "InterpStats") -> None:
        self.checks.update(other.checks)
        self.skipped.update(other.skipped)
        self.releases.update(other.releases)
        self.statements += other.statements


def count_state_checks(stats: InterpStats) -> dict[str, int]:
    return dict(sorted(stats.checks.items()))


@dataclass
class _Frame:
    proc: str
    held: set[str] = field(default_factory=set)
    suspended: bool = False  # released at a split, awaiting the re-acquire
    resumed: bool = False
    loops: dict[str, int] = field(default_factory=dict)


@dataclass
class _Run:
    ctx: Any
    stats: InterpStats
    acc: int = 0
    cover: _Frame | None = None
    steps: int = 0


class Interpreter:
    def __init__(self, ir: ModuleIR, stats: InterpStats | None = None, max_steps: int = 5_000_000,
                 read_cycles: int = 0, write_cycles: int = 0):
        self.ir = ir
        self.stats = stats or InterpStats()
        self.max_steps = max_steps
        self.read_cycles = read_cycles
        self.write_cycles = write_cycles
        self._procs = {p.name: p for p in ir.procedures}
        self._blocks = {(p.name, b.label): b for p in ir.procedures for b in p.blocks}

    def run(self, proc: str, ctx, acc: int = 0) -> Iterator:
        """Generator for one activation of ``proc``; returns the accumulator."""
        r = _Run(ctx, self.stats, acc & MASK)
        result = yield from self._proc(r, proc)
        return result

    def _proc(self, r: _Run, name: str):
        p = self._procs[name]
        f = _Frame(name)
        label = p.entry
        while True:
            b = self._blocks[(name, label)]
            for s in b.stmts:
                r.steps += 1
                if r.steps > self.max_steps:
                    raise StepLimit(f"{self.ir.module}.{name}: more than {self.max_steps} steps")
                yield from self._stmt(r, f, s)
            r.stats.statements += len(b.stmts)
            t = b.term
            if isinstance(t, Ret):
                if r.cover is f:
                    r.cover = None
                return r.acc
            if isinstance(t, Goto):
                label = t.target
            elif isinstance(t, Branch):
                label = t.if_true if (r.acc >> t.bit) & 1 else t.if_false
            elif isinstance(t, Prob):
                label = t.if_true if r.ctx.rng.random() < t.p else t.if_false
            elif isinstance(t, Loop):
                k = f.loops.get(label, 0)
                if k < t.count:
                    f.loops[label] = k + 1
                    label = t.body
                else:
                    f.loops.pop(label, None)
                    label = t.exit
            else:  # pragma: no cover
                raise TypeError(t)

    def _stmt(self, r: _Run, f: _Frame, s):
        ctx = r.ctx
        if f.resumed and not (isinstance(s, Pre) and s.mode == "split"):
            f.suspended = f.resumed = False
        if isinstance(s, Read):
            r.acc = (r.acc + ctx.read(s.obj, s.idx)) & MASK
            if self.read_cycles:
                yield rt.Compute(self.read_cycles)
        elif isinstance(s, Write):
            v = ctx.read(s.obj, s.idx) * 31 + s.k + r.acc
            ctx.write(s.obj, s.idx, v & MASK)
            if self.write_cycles:
                yield rt.Compute(self.write_cycles)
        elif isinstance(s, Compute):
            if s.cycles:
                yield rt.Compute(s.cycles)
        elif isinstance(s, Sense):
            r.acc = (r.acc + sum(ctx.get_sensor_data(s.channel))) & MASK
        elif isinstance(s, Blocking):
            yield rt.Block(s.ms)
        elif isinstance(s, SendData):
            yield rt.Send(s.dst, bytes(s.nbytes))
        elif isinstance(s, Call):
            if s.remote:
                res = yield rt.Call(s.module, s.proc, b"", r.acc)
                if isinstance(res, int):
                    r.acc = (r.acc + res) & MASK
            else:
                yield from self._proc(r, s.target)
        elif isinstance(s, Pre):
            yield from self._pre(r, f, s)
        elif isinstance(s, Post):
            yield from self._post(r, f, s)
        else:  # pragma: no cover
            raise TypeError(s)

    def _pre(self, r: _Run, f: _Frame, s: Pre):
        if s.mode == "entry" and r.cover is not None and r.cover is not f:
            r.stats.skipped[s.site] += 1
            return
        if s.mode == "split" and not f.suspended:
            r.stats.skipped[s.site] += 1
            return
        r.stats.checks[s.site] += 1
        got = yield rt.PreAccess(s.items, s.site)
        if s.mode in ("entry", "split"):
            f.held |= set(got or ())
            r.cover = f
            f.resumed = s.mode == "split"

    def _post(self, r: _Run, f: _Frame, s: Post):
        if s.mode == "ref":
            r.stats.releases[s.site] += 1
            yield rt.PostAccess(s.objs, s.site)
            return
        if s.mode == "split":
            if r.cover is not f and not f.suspended:
                return
            r.cover = None
            f.suspended = True
        elif r.cover is not f:
            return
        objs = tuple(o for o in s.objs if o in f.held)
        if objs:
            r.stats.releases[s.site] += 1
            yield rt.PostAccess(objs, s.site)
            f.held -= set(objs)
