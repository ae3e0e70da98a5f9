"""Untimed multi-module protocol model.

A :class:`World` holds one :class:`~reflexsim.dsm.protocol.DsmNode` per
module, per-(src, dst) FIFO channels and a straight-line program per module.
Transitions are the atomic protocol steps: start a handler, run one program
op, and let a module consume one message. A module in its event loop takes
the head of any incoming channel (which covers every arrival order). An
owner stalled on an access takes only the release it awaits; a requester
stalled on a response takes that response or keeps serving request batches
for the objects it owns. Every
interleaving of these steps is a legal schedule of the real protocol.
"""

from __future__ import annotations

import random
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .protocol import (CopyState, DsmNode, DsmRequestBatch, DsmResponse, OwnerOrder, RequestKind, Role,
                       SharedObjectDescriptor)


@dataclass(frozen=True)
class Request:
    owner: str
    items: tuple[tuple[str, RequestKind], ...]


@dataclass(frozen=True)
class OwnerAccess:
    obj: str


@dataclass(frozen=True)
class Read:
    obj: str


@dataclass(frozen=True)
class Write:
    obj: str


Op = Request | OwnerAccess | Read | Write


def protocol_ops(program: Sequence[Op]) -> int:
    return sum(isinstance(op, (Request, OwnerAccess)) for op in program)


@dataclass(frozen=True)
class WorldApp:
    ranks: Mapping[str, int]
    descriptors: tuple[SharedObjectDescriptor, ...]
    programs: Mapping[str, tuple[Op, ...]]

    @property
    def order(self) -> OwnerOrder:
        return OwnerOrder(self.ranks)

    def owner_of(self) -> dict[str, str]:
        return {d.object_id: d.owner for d in self.descriptors}


def make_descriptors(ranks: Mapping[str, int], groups: Mapping[str, Iterable[str]],
                     swap_roles: bool = False) -> tuple[SharedObjectDescriptor, ...]:
    """Descriptors with the weakest member as owner (strongest if ``swap_roles``)."""
    out = []
    for obj, members in sorted(groups.items()):
        members = frozenset(members)
        pick = max if swap_roles else min
        owner = pick(members, key=ranks.__getitem__)
        out.append(SharedObjectDescriptor(obj, "int32", members, owner, 4))
    return tuple(out)


def compile_procedure(module: str, accesses: Sequence[tuple[str, bool]], app_owner: Mapping[str, str],
                      order: OwnerOrder, regulation: bool = True) -> tuple[Op, ...]:
    """Lower one procedure's access list ``[(obj, is_write), ...]`` to ops.

    With the ordering regulation, requester objects are requested with one
    batch per owner in owner order and released in reverse. Without it every
    object is acquired on its own, in first-access order.
    """
    mine = [o for o, _ in accesses if app_owner[o] != module]
    writes = {o for o, w in accesses if w}
    first_seen = list(dict.fromkeys(mine))
    mode = {o: RequestKind.ACQUIRE if o in writes else RequestKind.REPLICATE for o in first_seen}
    ops: list[Op] = []
    if regulation:
        groups = order.group_by_owner(first_seen, app_owner)
        for owner, objs in groups:
            ops.append(Request(owner, tuple((o, mode[o]) for o in objs)))
    else:
        groups = [(app_owner[o], [o]) for o in first_seen]
        for owner, objs in groups:
            ops.append(Request(owner, tuple((o, mode[o]) for o in objs)))
    checked: set[str] = set()
    for obj, is_write in accesses:
        if app_owner[obj] == module and obj not in checked:
            ops.append(OwnerAccess(obj))
            checked.add(obj)
        ops.append(Write(obj) if is_write else Read(obj))
    release_groups = reversed(groups) if regulation else groups
    for owner, objs in release_groups:
        held = tuple((o, RequestKind.RELEASE) for o in objs if mode[o] is RequestKind.ACQUIRE)
        if held:
            ops.append(Request(owner, held))
    return tuple(ops)


IDLE, RUN, WAIT_RESP, WAIT_REL, DONE = "idle", "run", "wait_resp", "wait_rel", "done"


@dataclass
class ModuleCtx:
    pc: int = 0
    status: str = IDLE
    waiting: object = None
    writes: int = 0

    def clone(self) -> "ModuleCtx":
        return ModuleCtx(self.pc, self.status, self.waiting, self.writes)

    def key(self) -> tuple:
        return (self.pc, self.status, self.waiting, self.writes)


class InvariantViolation(AssertionError):
    pass


@dataclass
class Observer:
    """Independent bookkeeping for the coherence invariants."""

    history: dict[str, list] = field(default_factory=dict)
    last_known: dict[tuple[str, str], int] = field(default_factory=dict)
    received: set[tuple[str, int]] = field(default_factory=set)
    reads: int = 0


class World:
    def __init__(self, app: WorldApp, values: bool = False, notes: bool = True):
        self.app = app
        self.notes = notes
        self.order = app.order
        self.owner_of = app.owner_of()
        self.modules = sorted(app.ranks, key=app.ranks.__getitem__)
        self.nodes = {m: DsmNode.build(m, app.descriptors) for m in self.modules}
        self.ctx = {m: ModuleCtx() for m in self.modules}
        self.channels: dict[tuple[str, str], tuple] = {}
        self._nkeys: dict | None = None
        self.obs = Observer() if values else None
        if self.obs is not None:
            for d in app.descriptors:
                self.obs.history[d.object_id] = [0]
                for m in d.sharing_group:
                    self.obs.last_known[(m, d.object_id)] = 0

    # ---- cloning / hashing --------------------------------------------------

    def clone(self, touched: str | None = None) -> "World":
        """Copy for exploring one transition; only ``touched`` gets a private
        node and context (every transition changes at most one module)."""
        w = World.__new__(World)
        w.app, w.order, w.owner_of, w.modules = self.app, self.order, self.owner_of, self.modules
        w.notes = self.notes
        if touched is None:
            w.nodes = {m: n.clone() for m, n in self.nodes.items()}
            w.ctx = {m: c.clone() for m, c in self.ctx.items()}
        else:
            w.nodes = dict(self.nodes)
            w.nodes[touched] = self.nodes[touched].clone()
            w.ctx = dict(self.ctx)
            w.ctx[touched] = self.ctx[touched].clone()
        w.channels = dict(self.channels)
        w._nkeys = dict(self._nkeys) if self._nkeys is not None else None
        w.obs = None
        return w

    def key(self, touched: str | None = None) -> tuple:
        if self._nkeys is None or touched is None:
            self._nkeys = {m: self.nodes[m].key() for m in self.modules}
        else:
            self._nkeys[touched] = self.nodes[touched].key()
        return (tuple(self.ctx[m].key() for m in self.modules),
                tuple(self._nkeys[m] for m in self.modules),
                tuple(sorted((k, v) for k, v in self.channels.items() if v)))

    # ---- transitions --------------------------------------------------------

    def enabled(self) -> list[tuple]:
        out = []
        for m in self.modules:
            c = self.ctx[m]
            if c.status == IDLE and self.app.programs.get(m):
                out.append(("start", m))
            elif c.status == RUN:
                out.append(("step", m))
            elif c.status in (WAIT_RESP, WAIT_REL):
                if self._awaited(m) is not None:
                    out.append(("consume", m, None))
        for (s, d), q in sorted(self.channels.items()):
            if not q:
                continue
            st = self.ctx[d].status
            if st in (IDLE, DONE) or (st == WAIT_RESP and q[0][0] == "req"):
                out.append(("consume", d, s))
        return out

    def _awaited(self, m: str):
        c = self.ctx[m]
        for (s, d), q in sorted(self.channels.items()):
            if d != m:
                continue
            for i, msg in enumerate(q):
                if c.status == WAIT_RESP and msg[0] == "resp" and msg[1] == c.waiting:
                    return s, i
                if c.status == WAIT_REL and msg[0] == "req" and msg[1].releases(c.waiting):
                    return s, i
        return None

    def terminal(self) -> bool:
        prog = self.app.programs
        return (all(self.ctx[m].status == DONE or not prog.get(m) for m in self.modules)
                and not any(self.channels.values()))

    def _send(self, src: str, dst: str, msg: tuple) -> None:
        if self.obs is not None:
            self._observe_send(src, msg)
        self.channels[(src, dst)] = self.channels.get((src, dst), ()) + (msg,)

    def _respond(self, owner: str, pairs) -> None:
        for batch, resp in pairs:
            self._send(owner, batch.requester, ("resp", batch, resp))

    def apply(self, label: tuple) -> list[str]:
        """Perform one transition; returns trace notes ``[module action obj before->after]``."""
        kind = label[0]
        notes: list[str] = []
        if kind == "start":
            self.ctx[label[1]].status = RUN
            if self.notes:
                notes.append(f"{label[1]} start - -")
        elif kind == "step":
            notes.extend(self._step(label[1]))
        elif kind == "consume":
            notes.extend(self._consume(label[1], label[2]))
        else:
            raise ValueError(label)
        if self.obs is not None:
            self.check_invariants()
        return notes

    def _finish_if_done(self, m: str, notes: list[str]) -> None:
        c = self.ctx[m]
        if c.pc >= len(self.app.programs.get(m, ())) and c.status == RUN:
            c.status = DONE
            self._respond(m, self.nodes[m].drain())
            if self.notes:
                notes.append(f"{m} handler-exit - -")

    def _step(self, m: str) -> list[str]:
        c, node = self.ctx[m], self.nodes[m]
        op = self.app.programs[m][c.pc]
        notes: list[str] = []
        if isinstance(op, Request):
            items = []
            for obj, k in op.items:
                if k is RequestKind.RELEASE:
                    if node.is_exclusive(obj):
                        items.append((obj, k))
                elif not node.is_exclusive(obj):
                    items.append((obj, k))
            if items:
                batch = node.request_batch(op.owner, items)
                self._send(m, op.owner, ("req", batch))
                c.status, c.waiting = WAIT_RESP, batch
                if not self.notes:
                    return notes
                objs = ",".join(o for o, _ in items)
                notes.append(f"{m} {'/'.join(sorted({k.value for _, k in items}))} {objs} -> {op.owner}")
                return notes
            c.pc += 1
        elif isinstance(op, OwnerAccess):
            before = node.state(op.obj).value
            if node.is_exclusive(op.obj):
                c.pc += 1
                if self.notes:
                    notes.append(f"{m} owner-access {op.obj} {before}->{before}")
            else:
                c.status, c.waiting = WAIT_REL, op.obj
                if self.notes:
                    notes.append(f"{m} owner-stall {op.obj} {before}->{before}")
                return notes
        elif isinstance(op, Write):
            c.writes += 1
            v = (self.modules.index(m) + 1) * 1_000_000 + c.writes
            node.write(op.obj, 0, v)
            if self.obs is not None:
                self.obs.last_known[(m, op.obj)] = v
                if node.role(op.obj) is Role.OWNER:
                    self.obs.history[op.obj].append(v)
            c.pc += 1
        elif isinstance(op, Read):
            v = node.read(op.obj, 0)
            if self.obs is not None:
                self._observe_read(m, op.obj, v)
            c.pc += 1
        self._finish_if_done(m, notes)
        return notes

    def _consume(self, m: str, src: str | None) -> list[str]:
        c, node = self.ctx[m], self.nodes[m]
        if src is None:
            src, i = self._awaited(m)
        else:
            i = 0
        q = self.channels[(src, m)]
        msg = q[i]
        self.channels[(src, m)] = q[:i] + q[i + 1:]
        notes: list[str] = []
        if msg[0] == "resp":
            batch, resp = msg[1], msg[2]
            before = {o: node.state(o).value for o in batch.objects} if self.notes else None
            node.apply_response(batch, resp)
            if self.obs is not None:
                for obj, k, v in resp.results:
                    if v is not None:
                        self.obs.last_known[(m, obj)] = v[0]
            if self.notes:
                for o in batch.objects:
                    notes.append(f"{m} response {o} {before[o]}->{node.state(o).value}")
            c.status, c.waiting = RUN, None
            c.pc += 1
            self._finish_if_done(m, notes)
            return notes
        batch = msg[1]
        before = {o: node.state(o).value for o in batch.objects} if self.notes else None
        if self.obs is not None:
            self._observe_receive(m, batch)
        if c.status == WAIT_REL:
            pairs = node.serve(batch, drain=False)
            c.status, c.waiting = RUN, None
        else:
            pairs = node.serve(batch, drain=True)
        self._respond(m, pairs)
        for o in (batch.objects if self.notes else ()):
            notes.append(f"{m} serve#{batch.batch_id} {o} {before[o]}->{node.state(o).value}")
        return notes

    # ---- invariants -----------------------------------------------------------

    def _observe_send(self, src: str, msg: tuple) -> None:
        if msg[0] == "req":
            for obj in msg[1].objects:
                if self.owner_of[obj] == src:
                    raise InvariantViolation(f"owner {src} sent a request for {obj}")
        else:
            batch = msg[1]
            if (batch.requester, batch.batch_id) not in self.obs.received:
                raise InvariantViolation(f"{src} sent an unsolicited response to {batch.requester}")

    def _observe_receive(self, owner: str, batch: DsmRequestBatch) -> None:
        self.obs.received.add((batch.requester, batch.batch_id))
        for r in batch.requests:
            if r.kind is RequestKind.RELEASE and r.value[0] != self.obs.history[r.obj][-1]:
                self.obs.history[r.obj].append(r.value[0])

    def _observe_read(self, m: str, obj: str, v: int) -> None:
        self.obs.reads += 1
        if v not in self.obs.history[obj] and v != self.obs.last_known[(m, obj)]:
            raise InvariantViolation(f"{m} read {v} from {obj}, never in the write order")
        if self.nodes[m].role(obj) is Role.REQUESTER and v != self.obs.last_known[(m, obj)]:
            raise InvariantViolation(f"{m} read stale {obj}={v}, last known {self.obs.last_known[(m, obj)]}")

    def _in_flight(self) -> dict[str, bool]:
        busy: dict[str, bool] = defaultdict(bool)
        for msg in (msg for q in self.channels.values() for msg in q):
            if msg[0] == "resp":
                for obj, _, _ in msg[2].results:
                    busy[obj] = True
            else:
                for r in msg[1].requests:
                    if r.kind is RequestKind.RELEASE:
                        busy[r.obj] = True
        return busy

    def _releasing(self, m: str, obj: str) -> bool:
        c = self.ctx[m]
        return c.status == WAIT_RESP and c.waiting.releases(obj)

    def check_invariants(self) -> None:
        busy = self._in_flight()
        for d in self.app.descriptors:
            holders = [m for m in d.sharing_group if self.nodes[m].is_exclusive(d.object_id)]
            if not busy[d.object_id] and len(holders) != 1:
                raise InvariantViolation(f"{d.object_id}: {len(holders)} Exclusive members at quiescence")
            # a requester whose release is outstanding has already handed the
            # value back, so at most one member may use the object at a time
            live = [m for m in holders if not self._releasing(m, d.object_id)]
            if len(live) > 1:
                raise InvariantViolation(f"{d.object_id}: {live} all Exclusive")
        for obj, hist in self.obs.history.items():
            per_writer: dict[int, int] = {}
            for v in hist[1:]:
                w, n = divmod(v, 1_000_000)
                if per_writer.get(w, 0) >= n:
                    raise InvariantViolation(f"{obj}: writes of module {w} out of order in {hist}")
                per_writer[w] = n

    # ---- diagnostics ----------------------------------------------------------

    def holder(self, obj: str) -> str | None:
        for m in self.modules:
            c = self.nodes[m].copies.get(obj)
            if c is not None and c.role is Role.REQUESTER and c.state is CopyState.EXCLUSIVE:
                return m
        return None

    def wait_for(self) -> dict[str, set[str]]:
        edges: dict[str, set[str]] = defaultdict(set)
        for m in self.modules:
            c = self.ctx[m]
            if c.status == WAIT_RESP:
                batch = c.waiting
                owner = batch.owner
                if batch in self.nodes[owner].pending:
                    for r in batch.requests:
                        h = self.holder(r.obj)
                        if h is not None and r.kind is not RequestKind.RELEASE:
                            edges[m].add(h)
                else:
                    edges[m].add(owner)
            elif c.status == WAIT_REL:
                h = self.holder(c.waiting)
                if h is not None:
                    edges[m].add(h)
        return edges


def find_cycle(edges: Mapping[str, set[str]]) -> list[str] | None:
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(u):
        color[u] = 1
        stack.append(u)
        for v in sorted(edges.get(u, ())):
            if color.get(v) == 1:
                return stack[stack.index(v):]
            if v not in color:
                cyc = visit(v)
                if cyc:
                    return cyc
        color[u] = 2
        stack.pop()
        return None

    for node in sorted(edges):
        if node not in color:
            cyc = visit(node)
            if cyc:
                return cyc
    return None


def random_run(app: WorldApp, rng: random.Random, max_steps: int = 10_000) -> World:
    """One randomized schedule with invariant checking after every step."""
    w = World(app, values=True)
    for _ in range(max_steps):
        choices = w.enabled()
        if not choices:
            break
        w.apply(rng.choice(choices))
    return w
