"""Synchronous execution of module IR for oracle comparisons.

Activations run one after another (a remote call runs the callee to
completion in place), so batched, reference and uninstrumented executions
of the same schedule must leave identical shared values behind. DSM
exchanges complete immediately; an owner access to an Invalid copy or a
request the owner cannot answer means the instrumentation is wrong and
raises.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .. import runtime as rt
from ..dsm.protocol import (DsmError, DsmNode, OwnerOrder, RequestKind, Role, SharedObjectDescriptor,
                            plan_requests)
from .interp import InterpStats, Interpreter
from .ir import (BasicBlock, Blocking, Branch, Call, Compute, Goto, Loop, ModuleIR, ProcedureIR, Prob, Read, Ret,
                 Sense, Write, validate)
from .modref import analyze_mod_ref
from .passes import InstrumentedModuleIR, instrument


class HarnessError(RuntimeError):
    pass


class _Ctx:
    def __init__(self, sys: "SyncSystem", module: str):
        self.sys, self.module_id = sys, module
        self.rng = sys.rngs[module]

    def read(self, obj: str, idx: int = 0) -> int:
        if self.sys.plain:
            return self.sys.store[obj][idx]
        return self.sys.nodes[self.module_id].read(obj, idx)

    def write(self, obj: str, idx: int, value: int) -> None:
        if self.sys.plain:
            self.sys.store[obj][idx] = value
        else:
            self.sys.nodes[self.module_id].write(obj, idx, value)

    def get_sensor_data(self, channel: str) -> tuple[int, ...]:
        k = self.sys.sensor_counts.get((self.module_id, channel), 0) + 1
        self.sys.sensor_counts[(self.module_id, channel)] = k
        return (k * 7 + len(channel),)


class SyncSystem:
    """A set of modules executing activations back to back.

    ``irs`` maps module -> program (instrumented for DSM execution, plain
    for the single-memory oracle when ``plain`` is set).
    """

    def __init__(self, irs: Mapping[str, ModuleIR], descriptors: Sequence[SharedObjectDescriptor],
                 order: OwnerOrder, seed: int = 0, plain: bool = False,
                 initial: Mapping[str, tuple[int, ...]] | None = None):
        self.irs = dict(irs)
        self.descriptors = list(descriptors)
        self.order = order
        self.plain = plain
        self.stats = InterpStats()
        self.rngs = {m: random.Random(f"{seed}:{m}") for m in self.irs}
        self.sensor_counts: dict = {}
        init = dict(initial or {})
        self.store = {d.object_id: list(init.get(d.object_id, (0,) * d.fields)) for d in self.descriptors}
        self.nodes = {m: DsmNode.build(m, self.descriptors, init) for m in self.irs}
        self.messages = 0
        self._interp = {m: Interpreter(ir, self.stats) for m, ir in self.irs.items()}

    def run(self, module: str, proc: str, acc: int = 0) -> int:
        gen = self._interp[module].run(proc, _Ctx(self, module), acc)
        value = None
        while True:
            try:
                op = gen.send(value)
            except StopIteration as stop:
                return stop.value
            value = self._perform(module, op)

    def _perform(self, module: str, op):
        if isinstance(op, rt.PreAccess):
            return None if self.plain else self._pre(module, op)
        if isinstance(op, rt.PostAccess):
            if not self.plain:
                self._post(module, op)
            return None
        if isinstance(op, rt.Call):
            return self.run(op.dst, op.proc, op.body or 0)
        return None  # compute, block and app sends take no simulated effect here

    def _exchange(self, module: str, owner: str, items) -> None:
        node, own = self.nodes[module], self.nodes[owner]
        batch = node.request_batch(owner, items)
        self.messages += 2
        for b, resp in own.serve(batch):
            if b is batch:
                node.apply_response(batch, resp)
                return
        raise HarnessError(f"{module}: owner {owner} cannot answer {batch.requests} (would stall)")

    def _pre(self, module: str, op: rt.PreAccess) -> frozenset:
        node = self.nodes[module]
        wanted: dict[str, RequestKind] = {}
        for obj, w in op.items:
            if node.role(obj) is Role.OWNER:
                if not node.is_exclusive(obj):
                    raise HarnessError(f"{module}: owned {obj} is Invalid at {op.site} (would stall)")
            elif w or wanted.get(obj) is RequestKind.ACQUIRE:
                wanted[obj] = RequestKind.ACQUIRE
            else:
                wanted.setdefault(obj, RequestKind.REPLICATE)
        acquired = set()
        for owner, items in plan_requests(node, wanted, self.order):
            self._exchange(module, owner, items)
            acquired |= {o for o, k in items if k is RequestKind.ACQUIRE}
        return frozenset(acquired)

    def _post(self, module: str, op: rt.PostAccess) -> None:
        node = self.nodes[module]
        held = [o for o in dict.fromkeys(op.objs) if node.role(o) is Role.REQUESTER and node.is_exclusive(o)]
        owner_of = {o: node.owner_of(o) for o in held}
        for owner, objs in reversed(self.order.group_by_owner(held, owner_of)):
            self._exchange(module, owner, [(o, RequestKind.RELEASE) for o in objs])

    def final_values(self) -> dict[str, tuple[int, ...]]:
        """Owner-visible value of every object."""
        if self.plain:
            return {o: tuple(v) for o, v in sorted(self.store.items())}
        out = {}
        for d in self.descriptors:
            out[d.object_id] = self.nodes[d.owner].value(d.object_id)
        return dict(sorted(out.items()))

    def quiescent(self) -> bool:
        for d in self.descriptors:
            for m in d.sharing_group:
                if m != d.owner and m in self.nodes and self.nodes[m].is_exclusive(d.object_id):
                    return False
        return all(self.nodes[d.owner].is_exclusive(d.object_id) for d in self.descriptors)


# ---- random programs ------------------------------------------------------------


@dataclass
class RandomApp:
    irs: dict[str, ModuleIR]
    descriptors: list[SharedObjectDescriptor]
    order: OwnerOrder
    schedule: list[tuple[str, str]] = field(default_factory=list)


class _Builder:
    def __init__(self, rng: random.Random, ir: ModuleIR, proc: ProcedureIR, slots: Mapping[str, int],
                 local_callees: list[str], remote_callees: list[str], depth: int = 2):
        self.rng, self.ir, self.proc, self.slots = rng, ir, proc, slots
        self.local, self.remote = local_callees, remote_callees
        self.depth = depth
        self.n = 0

    def label(self) -> str:
        self.n += 1
        return f"L{self.n}"

    def stmts(self) -> list:
        out = []
        objs = list(self.ir.shared)
        for _ in range(self.rng.randint(0, 4)):
            c = self.rng.random()
            if objs and c < 0.35:
                o = self.rng.choice(objs)
                out.append(Read(o, self.rng.randrange(self.slots[o])))
            elif objs and c < 0.65:
                o = self.rng.choice(objs)
                out.append(Write(o, self.rng.randrange(self.slots[o]), self.rng.randint(1, 9)))
            elif c < 0.72:
                out.append(Compute(self.rng.randint(1, 500)))
            elif c < 0.78:
                out.append(Blocking(self.rng.choice((1, 5))))
            elif c < 0.86 and self.local:
                out.append(Call(self.rng.choice(self.local)))
            elif c < 0.92 and self.remote:
                out.append(Call(self.rng.choice(self.remote)))
            else:
                out.append(Sense("s"))
        return out

    def region(self, entry: BasicBlock, depth: int) -> BasicBlock:
        """Extend the CFG from open block ``entry``; returns the open exit block."""
        cur = entry
        for _ in range(self.rng.randint(1, 3)):
            cur.stmts += self.stmts()
            kind = self.rng.random() if depth > 0 else 1.0
            if kind < 0.3:  # if/else
                t, f, join = (BasicBlock(self.label()) for _ in range(3))
                cur.term = (Branch(self.rng.randrange(4), t.label, f.label) if self.rng.random() < 0.6
                            else Prob(self.rng.choice((0.25, 0.5, 0.75)), t.label, f.label))
                self.proc.blocks += [t, f]
                te, fe = self.region(t, depth - 1), self.region(f, depth - 1)
                te.term = fe.term = Goto(join.label)
                self.proc.blocks.append(join)
                cur = join
            elif kind < 0.5:  # counted loop
                head, body, exit_ = (BasicBlock(self.label()) for _ in range(3))
                cur.term = Goto(head.label)
                head.term = Loop(self.rng.randint(0, 3), body.label, exit_.label)
                self.proc.blocks += [head, body]
                be = self.region(body, depth - 1)
                be.term = Goto(head.label)
                self.proc.blocks.append(exit_)
                cur = exit_
            elif kind < 0.6 and depth > 0:  # early return arm
                ret, rest = BasicBlock(self.label()), BasicBlock(self.label())
                ret.stmts = self.stmts()
                ret.term = Ret()
                cur.term = Branch(self.rng.randrange(4), ret.label, rest.label)
                self.proc.blocks += [ret, rest]
                cur = rest
        return cur


def random_module(rng: random.Random, module: str, objects: Mapping[str, int], nprocs: int,
                  remote: list[str]) -> ModuleIR:
    ir = ModuleIR(module, {o: "T" for o in objects})
    names = [f"p{i}" for i in range(nprocs)]
    for i, name in enumerate(names):
        p = ProcedureIR(name)
        entry = BasicBlock("entry")
        p.blocks.append(entry)
        b = _Builder(rng, ir, p, objects, names[i + 1:], remote)
        b.region(entry, 2).term = Ret()
        ir.procedures.append(p)
    validate(ir)
    return ir


def random_app(rng: random.Random, nmodules: int | None = None, schedule_len: int | None = None) -> RandomApp:
    """Up to three modules (M0 weakest) sharing up to three small objects."""
    n = nmodules or rng.randint(2, 3)
    mods = [f"M{i}" for i in range(n)]
    ranks = {m: i for i, m in enumerate(mods)}
    objs = {}
    groups = {}
    for k in range(rng.randint(1, 3)):
        o = f"o{k}"
        members = [m for m in mods if rng.random() < 0.7] or [rng.choice(mods)]
        objs[o] = rng.randint(1, 3)
        groups[o] = members
    descs = []
    for o, members in groups.items():
        owner = min(members, key=ranks.__getitem__)
        descs.append(SharedObjectDescriptor(o, "T", frozenset(members), owner, 4 * objs[o], objs[o]))
    irs = {}
    nprocs = {m: rng.randint(1, 3) for m in mods}
    for i, m in enumerate(mods):
        mine = {o: objs[o] for o in objs if m in groups[o]}
        remote = [f"{mods[j]}.p{k}" for j in range(i + 1, n) for k in range(nprocs[mods[j]])]
        irs[m] = random_module(rng, m, mine, nprocs[m], remote if rng.random() < 0.5 else [])
    order = OwnerOrder(ranks)
    sched = [(m, f"p{rng.randrange(nprocs[m])}")
             for m in (rng.choice(mods) for _ in range(schedule_len or rng.randint(2, 8)))]
    return RandomApp(irs, descs, order, sched)


@dataclass
class Comparison:
    plain: dict
    batched: dict
    reference: dict
    batched_checks: int
    reference_checks: int
    batched_messages: int
    reference_messages: int

    @property
    def equal(self) -> bool:
        return self.plain == self.batched == self.reference


def compare_batching(app: RandomApp, seed: int = 0) -> Comparison:
    """Run the schedule uninstrumented, batched (intra+inter on) and with the
    reference instrumentation; return the three final states."""
    out = {}
    for mode in ("plain", "batched", "reference"):
        if mode == "plain":
            irs = app.irs
        else:
            irs = {m: instrument(ir, analyze_mod_ref(ir), app.descriptors, app.order,
                                 intra=mode == "batched").ir for m, ir in app.irs.items()}
        sysm = SyncSystem(irs, app.descriptors, app.order, seed=seed, plain=mode == "plain")
        for m, p in app.schedule:
            sysm.run(m, p)
        if mode != "plain" and not sysm.quiescent():
            raise HarnessError(f"{mode}: requester still holds an object after the schedule")
        out[mode] = (sysm.final_values(), sum(sysm.stats.checks.values()), sysm.messages)
    return Comparison(out["plain"][0], out["batched"][0], out["reference"][0], out["batched"][1],
                      out["reference"][1], out["batched"][2], out["reference"][2])


def run_instrumented(inst: InstrumentedModuleIR, descriptors, order, proc: str, times: int = 1,
                     seed: int = 0) -> InterpStats:
    """Execute one module's procedure ``times`` times on its own; returns the
    interpreter counters (state checks per site)."""
    sysm = SyncSystem({inst.module: inst.ir}, descriptors, order, seed=seed)
    for _ in range(times):
        sysm.run(inst.module, proc)
    return sysm.stats
