"""Pre-/post-access insertion with intra- and inter-object batching.

Requester objects: a procedure is one batching block. Its entry acquires
(or replicates) everything the procedure may touch as requester, one
PreAccess per owner in owner order; every exit releases in reverse order.
Blocking points split the block: release before, re-acquire after. A
local call to a transitively blocking procedure counts as a blocking point
so that no frame holds objects while a callee blocks.

Owner objects: one PreAccess per block segment (a block, cut at calls and
blocking points), eliminated when the object was accessed on every path
since the last cut and some strict dominator accesses it.

With intra-object batching off the pass falls back to the reference
scheme: a PreAccess before every access and a PostAccess after every
requester write.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from ..dsm.protocol import OwnerOrder, SharedObjectDescriptor
from .ir import (BasicBlock, Blocking, Call, IRError, ModuleIR, Post, Pre, ProcedureIR, Read, Ret, Stmt, Write,
                 strip as strip_ir)
from .modref import ModRefSummary, analyze_mod_ref

BYTES_PER_SITE = 10


@dataclass
class InstrumentedModuleIR:
    ir: ModuleIR
    original: ModuleIR
    owner_of: dict[str, str]
    order: OwnerOrder
    intra: bool = True
    inter: bool = True
    eliminated: list[tuple[str, str, str, str]] = field(default_factory=list)  # proc, block, obj, dominator

    @property
    def module(self) -> str:
        return self.ir.module

    def sites(self) -> list[Pre | Post]:
        return [s for p in self.ir.procedures for _, _, s in p.statements() if isinstance(s, (Pre, Post))]

    def role(self, obj: str) -> str:
        return "owner" if self.owner_of[obj] == self.ir.module else "requester"


def estimate_footprint(inst: InstrumentedModuleIR, per_site: int = BYTES_PER_SITE) -> tuple[int, int]:
    n = len(inst.sites())
    return n, n * per_site


def strip(inst: InstrumentedModuleIR) -> ModuleIR:
    return strip_ir(inst.ir)


def is_blocking_stmt(s: Stmt, summary: ModRefSummary) -> bool:
    if isinstance(s, Blocking):
        return True
    if isinstance(s, Call):
        return s.remote or summary.blocking[s.target]
    return False


def _is_kill(s: Stmt) -> bool:
    return isinstance(s, (Blocking, Call))


class _Sites:
    def __init__(self, module: str):
        self.module = module
        self.n = 0

    def next(self, proc: str) -> str:
        self.n += 1
        return f"{proc}/{self.n}"


def instrument(ir: ModuleIR, summary: ModRefSummary | None, descriptors: Iterable[SharedObjectDescriptor],
               order: OwnerOrder, intra: bool = True, inter: bool = True) -> InstrumentedModuleIR:
    summary = summary or analyze_mod_ref(ir)
    descs = {d.object_id: d for d in descriptors}
    for obj in ir.shared:
        if obj not in descs:
            raise IRError(f"{ir.module}: no descriptor for shared object {obj!r}")
        if ir.module not in descs[obj].sharing_group:
            raise IRError(f"{ir.module}: not a member of the sharing group of {obj!r}")
    owner_of = {o: descs[o].owner for o in ir.shared}
    out = ir.copy()
    inst = InstrumentedModuleIR(out, ir, owner_of, order, intra, inter)
    sites = _Sites(ir.module)
    for p in out.procedures:
        if intra:
            _batched(p, ir.module, summary, owner_of, order, inter, sites, inst)
        else:
            _reference(p, ir.module, owner_of, sites)
    return inst


# ---- batched scheme -----------------------------------------------------------


def _requester_pres(proc: str, objs: list[str], may_mod, owner_of, order: OwnerOrder, inter: bool,
                    mode: str, sites: _Sites) -> list[Pre]:
    pres = []
    for _, group in order.group_by_owner(objs, owner_of):
        chunks = [group] if inter else [[o] for o in group]
        for chunk in chunks:
            pres.append(Pre(sites.next(proc), mode, tuple((o, may_mod(o)) for o in chunk)))
    return pres


def _requester_posts(proc: str, objs: list[str], owner_of, order: OwnerOrder, inter: bool,
                     mode: str, sites: _Sites) -> list[Post]:
    posts = []
    for _, group in reversed(order.group_by_owner(objs, owner_of)):
        chunks = [group] if inter else [[o] for o in reversed(group)]
        for chunk in chunks:
            posts.append(Post(sites.next(proc), mode, tuple(chunk)))
    return posts


def _batched(p: ProcedureIR, module: str, summary: ModRefSummary, owner_of, order, inter, sites, inst) -> None:
    name = p.name
    accessed = summary.accessed(name)
    req = [o for o in accessed if owner_of[o] != module]
    mine = {o for o in accessed if owner_of[o] == module}
    may_mod = lambda o: summary.may_mod(name, o)
    reach = set(p.reachable())

    # owner availability: accessed since the last kill on every path
    def gen_kill(b: BasicBlock, start: set[str]) -> set[str]:
        cur = set(start)
        for s in b.stmts:
            if _is_kill(s):
                cur = set()
            elif isinstance(s, (Read, Write)) and s.obj in mine:
                cur.add(s.obj)
        return cur

    avail_in = _forward_must(p, gen_kill, mine)
    dom = p.dominators()
    touched = {b.label: {s.obj for s in b.stmts if isinstance(s, (Read, Write)) and s.obj in mine}
               for b in p.blocks}

    for b in p.blocks:
        if b.label not in reach:
            continue
        new: list[Stmt] = []
        if b.label == p.entry and req:
            new += _requester_pres(name, req, may_mod, owner_of, order, inter, "entry", sites)
        seg_start = len(new)
        first = True

        def flush_owner(upto: list[Stmt], seg_stmts: list[Stmt]):
            objs = []
            for s in seg_stmts:
                if isinstance(s, (Read, Write)) and s.obj in mine and s.obj not in objs:
                    objs.append(s.obj)
            keep = []
            for o in objs:
                if first and o in avail_in.get(b.label, set()):
                    d = _dominating_access(b.label, o, dom, touched)
                    if d is not None:
                        inst.eliminated.append((name, b.label, o, d))
                        continue
                keep.append(o)
            if keep:
                writes = {s.obj for s in seg_stmts if isinstance(s, Write)}
                upto.append(Pre(sites.next(name), "owner", tuple((o, o in writes) for o in keep)))

        seg: list[Stmt] = []
        for s in b.stmts:
            if _is_kill(s):
                flush_owner(new, seg)
                new += seg
                seg = []
                first = False
                blocking = is_blocking_stmt(s, summary)
                if blocking and req:
                    new += _requester_posts(name, req, owner_of, order, inter, "split", sites)
                new.append(s)
                if blocking and req:
                    new += _requester_pres(name, req, may_mod, owner_of, order, inter, "split", sites)
            else:
                seg.append(s)
        flush_owner(new, seg)
        new += seg
        if isinstance(b.term, Ret) and req:
            new += _requester_posts(name, req, owner_of, order, inter, "exit", sites)
        b.stmts = new


def _dominating_access(label: str, obj: str, dom, touched) -> str | None:
    for d in sorted(dom.get(label, ()) - {label}):
        if obj in touched[d]:
            return d
    return None


def _forward_must(p: ProcedureIR, transfer, universe: set[str]) -> dict[str, set[str]]:
    labels = p.reachable()
    preds = p.preds()
    out = {b: set(universe) for b in labels}
    inn: dict[str, set[str]] = {}
    changed = True
    while changed:
        changed = False
        for lbl in labels:
            ps = [out[q] for q in preds[lbl] if q in out]
            i = set() if lbl == p.entry else (set.intersection(*ps) if ps else set())
            inn[lbl] = i
            o = transfer(p.block(lbl), i)
            if o != out[lbl]:
                out[lbl] = o
                changed = True
    return inn


# ---- reference scheme -----------------------------------------------------------


def _reference(p: ProcedureIR, module: str, owner_of, sites: _Sites) -> None:
    for b in p.blocks:
        new: list[Stmt] = []
        for s in b.stmts:
            if isinstance(s, (Read, Write)):
                w = isinstance(s, Write)
                new.append(Pre(sites.next(p.name), "ref", ((s.obj, w),)))
                new.append(s)
                if w and owner_of[s.obj] != module:
                    new.append(Post(sites.next(p.name), "ref", (s.obj,)))
            else:
                new.append(s)
        b.stmts = new


# ---- static checks ----------------------------------------------------------------


def ordering_violations(inst: InstrumentedModuleIR) -> list[str]:
    """Runs of consecutive requester PreAccess statements must target owners
    in owner order; runs of PostAccess statements in reverse order."""
    bad = []
    rank = lambda o: inst.order.rank(inst.owner_of[o])
    for p in inst.ir.procedures:
        for b in p.blocks:
            run_kind, last = None, None
            for s in b.stmts:
                if isinstance(s, Pre) and s.mode in ("entry", "split"):
                    ranks = [rank(o) for o in s.objects]
                    if run_kind != "pre":
                        run_kind, last = "pre", None
                    for r in ranks:
                        if last is not None and r < last:
                            bad.append(f"{p.name}/{b.label}: {s.site} acquires out of owner order")
                        last = r
                elif isinstance(s, Post) and s.mode in ("exit", "split"):
                    ranks = [rank(o) for o in s.objs]
                    if run_kind != "post":
                        run_kind, last = "post", None
                    for r in ranks:
                        if last is not None and r > last:
                            bad.append(f"{p.name}/{b.label}: {s.site} releases out of reverse owner order")
                        last = r
                else:
                    run_kind, last = None, None
    return bad


def held_across_blocking(inst: InstrumentedModuleIR, summary: ModRefSummary | None = None) -> list[str]:
    """Blocking points reachable while a requester object may be held
    (may-analysis over every CFG path, fresh per procedure)."""
    summary = summary or analyze_mod_ref(inst.original)
    module = inst.module
    bad = []

    def step(s: Stmt, held: set[str]) -> set[str]:
        if isinstance(s, Pre):
            return held | {o for o, w in s.items if inst.owner_of[o] != module and (w or s.mode != "ref")}
        if isinstance(s, Post):
            return held - set(s.objs)
        return held

    for p in inst.ir.procedures:
        labels = p.reachable()
        preds = p.preds()
        out: dict[str, set[str]] = {b: set() for b in labels}
        changed = True
        while changed:
            changed = False
            for lbl in labels:
                cur = set().union(*(out[q] for q in preds[lbl] if q in out)) if lbl != p.entry else set()
                for s in p.block(lbl).stmts:
                    cur = step(s, cur)
                if cur != out[lbl]:
                    out[lbl] = cur
                    changed = True
        for lbl in labels:
            cur = set().union(*(out[q] for q in preds[lbl] if q in out)) if lbl != p.entry else set()
            for s in p.block(lbl).stmts:
                if is_blocking_stmt(s, summary) and cur:
                    bad.append(f"{p.name}/{lbl}: {sorted(cur)} held across {s}")
                cur = step(s, cur)
    return bad


def unchecked_owner_accesses(inst: InstrumentedModuleIR) -> list[str]:
    """Owner accesses not preceded, on every path since the last call or
    blocking point, by an owner PreAccess or an earlier access."""
    module = inst.module
    bad = []
    for p in inst.ir.procedures:
        mine = {o for o, ow in inst.owner_of.items() if ow == module}

        def transfer(b: BasicBlock, start: set[str], report: bool = False) -> set[str]:
            cur = set(start)
            for s in b.stmts:
                if _is_kill(s):
                    cur = set()
                elif isinstance(s, Pre):
                    cur |= {o for o in s.objects if o in mine}
                elif isinstance(s, (Read, Write)) and s.obj in mine:
                    if report and s.obj not in cur:
                        bad.append(f"{p.name}/{b.label}: unchecked owner access to {s.obj}")
                    cur.add(s.obj)
            return cur

        inn = _forward_must(p, transfer, mine)
        for lbl, i in inn.items():
            transfer(p.block(lbl), i, report=True)
    return bad
