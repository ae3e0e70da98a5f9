"""Must/May Mod/Ref summaries over the module IR.

Objects are named entities, so alias analysis reduces to collecting the
declared accesses and asking whether an access happens on every path
(Must) or only on some (May). Local calls contribute their callee's
procedure summary; remote calls touch only the callee's own copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .ir import BasicBlock, Blocking, Call, IRError, ModuleIR, ProcedureIR, Read, Ret, Write, validate


class Access(str, Enum):
    MUST_MOD = "MustMod"
    MAY_MOD = "MayMod"
    MUST_REF = "MustRef"
    MAY_REF = "MayRef"
    NEVER = "Never"


NEVER = frozenset({Access.NEVER})


def flags(must_mod: bool, may_mod: bool, must_ref: bool, may_ref: bool) -> frozenset[Access]:
    out = set()
    if must_mod or may_mod:
        out.add(Access.MAY_MOD)
    if must_mod:
        out.add(Access.MUST_MOD)
    if must_ref or may_ref:
        out.add(Access.MAY_REF)
    if must_ref:
        out.add(Access.MUST_REF)
    return frozenset(out) or NEVER


@dataclass
class _Sets:
    must_mod: set[str] = field(default_factory=set)
    may_mod: set[str] = field(default_factory=set)
    must_ref: set[str] = field(default_factory=set)
    may_ref: set[str] = field(default_factory=set)

    def as_flags(self, objs) -> dict[str, frozenset[Access]]:
        return {o: flags(o in self.must_mod, o in self.may_mod, o in self.must_ref, o in self.may_ref)
                for o in objs}


@dataclass
class ModRefSummary:
    objects: tuple[str, ...]
    blocks: dict[tuple[str, str], dict[str, frozenset[Access]]]
    procs: dict[str, dict[str, frozenset[Access]]]
    blocking: dict[str, bool]  # procedure (transitively) contains a blocking point

    def block(self, proc: str, label: str, obj: str) -> frozenset[Access]:
        return self.blocks[(proc, label)].get(obj, NEVER)

    def proc(self, proc: str, obj: str) -> frozenset[Access]:
        return self.procs[proc].get(obj, NEVER)

    def accessed(self, proc: str) -> list[str]:
        """Objects the procedure may touch, in declaration order."""
        return [o for o in self.objects if self.proc(proc, o) != NEVER]

    def may_mod(self, proc: str, obj: str) -> bool:
        return Access.MAY_MOD in self.proc(proc, obj)


def _block_sets(b: BasicBlock, procs: dict[str, _Sets]) -> _Sets:
    s = _Sets()
    for st in b.stmts:
        if isinstance(st, Write):
            s.must_mod.add(st.obj)
        elif isinstance(st, Read):
            s.must_ref.add(st.obj)
        elif isinstance(st, Call) and not st.remote:
            c = procs[st.target]
            s.must_mod |= c.must_mod
            s.may_mod |= c.may_mod
            s.must_ref |= c.must_ref
            s.may_ref |= c.may_ref
    s.may_mod |= s.must_mod
    s.may_ref |= s.must_ref
    return s


def must_available(p: ProcedureIR, gen: dict[str, set[str]]) -> tuple[dict[str, set[str]], dict[str, set[str]]]:
    """Forward all-paths analysis: objects surely generated before entering
    (IN) and after leaving (OUT) each reachable block."""
    labels = p.reachable()
    preds = p.preds()
    universe = set().union(*gen.values()) if gen else set()
    out = {b: set(universe) for b in labels}
    inn: dict[str, set[str]] = {}
    changed = True
    while changed:
        changed = False
        for b in labels:
            ps = [out[q] for q in preds[b] if q in out]
            i = set() if b == p.entry else (set.intersection(*ps) if ps else set())
            o = i | gen[b]
            inn[b] = i
            if o != out[b]:
                out[b] = o
                changed = True
    return inn, out


def analyze_mod_ref(ir: ModuleIR) -> ModRefSummary:
    validate(ir)
    procs: dict[str, _Sets] = {}
    blocks: dict[tuple[str, str], dict[str, frozenset[Access]]] = {}
    blocking: dict[str, bool] = {}
    for name in ir.call_order():
        p = ir.proc(name)
        per_block = {b.label: _block_sets(b, procs) for b in p.blocks}
        reach = p.reachable()
        exits = [b for b in reach if isinstance(p.block(b).term, Ret)]
        if not exits:
            raise IRError(f"{ir.module}.{name}: no reachable exit")
        _, mod_out = must_available(p, {b: per_block[b].must_mod for b in reach})
        _, ref_out = must_available(p, {b: per_block[b].must_ref for b in reach})
        ps = _Sets(
            must_mod=set.intersection(*(mod_out[b] for b in exits)),
            must_ref=set.intersection(*(ref_out[b] for b in exits)),
        )
        for b in reach:
            ps.may_mod |= per_block[b].may_mod
            ps.may_ref |= per_block[b].may_ref
        ps.may_mod |= ps.must_mod
        ps.may_ref |= ps.must_ref
        procs[name] = ps
        for b in p.blocks:
            blocks[(name, b.label)] = per_block[b.label].as_flags(ir.shared)
        blocking[name] = any(
            isinstance(s, Blocking) or (isinstance(s, Call) and (s.remote or blocking[s.target]))
            for lbl in reach for s in p.block(lbl).stmts)
    objs = tuple(ir.shared)
    return ModRefSummary(objs, blocks, {n: s.as_flags(objs) for n, s in procs.items()}, blocking)
