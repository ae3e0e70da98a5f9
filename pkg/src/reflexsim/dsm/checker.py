"""Exhaustive interleaving search for wait-cycles in small applications."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

from .protocol import OwnerOrder, RequestKind, SharedObjectDescriptor
from .world import OwnerAccess, Request, World, WorldApp, compile_procedure, find_cycle, make_descriptors, protocol_ops


@dataclass(frozen=True)
class Safe:
    states: int

    exit_code = 0

    def __str__(self) -> str:
        return f"Safe ({self.states} states explored)"


@dataclass(frozen=True)
class CounterexampleTrace:
    cycle: tuple[str, ...]
    steps: tuple[str, ...]
    states: int

    exit_code = 1

    def render(self) -> str:
        lines = [f"# wait-cycle: {' -> '.join(self.cycle + self.cycle[:1])}"]
        lines.extend(self.steps)
        return "\n".join(lines)

    def __str__(self) -> str:
        return f"Counterexample ({len(self.cycle)}-cycle after {len(self.steps)} steps)"


@dataclass(frozen=True)
class Inconclusive:
    bound: int
    states: int

    exit_code = 2

    def __str__(self) -> str:
        return f"Inconclusive(bound={self.bound}, {self.states} states)"


Verdict = Safe | CounterexampleTrace | Inconclusive


def _trace(app: WorldApp, parents: dict, key) -> tuple[str, ...]:
    # the search stores only labels; replay the path to render it
    labels = []
    while parents[key] is not None:
        key, label = parents[key]
        labels.append(label)
    labels.reverse()
    w = World(app)
    out = []
    for t, label in enumerate(labels):
        for n in w.apply(label):
            out.append(f"{t:4d} {n}")
    return tuple(out)


def _ample(choices: list[tuple]) -> list[tuple]:
    # A program step of a running module only touches that module's state and
    # appends to its outgoing channels, so it commutes with every other
    # enabled transition and can never be disabled by one.
    for c in choices:
        if c[0] == "step":
            return [c]
    return choices


def verify_no_deadlock(app: WorldApp, bound: int = 200, max_states: int = 2_000_000,
                       reduce: bool = False) -> Verdict:
    """Breadth-first search over all interleavings; shortest counterexample first.

    A stuck state (no transition enabled, program not finished) is reported
    with its wait-for cycle. Exceeding ``bound`` steps or ``max_states``
    yields :class:`Inconclusive`. ``reduce`` explores one representative
    order of commuting program steps; stuck states are preserved but the
    reported trace is then no longer guaranteed shortest.
    """
    init = World(app, notes=False)
    k0 = init.key()
    parents: dict = {k0: None}
    frontier = deque([(init, k0, 0)])
    truncated = False
    while frontier:
        w, wk, depth = frontier.popleft()
        choices = w.enabled()
        if not choices:
            if not w.terminal():
                cycle = find_cycle(w.wait_for()) or []
                return CounterexampleTrace(tuple(cycle), _trace(app, parents, wk), len(parents))
            continue
        if depth >= bound or len(parents) >= max_states:
            truncated = True
            continue
        if reduce:
            choices = _ample(choices)
        for label in choices:
            nxt = w.clone(label[1])
            nxt.apply(label)
            k = nxt.key(label[1])
            if k in parents:
                continue
            parents[k] = (wk, label)
            frontier.append((nxt, k, depth + 1))
    if truncated:
        return Inconclusive(bound, len(parents))
    return Safe(len(parents))


def build_app(ranks: Mapping[str, int], groups: Mapping[str, Sequence[str]],
              accesses: Mapping[str, Sequence[tuple[str, bool]]], regulation: bool = True) -> WorldApp:
    descs = make_descriptors(ranks, groups)
    order = OwnerOrder(ranks)
    owner_of = {d.object_id: d.owner for d in descs}
    programs = {m: compile_procedure(m, acc, owner_of, order, regulation) for m, acc in accesses.items()}
    return WorldApp(dict(ranks), descs, programs)


def opposite_order_instance(regulation: bool) -> WorldApp:
    """Two requesters acquiring the same two objects in opposite orders."""
    ranks = {"W": 0, "R1": 1, "R2": 2}
    groups = {"o1": ["W", "R1", "R2"], "o2": ["W", "R1", "R2"]}
    accesses = {"R1": [("o1", True), ("o2", True)], "R2": [("o2", True), ("o1", True)]}
    return build_app(ranks, groups, accesses, regulation)


MEMBER_SETS = [("M0", "M1"), ("M0", "M2"), ("M1", "M2"), ("M0", "M1", "M2")]


@dataclass
class SweepResult:
    instances: int = 0
    checked: int = 0  # distinct searches actually run
    safe: int = 0
    unsafe: list = field(default_factory=list)
    inconclusive: list = field(default_factory=list)
    states: int = 0


def enumerate_instances(max_groups: int = 3, max_objs: int = 2, max_ops: int = 6,
                        regulation: bool = True) -> Iterator[WorldApp]:
    """Every topology of three ranked modules with up to ``max_groups``
    sharing groups of up to ``max_objs`` objects, and every choice of which
    groups each module touches (all writes) in either access order.

    Groups with the same members are taken in non-decreasing size, which
    drops only relabelled duplicates.
    """
    ranks = {"M0": 0, "M1": 1, "M2": 2}
    order = OwnerOrder(ranks)
    for n_groups in range(1, max_groups + 1):
        for member_choice in itertools.combinations_with_replacement(MEMBER_SETS, n_groups):
            for sizes in itertools.product(range(1, max_objs + 1), repeat=n_groups):
                if any(member_choice[i] == member_choice[i + 1] and sizes[i] > sizes[i + 1]
                       for i in range(n_groups - 1)):
                    continue
                groups: dict[str, tuple[str, ...]] = {}
                group_objs: list[list[str]] = []
                for gi, (members, size) in enumerate(zip(member_choice, sizes)):
                    objs = [f"g{gi}o{j}" for j in range(size)]
                    group_objs.append(objs)
                    for o in objs:
                        groups[o] = members
                descs = make_descriptors(ranks, groups)
                owner_of = {d.object_id: d.owner for d in descs}
                per_module: dict[str, list[list[tuple[str, bool]]]] = {}
                for m in ranks:
                    mine = [gi for gi, members in enumerate(member_choice) if m in members]
                    variants: list[list[tuple[str, bool]]] = [[]]
                    for r in range(1, len(mine) + 1):
                        for chosen in itertools.combinations(mine, r):
                            objs = [o for gi in chosen for o in group_objs[gi]]
                            fwd = [(o, True) for o in objs]
                            variants.append(fwd)
                            if len(objs) > 1:
                                variants.append(fwd[::-1])
                    per_module[m] = variants
                for combo in itertools.product(*(per_module[m] for m in ranks)):
                    if sum(1 for acc in combo if acc) < 2:
                        continue
                    programs = {}
                    ok = True
                    for m, acc in zip(ranks, combo):
                        prog = compile_procedure(m, acc, owner_of, order, regulation)
                        if protocol_ops(prog) > max_ops:
                            ok = False
                            break
                        if prog:
                            programs[m] = prog
                    if ok:
                        yield WorldApp(ranks, descs, programs)


def canonical_app(app: WorldApp) -> tuple[tuple, WorldApp]:
    """Reduce an instance to the part that can affect a wait-cycle.

    Local reads and writes never block. An owner access can only stall if
    some program acquires that object, so other owner accesses are dropped,
    and so are group members that never touch an object. Objects are then
    renamed in order of first use, so isomorphic instances share a signature.
    """
    acquired = {o for prog in app.programs.values() for op in prog if isinstance(op, Request)
                for o, k in op.items if k is RequestKind.ACQUIRE}
    owner_of = app.owner_of()
    rename: dict[str, str] = {}
    members: dict[str, set[str]] = {}
    sig = []
    programs = {}
    for m in sorted(app.programs, key=app.ranks.__getitem__):
        ops: list = []
        for op in app.programs[m]:
            if isinstance(op, Request):
                items = tuple((rename.setdefault(o, f"o{len(rename)}"), k) for o, k in op.items)
                ops.append(Request(op.owner, items))
                for o, _ in op.items:
                    members.setdefault(o, {owner_of[o]}).add(m)
            elif isinstance(op, OwnerAccess) and op.obj in acquired:
                ops.append(OwnerAccess(rename.setdefault(op.obj, f"o{len(rename)}")))
        if ops:
            programs[m] = tuple(ops)
            sig.append((m, programs[m]))
    descs = tuple(sorted((SharedObjectDescriptor(new, "int32", frozenset(members[old]), owner_of[old], 4)
                          for old, new in rename.items()), key=lambda d: d.object_id))
    return tuple(sig), WorldApp(dict(app.ranks), descs, programs)


def sweep(instances, bound: int = 200, reduce: bool = True, canonical: bool = True) -> SweepResult:
    """Check every instance; with ``canonical`` each distinct reduced
    instance is searched once and its verdict shared."""
    res = SweepResult()
    cache: dict = {}
    for app in instances:
        if canonical:
            sig, small = canonical_app(app)
            verdict = cache.get(sig)
            if verdict is None:
                verdict = cache[sig] = verify_no_deadlock(small, bound, reduce=reduce)
                res.checked += 1
                res.states += verdict.states
        else:
            verdict = verify_no_deadlock(app, bound, reduce=reduce)
            res.checked += 1
            res.states += verdict.states
        res.instances += 1
        if isinstance(verdict, Safe):
            res.safe += 1
        elif isinstance(verdict, CounterexampleTrace):
            res.unsafe.append((app, verdict))
        else:
            res.inconclusive.append((app, verdict))
    return res
