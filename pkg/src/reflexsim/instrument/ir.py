"""A small line-oriented module IR.

Grammar (one item per line, ``#`` starts a comment)::

    module <id> [size <bytes>]
    shared <object> [<type>]
    proc <name>
    block <label>
      read <obj> <idx>              acc += obj[idx]
      write <obj> <idx> <k>         obj[idx] = obj[idx] * 31 + k + acc
      compute <cycles>
      call <proc> | call <module>.<proc>
      blocking <ms>
      send <module> <bytes>
      sense <channel>               acc += sum(sample)
      pre <site> <mode> <obj>:<r|w> ...     (inserted by instrumentation)
      post <site> <mode> <obj> ...          (inserted by instrumentation)
      goto <L> | branch <bit> <Lt> <Lf> | loop <n> <Lbody> <Lexit>
      prob <p> <Lt> <Lf> | ret
    end

Every block ends with exactly one terminator. The first block of a
procedure is its entry. ``loop`` keeps one counter per activation: the
body runs ``n`` times, then control leaves through ``Lexit``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator


class IRError(ValueError):
    pass


# ---- statements ----------------------------------------------------------------


@dataclass(frozen=True)
class Read:
    obj: str
    idx: int = 0


@dataclass(frozen=True)
class Write:
    obj: str
    idx: int = 0
    k: int = 1


@dataclass(frozen=True)
class Compute:
    cycles: int


@dataclass(frozen=True)
class Call:
    target: str  # "proc" (local) or "module.proc" (remote)

    @property
    def remote(self) -> bool:
        return "." in self.target

    @property
    def module(self) -> str | None:
        return self.target.split(".", 1)[0] if self.remote else None

    @property
    def proc(self) -> str:
        return self.target.split(".", 1)[1] if self.remote else self.target


@dataclass(frozen=True)
class Blocking:
    ms: float


@dataclass(frozen=True)
class SendData:
    dst: str
    nbytes: int


@dataclass(frozen=True)
class Sense:
    channel: str


PRE_MODES = ("entry", "split", "owner", "ref")
POST_MODES = ("exit", "split", "ref")


@dataclass(frozen=True)
class Pre:
    site: str
    mode: str
    items: tuple[tuple[str, bool], ...]  # (object, may_write)

    @property
    def objects(self) -> tuple[str, ...]:
        return tuple(o for o, _ in self.items)


@dataclass(frozen=True)
class Post:
    site: str
    mode: str
    objs: tuple[str, ...]


Stmt = Read | Write | Compute | Call | Blocking | SendData | Sense | Pre | Post
INSERTED = (Pre, Post)


# ---- terminators ---------------------------------------------------------------


@dataclass(frozen=True)
class Goto:
    target: str


@dataclass(frozen=True)
class Branch:
    bit: int
    if_true: str
    if_false: str


@dataclass(frozen=True)
class Loop:
    count: int
    body: str
    exit: str


@dataclass(frozen=True)
class Prob:
    p: float
    if_true: str
    if_false: str


@dataclass(frozen=True)
class Ret:
    pass


Term = Goto | Branch | Loop | Prob | Ret


def successors(term: Term) -> tuple[str, ...]:
    if isinstance(term, Goto):
        return (term.target,)
    if isinstance(term, (Branch, Prob)):
        return (term.if_true, term.if_false)
    if isinstance(term, Loop):
        return (term.body, term.exit)
    return ()


# ---- containers ----------------------------------------------------------------


@dataclass
class BasicBlock:
    label: str
    stmts: list[Stmt] = field(default_factory=list)
    term: Term = field(default_factory=Ret)


@dataclass
class ProcedureIR:
    name: str
    blocks: list[BasicBlock] = field(default_factory=list)

    @property
    def entry(self) -> str:
        return self.blocks[0].label

    def block(self, label: str) -> BasicBlock:
        for b in self.blocks:
            if b.label == label:
                return b
        raise IRError(f"{self.name}: no block {label!r}")

    def edges(self) -> dict[str, tuple[str, ...]]:
        return {b.label: successors(b.term) for b in self.blocks}

    def preds(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {b.label: [] for b in self.blocks}
        for b in self.blocks:
            for s in successors(b.term):
                out[s].append(b.label)
        return out

    def reachable(self) -> list[str]:
        seen, stack, order = set(), [self.entry], []
        edges = self.edges()
        while stack:
            b = stack.pop()
            if b in seen:
                continue
            seen.add(b)
            order.append(b)
            stack.extend(reversed(edges[b]))
        return order

    def dominators(self) -> dict[str, set[str]]:
        """Block -> set of blocks dominating it (itself included)."""
        labels = self.reachable()
        preds = self.preds()
        dom = {b: set(labels) for b in labels}
        dom[self.entry] = {self.entry}
        changed = True
        while changed:
            changed = False
            for b in labels:
                if b == self.entry:
                    continue
                ps = [dom[p] for p in preds[b] if p in dom]
                new = set.intersection(*ps) | {b} if ps else {b}
                if new != dom[b]:
                    dom[b] = new
                    changed = True
        return dom

    def statements(self) -> Iterator[tuple[str, int, Stmt]]:
        for b in self.blocks:
            for i, s in enumerate(b.stmts):
                yield b.label, i, s


@dataclass
class ModuleIR:
    module: str
    shared: dict[str, str] = field(default_factory=dict)  # object -> type name
    procedures: list[ProcedureIR] = field(default_factory=list)
    size: int = 0  # declared binary size in bytes (0 = unknown)

    def proc(self, name: str) -> ProcedureIR:
        for p in self.procedures:
            if p.name == name:
                return p
        raise IRError(f"{self.module}: no procedure {name!r}")

    def has_proc(self, name: str) -> bool:
        return any(p.name == name for p in self.procedures)

    def local_callees(self, name: str) -> list[str]:
        out = []
        for _, _, s in self.proc(name).statements():
            if isinstance(s, Call) and not s.remote and s.target not in out:
                out.append(s.target)
        return out

    def call_order(self) -> list[str]:
        """Procedures callees-first; raises on recursion."""
        order: list[str] = []
        state: dict[str, int] = {}

        def visit(n: str, path: tuple[str, ...]):
            if state.get(n) == 2:
                return
            if state.get(n) == 1:
                raise IRError(f"{self.module}: recursion through {' -> '.join(path + (n,))}")
            state[n] = 1
            for c in self.local_callees(n):
                visit(c, path + (n,))
            state[n] = 2
            order.append(n)

        for p in self.procedures:
            visit(p.name, ())
        return order

    def copy(self) -> "ModuleIR":
        return ModuleIR(self.module, dict(self.shared),
                        [ProcedureIR(p.name, [BasicBlock(b.label, list(b.stmts), b.term) for b in p.blocks])
                         for p in self.procedures], self.size)


# ---- validation ------------------------------------------------------------------


def validate(ir: ModuleIR) -> None:
    names = [p.name for p in ir.procedures]
    if len(set(names)) != len(names):
        raise IRError(f"{ir.module}: duplicate procedure names")
    for p in ir.procedures:
        if not p.blocks:
            raise IRError(f"{ir.module}.{p.name}: procedure has no blocks")
        labels = [b.label for b in p.blocks]
        if len(set(labels)) != len(labels):
            raise IRError(f"{ir.module}.{p.name}: duplicate block labels")
        for b in p.blocks:
            for t in successors(b.term):
                if t not in labels:
                    raise IRError(f"{ir.module}.{p.name}: block {b.label} jumps to unknown {t!r}")
            if isinstance(b.term, Loop) and b.term.count < 0:
                raise IRError(f"{ir.module}.{p.name}: negative loop count")
            if isinstance(b.term, Prob) and not 0.0 <= b.term.p <= 1.0:
                raise IRError(f"{ir.module}.{p.name}: probability outside [0, 1]")
            for s in b.stmts:
                for obj in _objects_of(s):
                    if obj not in ir.shared:
                        raise IRError(f"{ir.module}.{p.name}: access to undeclared object {obj!r}")
                if isinstance(s, Call) and not s.remote and not ir.has_proc(s.target):
                    raise IRError(f"{ir.module}.{p.name}: call to unknown procedure {s.target!r}")
    ir.call_order()


def _objects_of(s: Stmt) -> tuple[str, ...]:
    if isinstance(s, (Read, Write)):
        return (s.obj,)
    if isinstance(s, Pre):
        return s.objects
    if isinstance(s, Post):
        return s.objs
    return ()


# ---- text format -------------------------------------------------------------------


def _int(tok: str, line: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise IRError(f"line {line}: expected integer, got {tok!r}") from None


def _num(tok: str, line: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise IRError(f"line {line}: expected number, got {tok!r}") from None


def parse(text: str) -> ModuleIR:
    ir: ModuleIR | None = None
    proc: ProcedureIR | None = None
    block: BasicBlock | None = None
    closed = True  # current block has its terminator
    ended = False
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        op, args = tok[0], tok[1:]
        if ended:
            raise IRError(f"line {n}: content after 'end'")
        if op == "module":
            if ir is not None or not args:
                raise IRError(f"line {n}: bad module header")
            ir = ModuleIR(args[0])
            if len(args) == 3 and args[1] == "size":
                ir.size = _int(args[2], n)
            elif len(args) != 1:
                raise IRError(f"line {n}: bad module header")
            continue
        if ir is None:
            raise IRError(f"line {n}: expected 'module' header first")
        if op == "shared":
            if len(args) not in (1, 2):
                raise IRError(f"line {n}: shared <object> [<type>]")
            ir.shared[args[0]] = args[1] if len(args) == 2 else args[0]
            continue
        if op in ("proc", "end"):
            if block is not None and not closed:
                raise IRError(f"line {n}: block {block.label} lacks a terminator")
            if op == "end":
                ended = True
                continue
            if len(args) != 1:
                raise IRError(f"line {n}: proc <name>")
            proc = ProcedureIR(args[0])
            ir.procedures.append(proc)
            block = None
            continue
        if op == "block":
            if proc is None or len(args) != 1:
                raise IRError(f"line {n}: block outside a procedure")
            if block is not None and not closed:
                raise IRError(f"line {n}: block {block.label} lacks a terminator")
            block = BasicBlock(args[0])
            proc.blocks.append(block)
            closed = False
            continue
        if block is None or closed:
            raise IRError(f"line {n}: statement outside an open block")
        term = _parse_term(op, args, n)
        if term is not None:
            block.term = term
            closed = True
            continue
        block.stmts.append(_parse_stmt(op, args, n))
    if ir is None:
        raise IRError("empty IR")
    if not ended:
        raise IRError("missing 'end'")
    validate(ir)
    return ir


def _arity(args: list[str], k: int, what: str, n: int) -> None:
    if len(args) != k:
        raise IRError(f"line {n}: {what}")


def _parse_term(op: str, args: list[str], n: int) -> Term | None:
    if op == "goto":
        _arity(args, 1, "goto <label>", n)
        return Goto(args[0])
    if op == "branch":
        _arity(args, 3, "branch <bit> <Lt> <Lf>", n)
        return Branch(_int(args[0], n), args[1], args[2])
    if op == "loop":
        _arity(args, 3, "loop <n> <Lbody> <Lexit>", n)
        return Loop(_int(args[0], n), args[1], args[2])
    if op == "prob":
        _arity(args, 3, "prob <p> <Lt> <Lf>", n)
        return Prob(_num(args[0], n), args[1], args[2])
    if op == "ret":
        _arity(args, 0, "ret takes no operands", n)
        return Ret()
    return None


def _parse_stmt(op: str, args: list[str], n: int) -> Stmt:
    if op == "read":
        _arity(args, 2, "read <obj> <idx>", n)
        return Read(args[0], _int(args[1], n))
    if op == "write":
        _arity(args, 3, "write <obj> <idx> <k>", n)
        return Write(args[0], _int(args[1], n), _int(args[2], n))
    if op == "compute":
        _arity(args, 1, "compute <cycles>", n)
        return Compute(_int(args[0], n))
    if op == "call":
        _arity(args, 1, "call <proc>", n)
        return Call(args[0])
    if op == "blocking":
        _arity(args, 1, "blocking <ms>", n)
        return Blocking(_num(args[0], n))
    if op == "send":
        _arity(args, 2, "send <module> <bytes>", n)
        return SendData(args[0], _int(args[1], n))
    if op == "sense":
        _arity(args, 1, "sense <channel>", n)
        return Sense(args[0])
    if op == "pre":
        if len(args) < 3 or args[1] not in PRE_MODES:
            raise IRError(f"line {n}: pre <site> <mode> <obj>:<r|w> ...")
        items = []
        for a in args[2:]:
            obj, _, rw = a.partition(":")
            if rw not in ("r", "w"):
                raise IRError(f"line {n}: pre item {a!r} needs :r or :w")
            items.append((obj, rw == "w"))
        return Pre(args[0], args[1], tuple(items))
    if op == "post":
        if len(args) < 3 or args[1] not in POST_MODES:
            raise IRError(f"line {n}: post <site> <mode> <obj> ...")
        return Post(args[0], args[1], tuple(args[2:]))
    raise IRError(f"line {n}: unknown statement {op!r}")


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def format_stmt(s: Stmt) -> str:
    if isinstance(s, Read):
        return f"read {s.obj} {s.idx}"
    if isinstance(s, Write):
        return f"write {s.obj} {s.idx} {s.k}"
    if isinstance(s, Compute):
        return f"compute {s.cycles}"
    if isinstance(s, Call):
        return f"call {s.target}"
    if isinstance(s, Blocking):
        return f"blocking {_fmt_num(s.ms)}"
    if isinstance(s, SendData):
        return f"send {s.dst} {s.nbytes}"
    if isinstance(s, Sense):
        return f"sense {s.channel}"
    if isinstance(s, Pre):
        return f"pre {s.site} {s.mode} " + " ".join(f"{o}:{'w' if w else 'r'}" for o, w in s.items)
    if isinstance(s, Post):
        return f"post {s.site} {s.mode} " + " ".join(s.objs)
    raise IRError(f"cannot format {s!r}")


def format_term(t: Term) -> str:
    if isinstance(t, Goto):
        return f"goto {t.target}"
    if isinstance(t, Branch):
        return f"branch {t.bit} {t.if_true} {t.if_false}"
    if isinstance(t, Loop):
        return f"loop {t.count} {t.body} {t.exit}"
    if isinstance(t, Prob):
        return f"prob {_fmt_num(t.p)} {t.if_true} {t.if_false}"
    return "ret"


def dump(ir: ModuleIR) -> str:
    head = f"module {ir.module}" + (f" size {ir.size}" if ir.size else "")
    lines = [head]
    for obj, ty in ir.shared.items():
        lines.append(f"shared {obj}" + (f" {ty}" if ty != obj else ""))
    for p in ir.procedures:
        lines.append(f"proc {p.name}")
        for b in p.blocks:
            lines.append(f"block {b.label}")
            lines.extend("  " + format_stmt(s) for s in b.stmts)
            lines.append("  " + format_term(b.term))
    lines.append("end")
    return "\n".join(lines) + "\n"


def strip(ir: ModuleIR) -> ModuleIR:
    """The IR with every inserted pre/post statement removed."""
    out = ir.copy()
    for p in out.procedures:
        for b in p.blocks:
            b.stmts = [s for s in b.stmts if not isinstance(s, INSERTED)]
    return out


def same_program(a: ModuleIR, b: ModuleIR) -> bool:
    return dump(a) == dump(b)
