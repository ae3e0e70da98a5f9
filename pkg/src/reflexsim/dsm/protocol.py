"""Object-granularity coherence protocol with asymmetric owner/requester roles.

The weakest member of a sharing group owns the object and is lazy: it only
answers requests, never issues them. Requesters are eager: they replicate or
acquire before access and release (with the full value) right after.

Every copy lives in a :class:`DsmNode`, one per module. Nodes are plain
state machines; moving batches and responses between them is the caller's
job (the simulator, the exhaustive checker, or a synchronous harness).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence


class DsmError(Exception):
    pass


class ProtocolError(DsmError):
    """Malformed batch or a request the receiving node cannot legally serve."""


class CoherenceViolation(DsmError):
    """A local access that the module's current state does not permit."""


class Role(str, Enum):
    OWNER = "Owner"
    REQUESTER = "Requester"


class CopyState(str, Enum):
    EXCLUSIVE = "Exclusive"
    SHARED = "Shared"
    INVALID = "Invalid"


class RequestKind(str, Enum):
    ACQUIRE = "Acquire"
    RELEASE = "Release"
    REPLICATE = "Replicate"


Value = tuple[int, ...]

_LEGAL = {
    Role.OWNER: {CopyState.EXCLUSIVE, CopyState.INVALID},
    Role.REQUESTER: {CopyState.EXCLUSIVE, CopyState.SHARED},
}


@dataclass(frozen=True)
class SharedObjectDescriptor:
    object_id: str
    type_name: str
    sharing_group: frozenset[str]
    owner: str
    size: int
    fields: int = 1  # number of flattened scalar slots

    def __post_init__(self):
        if self.owner not in self.sharing_group:
            raise DsmError(f"{self.object_id}: owner {self.owner} not in sharing group")

    @property
    def requesters(self) -> list[str]:
        return sorted(self.sharing_group - {self.owner})


class OwnerOrder:
    """Strict total order on modules, weakest first."""

    def __init__(self, ranks: Mapping[str, int]):
        if len(set(ranks.values())) != len(ranks):
            raise DsmError(f"owner order needs unique ranks: {dict(ranks)}")
        self._ranks = dict(ranks)

    def rank(self, module: str) -> int:
        return self._ranks[module]

    def modules(self) -> list[str]:
        return sorted(self._ranks, key=self._ranks.__getitem__)

    def less(self, a: str, b: str) -> bool:
        return self._ranks[a] < self._ranks[b]

    def object_key(self, obj: str, owner_of: Mapping[str, str]) -> tuple[int, str]:
        return (self._ranks[owner_of[obj]], obj)

    def group_by_owner(self, objs: Iterable[str], owner_of: Mapping[str, str]) -> list[tuple[str, list[str]]]:
        """Objects grouped per owner, groups in owner order, objects by id."""
        ordered = sorted(set(objs), key=lambda o: self.object_key(o, owner_of))
        return [(owner, list(group)) for owner, group in itertools.groupby(ordered, key=owner_of.__getitem__)]

    def __repr__(self) -> str:
        return f"OwnerOrder({' < '.join(self.modules())})"


@dataclass(frozen=True)
class DsmRequest:
    kind: RequestKind
    obj: str
    value: Value | None = None


@dataclass(frozen=True)
class DsmRequestBatch:
    batch_id: int
    requester: str
    owner: str
    requests: tuple[DsmRequest, ...]

    def __hash__(self) -> int:
        # state keys hash these repeatedly during exhaustive search
        h = self.__dict__.get("_hash")
        if h is None:
            h = hash((self.batch_id, self.requester, self.owner, self.requests))
            object.__setattr__(self, "_hash", h)
        return h

    @property
    def objects(self) -> tuple[str, ...]:
        return tuple(r.obj for r in self.requests)

    def kinds(self) -> set[RequestKind]:
        return {r.kind for r in self.requests}

    def releases(self, obj: str) -> bool:
        return any(r.kind is RequestKind.RELEASE and r.obj == obj for r in self.requests)


@dataclass(frozen=True)
class DsmResponse:
    batch_id: int
    requester: str
    owner: str
    results: tuple[tuple[str, RequestKind, Value | None], ...]

    def __hash__(self) -> int:
        # state keys hash these repeatedly during exhaustive search
        h = self.__dict__.get("_hash")
        if h is None:
            h = hash((self.batch_id, self.requester, self.owner, self.results))
            object.__setattr__(self, "_hash", h)
        return h


@dataclass
class ObjectCopy:
    obj: str
    owner: str
    role: Role
    state: CopyState
    value: Value

    def __post_init__(self):
        if self.state not in _LEGAL[self.role]:
            raise DsmError(f"{self.obj}: {self.role.value} cannot be {self.state.value}")

    def set_state(self, state: CopyState) -> None:
        if state not in _LEGAL[self.role]:
            raise DsmError(f"{self.obj}: {self.role.value} cannot be {state.value}")
        self.state = state


@dataclass
class DsmNode:
    module: str
    copies: dict[str, ObjectCopy] = field(default_factory=dict)
    pending: list[DsmRequestBatch] = field(default_factory=list)
    _next_batch: int = 0

    @classmethod
    def build(cls, module: str, descriptors: Iterable[SharedObjectDescriptor],
              initial: Mapping[str, Value] | None = None) -> "DsmNode":
        initial = initial or {}
        node = cls(module)
        for d in descriptors:
            if module not in d.sharing_group:
                continue
            value = tuple(initial.get(d.object_id, (0,) * d.fields))
            if d.owner == module:
                node.copies[d.object_id] = ObjectCopy(d.object_id, d.owner, Role.OWNER, CopyState.EXCLUSIVE, value)
            else:
                node.copies[d.object_id] = ObjectCopy(d.object_id, d.owner, Role.REQUESTER, CopyState.SHARED, value)
        return node

    def clone(self) -> "DsmNode":
        node = object.__new__(DsmNode)
        copies = {}
        for k, c in self.copies.items():
            cc = object.__new__(ObjectCopy)
            cc.__dict__.update(c.__dict__)
            copies[k] = cc
        node.__dict__.update(module=self.module, copies=copies, pending=list(self.pending),
                             _next_batch=self._next_batch)
        return node

    def key(self) -> tuple:
        return (tuple((c.state, c.value) for c in self.copies.values()), tuple(self.pending))

    # ---- queries -------------------------------------------------------------

    def role(self, obj: str) -> Role:
        return self._copy(obj).role

    def state(self, obj: str) -> CopyState:
        return self._copy(obj).state

    def is_exclusive(self, obj: str) -> bool:
        return self._copy(obj).state is CopyState.EXCLUSIVE

    def owned(self) -> list[str]:
        return sorted(o for o, c in self.copies.items() if c.role is Role.OWNER)

    def owner_of(self, obj: str) -> str:
        return self._copy(obj).owner

    def _copy(self, obj: str) -> ObjectCopy:
        try:
            return self.copies[obj]
        except KeyError:
            raise DsmError(f"{self.module} is not in the sharing group of {obj}") from None

    # ---- local access --------------------------------------------------------

    def read(self, obj: str, idx: int = 0) -> int:
        c = self._copy(obj)
        if c.state is CopyState.INVALID:
            raise CoherenceViolation(f"{self.module} read {obj} while Invalid")
        return c.value[idx]

    def write(self, obj: str, idx: int, v: int) -> None:
        c = self._copy(obj)
        if c.state is not CopyState.EXCLUSIVE:
            raise CoherenceViolation(f"{self.module} wrote {obj} while {c.state.value}")
        vals = list(c.value)
        vals[idx] = v
        c.value = tuple(vals)

    def value(self, obj: str) -> Value:
        return self._copy(obj).value

    # ---- requester side -----------------------------------------------------

    def request_batch(self, owner: str, items: Sequence[tuple[str, RequestKind]]) -> DsmRequestBatch:
        reqs = []
        for obj, kind in items:
            c = self._copy(obj)
            if c.role is not Role.REQUESTER:
                raise ProtocolError(f"owner {self.module} cannot issue requests for {obj}")
            if c.owner != owner:
                raise ProtocolError(f"{obj} is owned by {c.owner}, not {owner}")
            if kind is RequestKind.RELEASE:
                if c.state is not CopyState.EXCLUSIVE:
                    raise ProtocolError(f"{self.module} releases {obj} without holding it")
                reqs.append(DsmRequest(kind, obj, c.value))
            else:
                reqs.append(DsmRequest(kind, obj))
        if not reqs:
            raise ProtocolError("empty batch")
        if len({r.obj for r in reqs}) != len(reqs):
            raise ProtocolError("duplicate object in batch")
        batch = DsmRequestBatch(self._next_batch, self.module, owner, tuple(reqs))
        self._next_batch += 1
        return batch

    def apply_response(self, batch: DsmRequestBatch, resp: DsmResponse) -> None:
        if resp.batch_id != batch.batch_id or resp.requester != self.module:
            raise ProtocolError(f"response {resp.batch_id} does not match batch {batch.batch_id}")
        for obj, kind, value in resp.results:
            c = self._copy(obj)
            if kind is RequestKind.ACQUIRE:
                c.value = value
                c.set_state(CopyState.EXCLUSIVE)
            elif kind is RequestKind.REPLICATE:
                c.value = value
            else:
                c.set_state(CopyState.SHARED)

    # ---- owner side -----------------------------------------------------------

    def _check_batch(self, batch: DsmRequestBatch) -> None:
        if batch.owner != self.module:
            raise ProtocolError(f"batch for owner {batch.owner} delivered to {self.module}")
        for r in batch.requests:
            c = self.copies.get(r.obj)
            if c is None or c.role is not Role.OWNER:
                raise ProtocolError(f"mixed-owner batch: {self.module} does not own {r.obj}")

    def _satisfiable(self, batch: DsmRequestBatch, blocked: set[str]) -> bool:
        for r in batch.requests:
            if r.kind is RequestKind.RELEASE:
                continue
            if r.obj in blocked or self.copies[r.obj].state is not CopyState.EXCLUSIVE:
                return False
        return True

    def _answer(self, batch: DsmRequestBatch) -> DsmResponse:
        results = []
        for r in batch.requests:
            c = self.copies[r.obj]
            if r.kind is RequestKind.RELEASE:
                results.append((r.obj, r.kind, None))
            else:
                results.append((r.obj, r.kind, c.value))
        # state flips only after every request in the batch has its value
        for r in batch.requests:
            if r.kind is RequestKind.ACQUIRE:
                self.copies[r.obj].set_state(CopyState.INVALID)
        return DsmResponse(batch.batch_id, batch.requester, self.module, tuple(results))

    def _apply_releases(self, batch: DsmRequestBatch) -> None:
        for r in batch.requests:
            if r.kind is RequestKind.RELEASE:
                c = self.copies[r.obj]
                if c.state is not CopyState.INVALID:
                    raise ProtocolError(f"release of {r.obj} while owner is {c.state.value}")
                c.value = r.value
                c.set_state(CopyState.EXCLUSIVE)

    def serve(self, batch: DsmRequestBatch, drain: bool = True) -> list[tuple[DsmRequestBatch, DsmResponse]]:
        """Handle one incoming batch; returns every response now ready to send.

        Releases apply at once. The rest of the batch is answered with a
        single response when all its objects are Exclusive, otherwise the
        batch waits in the pending FIFO. ``drain=False`` applies the batch
        without serving earlier queued work (used by a stalled owner).
        """
        self._check_batch(batch)
        self._apply_releases(batch)
        out = []
        blocked = self._blocked_objects()
        if self._satisfiable(batch, blocked):
            out.append((batch, self._answer(batch)))
        else:
            self.pending.append(batch)
        if drain:
            out.extend(self.drain())
        return out

    def _blocked_objects(self) -> set[str]:
        blocked: set[str] = set()
        for b in self.pending:
            blocked.update(r.obj for r in b.requests if r.kind is not RequestKind.RELEASE)
        return blocked

    def drain(self) -> list[tuple[DsmRequestBatch, DsmResponse]]:
        """Serve pending batches in arrival order; a still-blocked batch keeps
        later batches touching the same objects behind it."""
        out = []
        progress = True
        while progress:
            progress = False
            blocked: set[str] = set()
            for i, b in enumerate(self.pending):
                if self._satisfiable(b, blocked):
                    del self.pending[i]
                    out.append((b, self._answer(b)))
                    progress = True
                    break
                blocked.update(r.obj for r in b.requests if r.kind is not RequestKind.RELEASE)
        return out

    def has_drainable(self) -> bool:
        blocked: set[str] = set()
        for b in self.pending:
            if self._satisfiable(b, blocked):
                return True
            blocked.update(r.obj for r in b.requests if r.kind is not RequestKind.RELEASE)
        return False


def plan_requests(node: DsmNode, wanted: Mapping[str, RequestKind], order: OwnerOrder) -> list[tuple[str, list[tuple[str, RequestKind]]]]:
    """Per-owner request lists for the objects in ``wanted`` that still need a
    message, in owner order. Objects already Exclusive need none."""
    todo = {o: k for o, k in wanted.items() if not node.is_exclusive(o)}
    owner_of = {o: node.owner_of(o) for o in todo}
    return [(owner, [(o, todo[o]) for o in objs]) for owner, objs in order.group_by_owner(todo, owner_of)]
