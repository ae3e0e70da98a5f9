"""Module runtime: poll-based event loop, peripheral services, resource monitoring.

Handlers are Python callables ``handler(ctx, event)``. A handler may return
a generator that yields the operations below; the runtime performs each one
and sends its result back into the generator. Handlers run to completion
(atomically) except where an operation stalls the module waiting for a
message.
"""

from __future__ import annotations

import inspect
import math
import random
import struct
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterator, Mapping, Sequence

from .dsm.protocol import (DsmNode, DsmRequestBatch, DsmResponse, OwnerOrder, RequestKind, Role,
                           SharedObjectDescriptor, plan_requests)
from .platform import Platform, PowerStateTimeline, VirtualClock, message_latency
from .transport import Event, EventKind, EventQueue, Message, MessageKind, Scheduler, Transport


class ReflexRuntimeError(Exception):
    pass


class StallTimeout(ReflexRuntimeError):
    pass


class ModuleKind(str, Enum):
    CENTRAL = "Central"
    PERIPHERAL = "Peripheral"


# ---- handler operations --------------------------------------------------------


@dataclass(frozen=True)
class Compute:
    cycles: float


@dataclass(frozen=True)
class Send:
    dst: str
    payload: bytes = b""
    body: Any = None


@dataclass(frozen=True)
class Call:
    """Remote procedure call; the result is the callee's return value."""

    dst: str
    proc: str
    payload: bytes = b""
    body: Any = None


@dataclass(frozen=True)
class Block:
    """A blocking primitive (e.g. waiting on a device) lasting ``ms``."""

    ms: float


@dataclass(frozen=True)
class PreAccess:
    """State check before accessing shared objects; ``items`` are
    ``(object, may_write)``. Returns the objects acquired by this check."""

    items: tuple[tuple[str, bool], ...]
    site: str = ""


@dataclass(frozen=True)
class PostAccess:
    objs: tuple[str, ...]
    site: str = ""


@dataclass(frozen=True)
class _Respond:
    pairs: tuple


@dataclass(frozen=True)
class _Return:
    dst: str
    call_id: tuple
    result: Any


TIMEOUT = object()


@dataclass
class _Wait:
    kind: str  # response | release | rpc | sleep
    match: Callable[[Message], bool] | None = None
    ms: float = 0.0
    since: float = 0.0
    token: int = 0


# ---- services ------------------------------------------------------------------


@dataclass
class TimerRegistration:
    interval: float
    timer_id: str
    start: float

    def fire_time(self, k: int) -> float:
        return self.start + k * self.interval


@dataclass
class MemoryAccount:
    budget: int
    allocated: int = 0
    peak: int = 0
    _live: dict[int, int] = field(default_factory=dict)
    _freed: set[int] = field(default_factory=set)
    _next: int = 1

    def malloc(self, size: int) -> int | None:
        if size <= 0:
            raise ValueError("allocation size must be positive")
        if self.allocated + size > self.budget:
            return None
        h = self._next
        self._next += 1
        self._live[h] = size
        self.allocated += size
        self.peak = max(self.peak, self.allocated)
        return h

    def free(self, handle: int) -> None:
        if handle in self._freed:
            raise ReflexRuntimeError(f"double free of handle {handle}")
        if handle not in self._live:
            raise ReflexRuntimeError(f"free of unknown handle {handle}")
        self.allocated -= self._live.pop(handle)
        self._freed.add(handle)

    def leaked(self) -> dict[int, int]:
        return dict(self._live)


@dataclass
class UsageCounters:
    processor_cycles: float = 0.0
    messages_sent: int = 0
    messages_received: int = 0
    messages_dropped: int = 0
    peak_queue_depth: int = 0
    peak_allocated: int = 0

    def merge(self, other: "UsageCounters") -> "UsageCounters":
        return UsageCounters(self.processor_cycles + other.processor_cycles,
                             self.messages_sent + other.messages_sent,
                             self.messages_received + other.messages_received,
                             self.messages_dropped + other.messages_dropped,
                             max(self.peak_queue_depth, other.peak_queue_depth),
                             max(self.peak_allocated, other.peak_allocated))


class ExceptionKind(str, Enum):
    TIME = "TimeException"
    MEM = "MemException"


@dataclass(frozen=True)
class ResourceException:
    kind: ExceptionKind
    module: str
    detail: str
    time: float


# ---- sensors ---------------------------------------------------------------------


class ConstantTrace:
    def __init__(self, values: Sequence[int]):
        self.values = tuple(int(v) for v in values)

    def __call__(self, t: float) -> tuple[int, ...]:
        return self.values


class SinusoidTrace:
    def __init__(self, amplitude: float, period_ms: float, offset: float = 0.0, axes: int = 3,
                 phase_step: float = 0.25):
        self.amplitude, self.period_ms, self.offset = amplitude, period_ms, offset
        self.axes, self.phase_step = axes, phase_step

    def __call__(self, t: float) -> tuple[int, ...]:
        w = 2 * math.pi * t / self.period_ms
        return tuple(int(round(self.offset + self.amplitude * math.sin(w + i * self.phase_step * 2 * math.pi)))
                     for i in range(self.axes))


class PlaybackTrace:
    """Rows of a recorded trace, one per ``1000 / rate_hz`` ms, looping."""

    def __init__(self, rows: Sequence[Sequence[int]], rate_hz: float):
        if not rows:
            raise ValueError("playback trace needs at least one row")
        self.rows = [tuple(int(v) for v in r) for r in rows]
        self.period = 1000.0 / rate_hz

    @classmethod
    def from_csv(cls, path: str, rate_hz: float) -> "PlaybackTrace":
        import csv
        with open(path, newline="") as fh:
            rows = [[int(float(x)) for x in row] for row in csv.reader(fh) if row and not row[0].startswith("#")]
        return cls(rows, rate_hz)

    def __call__(self, t: float) -> tuple[int, ...]:
        return self.rows[int(t // self.period) % len(self.rows)]


@dataclass
class SensorChannel:
    """A sensor bound to one processor.

    ``bus`` sensors sit on the shared serial bus, so every sample costs a
    bus transaction on the reading processor; others are local (ADC) and
    cost ``read_cycles``.
    """

    name: str
    processor: str
    trace: Callable[[float], tuple[int, ...]]
    sample_bytes: int = 6
    read_cycles: int = 200
    bus: bool = False


# ---- modules -----------------------------------------------------------------------

IDLE, RUNNING, STALLED, TERMINATED = "idle", "running", "stalled", "terminated"
SERVING_WAITS = ("response", "rpc", "sleep")

Handler = Callable[["ModuleContext", Event | None], Any]


@dataclass
class ModuleSpec:
    id: str
    processor: str
    kind: ModuleKind = ModuleKind.PERIPHERAL
    handlers: Mapping[str, Handler] = field(default_factory=dict)  # OnCreate/OnData/OnTimer/OnMessage
    procs: Mapping[str, Handler] = field(default_factory=dict)     # RPC entry points
    memory_budget: int = 4096
    queue_capacity: int = 16


@dataclass(frozen=True)
class RequesterSample:
    module: str
    owner: str
    kinds: tuple[str, ...]
    t_send: float
    t_owner_arrive: float
    t_response_send: float
    t_response_arrive: float

    @property
    def transport_out(self) -> float:
        return self.t_owner_arrive - self.t_send

    @property
    def lazy(self) -> float:
        return self.t_response_send - self.t_owner_arrive

    @property
    def transport_back(self) -> float:
        return self.t_response_arrive - self.t_response_send

    @property
    def latency(self) -> float:
        return self.t_response_arrive - self.t_send

    @property
    def is_release(self) -> bool:
        return self.kinds == (RequestKind.RELEASE.value,)


@dataclass(frozen=True)
class OwnerStall:
    module: str
    obj: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


class Module:
    def __init__(self, spec: ModuleSpec, launch_index: int, rng: random.Random):
        self.spec = spec
        self.id = spec.id
        self.proc = spec.processor
        self.launch_index = launch_index
        self.rng = rng
        self.queue = EventQueue(spec.queue_capacity)
        self.memory = MemoryAccount(spec.memory_budget)
        self.counters = UsageCounters()
        self.state = IDLE
        self.driver: Iterator | None = None
        self.wait: _Wait | None = None
        self.t = 0.0
        self.dsm: DsmNode | None = None
        self.timers: dict[str, TimerRegistration] = {}
        self.time_latched = False
        self.busy_ms = 0.0
        self.stall_ms = 0.0
        self.owner_stall_ms = 0.0
        self.state_check_cycles = 0.0
        self.handler_intervals: list[tuple[float, float]] = []
        self.created = False
        self._seg_start = 0.0

    def role(self, obj: str) -> Role:
        return self.dsm.role(obj)


class ModuleContext:
    """What a handler sees: local shared copies and synchronous services."""

    def __init__(self, sim: "Simulator", module: Module):
        self._sim = sim
        self._m = module

    @property
    def module(self) -> str:
        return self._m.id

    @property
    def now(self) -> float:
        return self._m.t

    @property
    def rng(self) -> random.Random:
        return self._m.rng

    # shared objects (the local copy; coherence is the instrumentation's job)
    def read(self, obj: str, idx: int = 0) -> int:
        return self._m.dsm.read(obj, idx)

    def write(self, obj: str, idx: int, value: int) -> None:
        self._m.dsm.write(obj, idx, value)

    def value(self, obj: str) -> tuple[int, ...]:
        return self._m.dsm.value(obj)

    def get_sensor_data(self, channel: str) -> tuple[int, ...]:
        return self._sim.get_sensor_data(self._m, channel)

    def subscribe_sensor(self, channel: str, rate_hz: float) -> None:
        self._sim.subscribe_sensor(self._m.id, channel, rate_hz)

    def register_timer(self, interval: float, timer_id: str) -> TimerRegistration:
        return self._sim.register_timer(self._m.id, interval, timer_id)

    def malloc(self, size: int) -> int | None:
        return self._sim.mod_malloc(self._m.id, size)

    def free(self, handle: int) -> None:
        self._sim.mod_free(self._m.id, handle)


@dataclass
class Processor:
    id: str
    running: Module | None = None
    free_at: float = 0.0
    ready: deque = field(default_factory=deque)


POLICIES = ("report", "terminate-most-recent", "terminate-top-cpu")


@dataclass
class RuntimeConfig:
    state_check_cycles: int = 8     # per object per PreAccess
    dsm_serve_cycles: int = 300     # owner-side bookkeeping per served batch
    stall_timeout: float | None = None
    policy: str = "report"
    time_threshold: float = 0.9

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ReflexRuntimeError(f"unknown exception policy {self.policy!r}; choose from {POLICIES}")


class Simulator:
    def __init__(self, platform: Platform, seed: int = 0, config: RuntimeConfig | None = None):
        self.platform = platform
        self.config = config or RuntimeConfig()
        self.seed = seed
        self.clock = VirtualClock()
        self.scheduler = Scheduler(self.clock)
        self.timeline = PowerStateTimeline(p.id for p in platform.processors)
        self.transport = Transport(platform, self.scheduler, self.timeline, self._deliver)
        self.procs = {p.id: Processor(p.id) for p in platform.processors}
        self.modules: dict[str, Module] = {}
        self.channels: dict[str, SensorChannel] = {}
        self.order: OwnerOrder | None = None
        self.descriptors: dict[str, SharedObjectDescriptor] = {}
        self._obj_index: dict[str, int] = {}
        self.exceptions: list[ResourceException] = []
        self.terminated: list[str] = []
        self.timeouts: list[dict] = []
        self.requester_samples: list[RequesterSample] = []
        self.owner_stalls: list[OwnerStall] = []
        self.state_checks: Counter = Counter()
        self.unhandled: Counter = Counter()
        self.drops: Counter = Counter()  # by reason
        self.discarded = 0
        self.poll_log: list[tuple[float, str, str, bool]] = []  # (t, module, kind, priority-pending)
        self._open: dict[tuple[str, int], list] = {}
        self._call_ids = 0
        self._wait_tokens = 0
        self._started = False

    # ---- setup -------------------------------------------------------------------

    def add_sensor(self, channel: SensorChannel) -> None:
        if channel.name in self.channels:
            raise ReflexRuntimeError(f"sensor channel {channel.name!r} bound twice")
        self.platform.spec(channel.processor)
        self.channels[channel.name] = channel

    def add_module(self, spec: ModuleSpec) -> Module:
        if spec.id in self.modules:
            raise ReflexRuntimeError(f"duplicate module {spec.id!r}")
        if spec.kind is ModuleKind.CENTRAL:
            if any(m.spec.kind is ModuleKind.CENTRAL for m in self.modules.values()):
                raise ReflexRuntimeError("an application has exactly one central module")
            if spec.processor != self.platform.central:
                raise ReflexRuntimeError("the central module must run on the central processor")
        rng = random.Random(f"{self.seed}/{spec.id}")
        m = Module(spec, len(self.modules), rng)
        self.modules[spec.id] = m
        self.transport.register_module(spec.id, spec.processor, self.clock.now)
        return m

    def configure_dsm(self, descriptors: Sequence[SharedObjectDescriptor], ranks: Mapping[str, int],
                      initial: Mapping[str, tuple[int, ...]] | None = None) -> None:
        self.order = OwnerOrder(ranks)
        self.descriptors = {d.object_id: d for d in descriptors}
        self._obj_index = {d.object_id: i for i, d in enumerate(sorted(self.descriptors.values(),
                                                                        key=lambda d: d.object_id))}
        for m in self.modules.values():
            m.dsm = DsmNode.build(m.id, descriptors, initial)

    def start(self) -> None:
        """Boot: let location updates settle, then run every OnCreate."""
        if self._started:
            return
        self._started = True
        for m in self.modules.values():
            if m.dsm is None:
                m.dsm = DsmNode(m.id)
        boot = max(self.transport.location_quiescent_at, self.clock.now)
        for m in self.modules.values():
            self.scheduler.at(boot, self._create, m)

    def run(self, until: float) -> None:
        self.start()
        self.scheduler.run_until(until)

    @property
    def now(self) -> float:
        return self.clock.now

    # ---- scheduling core -----------------------------------------------------

    def _create(self, m: Module) -> None:
        if m.state == TERMINATED:
            return
        proc = self.procs[m.proc]
        if self.clock.now < proc.free_at:
            self.scheduler.at(proc.free_at, self._create, m)
            return
        h = m.spec.handlers.get("OnCreate")
        m.created = True
        if h is None:
            self._kick(m.proc)
            return
        self._start_handler(m, lambda ctx: h(ctx, None))

    def _kick_at(self, proc: str, t: float) -> None:
        self.scheduler.at(max(t, self.clock.now), self._kick, proc)

    def _kick(self, proc_id: str) -> None:
        proc = self.procs[proc_id]
        if proc.running is not None or self.clock.now < proc.free_at:
            if proc.running is None:
                self._kick_at(proc_id, proc.free_at)
            return
        while proc.ready:
            m, value = proc.ready.popleft()
            if m.state == STALLED and m.wait is None:
                self._resume(m, value)
                return
        for m in sorted(self.modules.values(), key=lambda x: x.launch_index):
            if m.proc == proc_id and m.state == IDLE and m.created and len(m.queue):
                ev = self.poll(m)
                self._monitor_tick(m)
                self._dispatch(m, ev)
                return

    def poll(self, m: Module) -> Event | None:
        pending = any(e.kind in (EventKind.SENSOR_DATA, EventKind.TIMER) for e in m.queue)
        ev = m.queue.poll()
        if ev is not None:
            kind = ev.body.kind.value if ev.kind is EventKind.INCOMING_MESSAGE else ev.kind.value
            self.poll_log.append((self.clock.now, m.id, kind, pending))
        return ev

    def _dispatch(self, m: Module, ev: Event) -> None:
        if ev.kind is EventKind.INCOMING_MESSAGE:
            msg: Message = ev.body
            if msg.kind is MessageKind.DSM_REQUEST:
                self._start_handler(m, lambda ctx: self._serve_handler(m, msg))
                return
            if msg.kind in (MessageKind.DSM_RESPONSE, MessageKind.RPC_RETURN):
                # answer to a wait that already timed out
                self.unhandled[(m.id, "stale-" + msg.kind.value)] += 1
                self._kick(m.proc)
                return
            if msg.kind is MessageKind.RPC_CALL:
                cid, pname, body = msg.body
                h = m.spec.procs.get(pname)
                if h is None:
                    self.unhandled[(m.id, f"rpc:{pname}")] += 1
                    self._kick(m.proc)
                    return
                self._start_handler(m, lambda ctx: self._rpc_handler(m, msg, h(ctx, body)))
                return
            name = "OnMessage"
        elif ev.kind is EventKind.SENSOR_DATA:
            name = "OnData"
            specific = f"OnData:{ev.body[0]}"
        elif ev.kind is EventKind.TIMER:
            name = "OnTimer"
            specific = f"OnTimer:{ev.body}"
        else:
            name = "OnException"
        h = m.spec.handlers.get(specific) if ev.kind in (EventKind.SENSOR_DATA, EventKind.TIMER) else None
        h = h or m.spec.handlers.get(name)
        if h is None:
            self.unhandled[(m.id, ev.kind.value)] += 1
            self._kick(m.proc)
            return
        self._start_handler(m, lambda ctx: h(ctx, ev))

    def _start_handler(self, m: Module, make: Callable[["ModuleContext"], Any]) -> None:
        proc = self.procs[m.proc]
        m.state = RUNNING
        proc.running = m
        m.t = self.clock.now
        m._seg_start = m.t
        ctx = ModuleContext(self, m)
        try:
            res = make(ctx)
        except Exception:
            self._finish(m)
            raise
        if not inspect.isgenerator(res):
            def _empty():
                return res
                yield  # pragma: no cover
            res = _empty()
        m.driver = self._drive(m, res)
        self._step(m, None)

    def _drive(self, m: Module, gen: Iterator):
        value = None
        try:
            while True:
                try:
                    op = gen.send(value)
                except StopIteration as stop:
                    return stop.value
                value = yield from self._perform(m, op)
        finally:
            gen.close()

    def _step(self, m: Module, value: Any) -> None:
        try:
            w = m.driver.send(value)
        except StopIteration:
            self._finish(m)
            return
        except StallTimeout:
            self._finish(m)
            return
        # stalled: give the processor up at the module's local time
        proc = self.procs[m.proc]
        m.handler_intervals.append((m._seg_start, m.t))
        m.state = STALLED
        proc.running = None
        proc.free_at = m.t
        self._wait_tokens += 1
        w.since, w.token = m.t, self._wait_tokens
        m.wait = w
        if w.kind in SERVING_WAITS:
            self._serve_queued_requests(m)
        if w.kind == "sleep":
            self.scheduler.at(m.t + w.ms, self._wake, m, w.token)
        else:
            if self.config.stall_timeout is not None:
                self.scheduler.at(m.t + self.config.stall_timeout, self._timeout, m, w.token)
            ev = m.queue.take(lambda e: e.kind is EventKind.INCOMING_MESSAGE and w.match(e.body))
            if ev is not None:
                self._satisfy(m, ev.body, ev.enqueue_time)
        self._kick_at(m.proc, m.t)

    def _satisfy(self, m: Module, value: Any, t: float) -> None:
        w = m.wait
        m.wait = None
        resume = max(t, w.since)
        m.stall_ms += resume - w.since
        self.scheduler.at(max(resume, self.clock.now), self._ready, m, value, resume)

    def _ready(self, m: Module, value: Any, resume: float) -> None:
        if m.state != STALLED:
            return
        proc = self.procs[m.proc]
        proc.ready.append((m, (value, resume)))
        self._kick(m.proc)

    def _resume(self, m: Module, payload: tuple) -> None:
        value, resume = payload
        proc = self.procs[m.proc]
        m.state = RUNNING
        proc.running = m
        m.t = max(resume, self.clock.now)
        m._seg_start = m.t
        self._step(m, value)

    def _wake(self, m: Module, token: int) -> None:
        if m.wait is not None and m.wait.token == token:
            self._satisfy(m, None, self.clock.now)

    def _timeout(self, m: Module, token: int) -> None:
        if m.wait is None or m.wait.token != token or m.state != STALLED:
            return
        self.timeouts.append({"module": m.id, "kind": m.wait.kind, "since": m.wait.since,
                              "time": self.clock.now})
        self._satisfy(m, TIMEOUT, self.clock.now)

    def _finish(self, m: Module) -> None:
        proc = self.procs[m.proc]
        m.handler_intervals.append((m._seg_start, m.t))
        m.driver = None
        if m.state != TERMINATED:
            m.state = IDLE
        if proc.running is m:
            proc.running = None
        proc.free_at = max(proc.free_at, m.t)
        # a stalled owner applied releases without serving its queue; do it now
        if m.dsm is not None and m.dsm.pending and m.state != TERMINATED:
            self._send_responses(m, m.dsm.drain())
        self._monitor_tick(m)
        self._kick_at(m.proc, m.t)

    # ---- time accounting --------------------------------------------------------

    def _busy_cycles(self, m: Module, cycles: float) -> None:
        spec = self.platform.spec(m.proc)
        ms = spec.cycles_to_ms(cycles)
        self.timeline.mark_active(m.proc, m.t, m.t + ms)
        m.t += ms
        m.busy_ms += ms
        m.counters.processor_cycles += cycles

    def _busy_ms(self, m: Module, ms: float) -> None:
        self.timeline.mark_active(m.proc, m.t, m.t + ms)
        m.t += ms
        m.busy_ms += ms
        m.counters.processor_cycles += ms * self.platform.spec(m.proc).clock_rate / 1000.0

    def _send(self, m: Module, msg: Message):
        rec = self.transport.send(msg, m.t, src_proc=m.proc)
        spec = self.platform.spec(m.proc)
        send_ms = spec.cycles_to_ms(spec.msg_send_cycles)
        m.t += send_ms
        m.busy_ms += send_ms
        m.counters.processor_cycles += spec.msg_send_cycles
        m.counters.messages_sent += 1
        return rec

    # ---- operations ---------------------------------------------------------------

    def _perform(self, m: Module, op):
        if isinstance(op, Compute):
            if op.cycles < 0:
                raise ReflexRuntimeError("negative compute")
            self._busy_cycles(m, op.cycles)
            return None
        if isinstance(op, Send):
            self._send(m, Message(m.id, op.dst, MessageKind.APP_DATA, op.payload, op.body))
            return None
        if isinstance(op, Call):
            self._call_ids += 1
            cid = (m.id, self._call_ids)
            self._send(m, Message(m.id, op.dst, MessageKind.RPC_CALL, op.payload, (cid, op.proc, op.body)))
            msg = yield _Wait("rpc", lambda x: x.kind is MessageKind.RPC_RETURN and x.body[0] == cid)
            if msg is TIMEOUT:
                return None
            return msg.body[1]
        if isinstance(op, Block):
            yield _Wait("sleep", ms=op.ms)
            return None
        if isinstance(op, PreAccess):
            return (yield from self._pre_access(m, op))
        if isinstance(op, PostAccess):
            return (yield from self._post_access(m, op))
        if isinstance(op, _Respond):
            self._send_responses(m, op.pairs)
            return None
        if isinstance(op, _Return):
            payload = op.result if isinstance(op.result, bytes) else b""
            self._send(m, Message(m.id, op.dst, MessageKind.RPC_RETURN, payload, (op.call_id, op.result)))
            return None
        raise ReflexRuntimeError(f"unknown handler operation {op!r}")

    def _pre_access(self, m: Module, op: PreAccess):
        node = m.dsm
        self.state_checks[(m.id, op.site)] += 1
        cycles = self.config.state_check_cycles * len(op.items)
        self._busy_cycles(m, cycles)
        m.state_check_cycles += cycles
        wanted: dict[str, RequestKind] = {}
        owned: list[str] = []
        for obj, may_write in op.items:
            if node.role(obj) is Role.OWNER:
                if obj not in owned:
                    owned.append(obj)
            elif may_write or wanted.get(obj) is RequestKind.ACQUIRE:
                wanted[obj] = RequestKind.ACQUIRE
            else:
                wanted.setdefault(obj, RequestKind.REPLICATE)
        acquired: set[str] = set()
        for owner, items in plan_requests(node, wanted, self.order):
            resp = yield from self._request(m, owner, items)
            acquired |= {o for o, k in items if k is RequestKind.ACQUIRE}
        for obj in owned:
            if node.is_exclusive(obj):
                continue
            t0 = m.t
            msg = yield _Wait("release", lambda x, o=obj: x.kind is MessageKind.DSM_REQUEST and x.body.releases(o))
            if msg is TIMEOUT:
                raise StallTimeout(f"{m.id} waiting for release of {obj}")
            self.owner_stalls.append(OwnerStall(m.id, obj, t0, m.t))
            m.owner_stall_ms += m.t - t0
            self._busy_cycles(m, self.config.dsm_serve_cycles)
            self._send_responses(m, node.serve(msg.body, drain=False))
        return frozenset(acquired)

    def _post_access(self, m: Module, op: PostAccess):
        node = m.dsm
        held = [o for o in dict.fromkeys(op.objs) if node.role(o) is Role.REQUESTER and node.is_exclusive(o)]
        owner_of = {o: node.owner_of(o) for o in held}
        for owner, objs in reversed(self.order.group_by_owner(held, owner_of)):
            yield from self._request(m, owner, [(o, RequestKind.RELEASE) for o in objs])
        return None

    def _request(self, m: Module, owner: str, items):
        node = m.dsm
        batch = node.request_batch(owner, items)
        t0 = m.t
        rec = self._send(m, Message(m.id, owner, MessageKind.DSM_REQUEST, self._encode_batch(batch), batch))
        self._open[(m.id, batch.batch_id)] = [batch, t0, rec.arrive_time]
        msg = yield _Wait("response", lambda x: x.kind is MessageKind.DSM_RESPONSE and x.body[0] is batch)
        if msg is TIMEOUT:
            self._open.pop((m.id, batch.batch_id), None)
            raise StallTimeout(f"{m.id} waiting for {owner}")
        node.apply_response(batch, msg.body[1])
        return msg.body[1]

    def _serve_handler(self, m: Module, msg: Message):
        yield Compute(self.config.dsm_serve_cycles)
        yield _Respond(tuple(m.dsm.serve(msg.body, drain=True)))

    def _rpc_handler(self, m: Module, msg: Message, inner):
        if inspect.isgenerator(inner):
            result = yield from inner
        else:
            result = inner
        yield _Return(msg.src, msg.body[0], result)
        return result

    def _send_responses(self, m: Module, pairs) -> None:
        for batch, resp in pairs:
            rec = self._open.get((batch.requester, batch.batch_id))
            t_send = m.t
            out = self._send(m, Message(m.id, batch.requester, MessageKind.DSM_RESPONSE,
                                        self._encode_response(resp), (batch, resp)))
            if rec is not None:
                rec.append((t_send, out.arrive_time))

    def _serve_queued_requests(self, m: Module) -> None:
        # a module stalled on a response, an RPC or a sleep still answers
        # batches for the objects it owns, so waits cannot chain through it;
        # instrumented code never holds an owned object across those points
        while True:
            ev = m.queue.take(lambda e: e.kind is EventKind.INCOMING_MESSAGE
                              and e.body.kind is MessageKind.DSM_REQUEST)
            if ev is None:
                return
            self._serve_now(m, ev.body, max(ev.enqueue_time, m.t))

    def _serve_now(self, m: Module, msg: Message, t: float) -> None:
        saved, m.t = m.t, t
        self._busy_cycles(m, self.config.dsm_serve_cycles)
        self._send_responses(m, m.dsm.serve(msg.body, drain=True))
        m.t = saved

    # ---- delivery ------------------------------------------------------------------

    def _deliver(self, msg: Message, t: float) -> bool:
        if msg.kind is MessageKind.LOCATION_UPDATE:
            proc = msg.dst.split("@", 1)[1]
            self.transport.apply_location_update(proc, msg)
            return True
        m = self.modules.get(msg.dst)
        if m is None or m.state == TERMINATED:
            self.drops["terminated"] += 1
            return False
        m.counters.messages_received += 1
        if msg.kind is MessageKind.DSM_RESPONSE:
            self._close_sample(msg, t)
        if m.state == STALLED and m.wait is not None:
            w = m.wait
            if w.match is not None and w.match(msg):
                self._satisfy(m, msg, t)
                return True
            if w.kind in SERVING_WAITS and msg.kind is MessageKind.DSM_REQUEST:
                self._serve_now(m, msg, max(t, w.since))
                return True
        if not m.queue.push(Event(EventKind.INCOMING_MESSAGE, msg, t)):
            m.counters.messages_dropped += 1
            self.drops["queue-full"] += 1
            return False
        m.counters.peak_queue_depth = max(m.counters.peak_queue_depth, len(m.queue))
        self._monitor_tick(m)
        self._kick(m.proc)
        return True

    def _close_sample(self, msg: Message, t: float) -> None:
        batch, _ = msg.body
        rec = self._open.pop((batch.requester, batch.batch_id), None)
        if rec is None or len(rec) < 4:
            return
        b, t0, t_arr, (t_resp, _) = rec
        self.requester_samples.append(RequesterSample(
            batch.requester, batch.owner, tuple(sorted({r.kind.value for r in b.requests})),
            t0, t_arr, t_resp, t))

    def _encode_batch(self, batch: DsmRequestBatch) -> bytes:
        out = bytearray()
        for r in batch.requests:
            out += struct.pack("<BB", _KIND_CODE[r.kind], self._obj_index.get(r.obj, 0))
            if r.value is not None:
                out += _pack_value(r.value)
        return bytes(out)

    def _encode_response(self, resp: DsmResponse) -> bytes:
        out = bytearray()
        for obj, kind, value in resp.results:
            out += struct.pack("<BB", _KIND_CODE[kind], self._obj_index.get(obj, 0))
            if value is not None:
                out += _pack_value(value)
        return bytes(out)

    # ---- event sources -------------------------------------------------------------

    def _enqueue(self, m: Module, ev: Event, reason: str) -> bool:
        if m.state == TERMINATED:
            return False
        if not m.queue.push(ev):
            m.counters.messages_dropped += ev.kind is EventKind.INCOMING_MESSAGE
            self.drops[reason] += 1
            return False
        m.counters.peak_queue_depth = max(m.counters.peak_queue_depth, len(m.queue))
        self._monitor_tick(m)
        self._kick(m.proc)
        return True

    def register_timer(self, module: str, interval: float, timer_id: str) -> TimerRegistration:
        m = self.modules[module]
        if interval <= 0:
            raise ReflexRuntimeError("timer interval must be positive")
        if timer_id in m.timers:
            raise ReflexRuntimeError(f"duplicate timer id {timer_id!r} in {module}")
        start = m.t if m.state == RUNNING else self.clock.now
        reg = TimerRegistration(float(interval), timer_id, start)
        m.timers[timer_id] = reg
        self.scheduler.at(reg.fire_time(1), self._fire_timer, m, reg, 1)
        return reg

    def _fire_timer(self, m: Module, reg: TimerRegistration, k: int) -> None:
        if m.state == TERMINATED or m.timers.get(reg.timer_id) is not reg:
            return
        self._enqueue(m, Event(EventKind.TIMER, reg.timer_id, self.clock.now), "timer")
        self.scheduler.at(reg.fire_time(k + 1), self._fire_timer, m, reg, k + 1)

    def inject(self, module: str, t: float, kind: EventKind, body: Any) -> None:
        """Schedule an external event (e.g. a user query) into a module's queue."""
        m = self.modules[module]
        self.scheduler.at(t, lambda: self._enqueue(m, Event(kind, body, self.clock.now), "injected"))

    def _channel_for(self, m: Module, channel: str) -> SensorChannel:
        ch = self.channels.get(channel)
        if ch is None:
            raise ReflexRuntimeError(f"unknown sensor channel {channel!r}")
        if ch.processor != m.proc:
            raise ReflexRuntimeError(f"{m.id} on {m.proc} cannot read {channel!r} bound to {ch.processor}")
        return ch

    def _read_cost_ms(self, ch: SensorChannel) -> float:
        if ch.bus:
            return message_latency(self.platform.link, ch.sample_bytes, self.platform.is_central(ch.processor))
        return self.platform.spec(ch.processor).cycles_to_ms(ch.read_cycles)

    def get_sensor_data(self, m: Module, channel: str) -> tuple[int, ...]:
        ch = self._channel_for(m, channel)
        self._busy_ms(m, self._read_cost_ms(ch))
        return ch.trace(m.t)

    def subscribe_sensor(self, module: str, channel: str, rate_hz: float) -> None:
        m = self.modules[module]
        ch = self._channel_for(m, channel)
        if rate_hz <= 0:
            raise ReflexRuntimeError("sensor rate must be positive")
        period = 1000.0 / rate_hz
        start = m.t if m.state == RUNNING else self.clock.now
        self.scheduler.at(start + period, self._sample, m, ch, start, period, 1)

    def _sample(self, m: Module, ch: SensorChannel, start: float, period: float, k: int) -> None:
        if m.state == TERMINATED:
            return
        t = self.clock.now
        cost = self._read_cost_ms(ch)
        self.timeline.mark_active(ch.processor, t, t + cost)
        self._enqueue(m, Event(EventKind.SENSOR_DATA, (ch.name, ch.trace(t)), t + cost), "sensor")
        self.scheduler.at(start + (k + 1) * period, self._sample, m, ch, start, period, k + 1)

    # ---- memory & monitoring -------------------------------------------------------

    def mod_malloc(self, module: str, size: int) -> int | None:
        m = self.modules[module]
        h = m.memory.malloc(size)
        if h is None:
            self._raise(ResourceException(ExceptionKind.MEM, module,
                                          f"malloc({size}) with {m.memory.allocated}/{m.memory.budget} in use",
                                          m.t))
        m.counters.peak_allocated = m.memory.peak
        return h

    def mod_free(self, module: str, handle: int) -> None:
        self.modules[module].memory.free(handle)

    def _monitor_tick(self, m: Module) -> ResourceException | None:
        threshold = math.ceil(self.config.time_threshold * m.queue.capacity)
        depth = len(m.queue)
        if depth >= threshold:
            if not m.time_latched:
                m.time_latched = True
                exc = ResourceException(ExceptionKind.TIME, m.id, f"queue depth {depth}/{m.queue.capacity}",
                                        self.clock.now)
                self._raise(exc)
                return exc
        else:
            m.time_latched = False
        return None

    def _raise(self, exc: ResourceException) -> None:
        self.exceptions.append(exc)
        central = next((x for x in self.modules.values() if x.spec.kind is ModuleKind.CENTRAL), None)
        if central is not None and central.id != exc.module and central.created:
            self._enqueue(central, Event(EventKind.RESOURCE_EXCEPTION, exc, self.clock.now), "exception")
        policy = self.config.policy
        if policy == "report":
            return
        victims = [m for m in self.modules.values()
                   if m.spec.kind is ModuleKind.PERIPHERAL and m.state != TERMINATED]
        if not victims:
            return
        if policy == "terminate-most-recent":
            victim = max(victims, key=lambda m: m.launch_index)
        else:
            victim = max(victims, key=lambda m: (m.counters.processor_cycles, -m.launch_index))
        self.scheduler.at(self.clock.now, self.terminate_module, victim.id)

    def terminate_module(self, module: str) -> None:
        m = self.modules[module]
        if m.state == TERMINATED:
            return
        if m.driver is not None:
            m.driver.close()
            m.driver = None
        proc = self.procs[m.proc]
        if proc.running is m:
            proc.running = None
        proc.ready = deque((x, v) for x, v in proc.ready if x is not m)
        m.state = TERMINATED
        m.wait = None
        m.timers.clear()
        self.discarded += m.queue.clear()
        self.terminated.append(m.id)
        self.transport.deregister_module(m.id, self.clock.now)
        self._kick(m.proc)

    def terminate_application(self) -> list[str]:
        stopped = []
        for m in self.modules.values():
            if m.spec.kind is ModuleKind.PERIPHERAL and m.state != TERMINATED:
                self.terminate_module(m.id)
                stopped.append(m.id)
        return stopped

    def running_modules(self) -> list[str]:
        return [m.id for m in self.modules.values() if m.state != TERMINATED]

    def query_stats(self, proc: str) -> UsageCounters:
        self.platform.spec(proc)
        total = UsageCounters()
        for m in self.modules.values():
            if m.proc == proc:
                total = total.merge(m.counters)
        return total


_KIND_CODE = {RequestKind.ACQUIRE: 1, RequestKind.RELEASE: 2, RequestKind.REPLICATE: 3}


def _pack_value(value: Sequence[int]) -> bytes:
    return struct.pack(f"<{len(value)}I", *(v & 0xFFFFFFFF for v in value))
