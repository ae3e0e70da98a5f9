"""Best-effort, location-transparent message delivery between modules.

Messages travel over one serial link. Delivery is FIFO per (src, dst) pair
and never acknowledged; a full destination queue drops the arriving message.
"""

from __future__ import annotations

import heapq
import itertools
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from .platform import MESSAGE_HEADER_BYTES, Platform, PowerStateTimeline, VirtualClock, message_latency


class TransportError(Exception):
    pass


class RoutingError(TransportError):
    """Destination unknown to the sender's location table (not a silent drop)."""


class RegistrationError(TransportError):
    pass


class MessageKind(str, Enum):
    DSM_REQUEST = "DsmRequestBatch"
    DSM_RESPONSE = "DsmResponse"
    RPC_CALL = "RpcCall"
    RPC_RETURN = "RpcReturn"
    LOCATION_UPDATE = "LocationUpdate"
    APP_DATA = "AppData"


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    kind: MessageKind
    payload: bytes = b""
    body: Any = None  # decoded form of the payload, kept to avoid re-parsing

    @property
    def payload_len(self) -> int:
        return len(self.payload)


class EventKind(str, Enum):
    SENSOR_DATA = "SensorData"
    TIMER = "Timer"
    INCOMING_MESSAGE = "IncomingMessage"
    RESOURCE_EXCEPTION = "ResourceException"


_PRIORITY_KINDS = (EventKind.SENSOR_DATA, EventKind.TIMER)


@dataclass(frozen=True)
class Event:
    kind: EventKind
    body: Any
    enqueue_time: float

    def __post_init__(self):
        if self.kind is EventKind.INCOMING_MESSAGE and not isinstance(self.body, Message):
            raise TypeError("IncomingMessage events carry exactly one Message")


class EventQueue:
    """Bounded FIFO with sensor/timer-first retrieval."""

    def __init__(self, capacity: int = 16):
        if capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self._entries: deque[Event] = deque()
        self.peak_depth = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def push(self, ev: Event) -> bool:
        """Append ``ev``; returns False (and keeps the queue unchanged) when full."""
        if len(self._entries) >= self.capacity:
            return False
        self._entries.append(ev)
        self.peak_depth = max(self.peak_depth, len(self._entries))
        return True

    def poll(self) -> Event | None:
        for ev in self._entries:
            if ev.kind in _PRIORITY_KINDS:
                self._entries.remove(ev)
                return ev
        return self._entries.popleft() if self._entries else None

    def take(self, pred: Callable[[Event], bool]) -> Event | None:
        """Remove and return the oldest event matching ``pred``."""
        for ev in self._entries:
            if pred(ev):
                self._entries.remove(ev)
                return ev
        return None

    def clear(self) -> int:
        n = len(self._entries)
        self._entries.clear()
        return n


class LocationTable:
    def __init__(self, entries: dict[str, str] | None = None):
        self._map: dict[str, str] = dict(entries or {})

    def lookup(self, module: str) -> str:
        try:
            return self._map[module]
        except KeyError:
            raise RoutingError(f"no location for module {module!r}") from None

    def update(self, module: str, proc: str | None) -> None:
        if proc is None:
            self._map.pop(module, None)
        else:
            self._map[module] = proc

    def __contains__(self, module: str) -> bool:
        return module in self._map

    def snapshot(self) -> dict[str, str]:
        return dict(sorted(self._map.items()))


class Scheduler:
    """Time-ordered callbacks over a :class:`VirtualClock`; ties run in
    scheduling order."""

    def __init__(self, clock: VirtualClock | None = None):
        self.clock = clock or VirtualClock()
        self._heap: list = []
        self._seq = itertools.count()

    @property
    def now(self) -> float:
        return self.clock.now

    def at(self, t: float, fn: Callable, *args) -> None:
        if t < self.clock.now:
            raise ValueError(f"cannot schedule in the past ({t} < {self.clock.now})")
        heapq.heappush(self._heap, (t, next(self._seq), fn, args))

    def next_time(self) -> float | None:
        return self._heap[0][0] if self._heap else None

    def run_until(self, horizon: float) -> None:
        while self._heap and self._heap[0][0] <= horizon:
            t, _, fn, args = heapq.heappop(self._heap)
            self.clock.advance_to(t)
            fn(*args)
        if horizon > self.clock.now:
            self.clock.advance_to(horizon)

    def pending(self) -> int:
        return len(self._heap)


def runtime_id(proc: str) -> str:
    """Address of the per-processor runtime (not a user module)."""
    return f"runtime@{proc}"


@dataclass
class DeliveryStats:
    sent: Counter = field(default_factory=Counter)       # per destination
    delivered: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    by_kind: Counter = field(default_factory=Counter)
    in_flight: int = 0

    def conserved(self) -> bool:
        dests = set(self.sent) | set(self.delivered) | set(self.dropped)
        total_ok = all(self.sent[d] >= self.delivered[d] + self.dropped[d] for d in dests)
        return total_ok and sum(self.sent.values()) == (sum(self.delivered.values())
                                                     + sum(self.dropped.values()) + self.in_flight)


@dataclass(frozen=True)
class SendRecord:
    """Timing of one send: when it left, when it reached the receiver queue."""

    msg: Message
    send_time: float
    arrive_time: float
    leg_ms: float


class Transport:
    """Routes messages between registered modules.

    ``deliver(msg, t)`` is called at arrival time and returns False if the
    receiver dropped the message. Time spent is reported through
    ``timeline``: the sender is Active for its send cycles, both endpoints
    for the wire transfer, and the receiver for its receive cycles.
    """

    def __init__(self, platform: Platform, scheduler: Scheduler, timeline: PowerStateTimeline,
                 deliver: Callable[[Message, float], bool]):
        self.platform = platform
        self.scheduler = scheduler
        self.timeline = timeline
        self._deliver = deliver
        self.tables: dict[str, LocationTable] = {p.id: LocationTable() for p in platform.processors}
        for p in platform.processors:
            for t in self.tables.values():
                t.update(runtime_id(p.id), p.id)
        self.stats = DeliveryStats()
        self._last_arrival: dict[tuple[str, str], float] = {}
        self.location_quiescent_at = 0.0
        self.fault_drop: Callable[[Message], bool] | None = None  # test hook

    # ---- location table ------------------------------------------------------

    @property
    def central_table(self) -> LocationTable:
        return self.tables[self.platform.central]

    def register_module(self, module: str, proc: str, now: float | None = None) -> list[Message]:
        if module in self.central_table:
            raise RegistrationError(f"module {module!r} already registered")
        self.platform.spec(proc)
        self.central_table.update(module, proc)
        return self._broadcast(module, proc, now)

    def deregister_module(self, module: str, now: float | None = None) -> list[Message]:
        if module not in self.central_table:
            return []
        self.central_table.update(module, None)
        return self._broadcast(module, None, now)

    def _broadcast(self, module: str, proc: str | None, now: float | None) -> list[Message]:
        now = self.scheduler.now if now is None else now
        src = runtime_id(self.platform.central)
        msgs = []
        for p in self.platform.peripherals:
            msg = Message(src, runtime_id(p), MessageKind.LOCATION_UPDATE,
                          _location_payload(module, proc), (module, proc))
            rec = self.send(msg, now, src_proc=self.platform.central)
            self.location_quiescent_at = max(self.location_quiescent_at, rec.arrive_time)
            msgs.append(msg)
        return msgs

    def apply_location_update(self, proc: str, msg: Message) -> None:
        module, where = msg.body
        self.tables[proc].update(module, where)

    def locate(self, module: str, from_proc: str) -> str:
        return self.tables[from_proc].lookup(module)

    # ---- delivery --------------------------------------------------------------

    def send(self, msg: Message, now: float, src_proc: str | None = None) -> SendRecord:
        """Schedule delivery of ``msg``; returns when it left and will arrive.

        Routing uses the sender processor's table replica. The caller is
        charged ``msg_send_cycles`` from ``now``; the returned ``send_time``
        is when those cycles end.
        """
        src_proc = src_proc or self.central_table.lookup(msg.src)
        dst_proc = self.tables[src_proc].lookup(msg.dst)
        sspec, dspec = self.platform.spec(src_proc), self.platform.spec(dst_proc)
        t_sent = now + sspec.cycles_to_ms(sspec.msg_send_cycles)
        self.timeline.mark_active(src_proc, now, t_sent)
        if src_proc == dst_proc:
            wire = 0.0
        else:
            wire = message_latency(self.platform.link, msg.payload_len + MESSAGE_HEADER_BYTES,
                                   self.platform.is_central(dst_proc))
            self.timeline.mark_active(src_proc, t_sent, t_sent + wire)
            self.timeline.mark_active(dst_proc, t_sent, t_sent + wire)
        recv = dspec.cycles_to_ms(dspec.msg_recv_cycles)
        self.timeline.mark_active(dst_proc, t_sent + wire, t_sent + wire + recv)
        arrive = t_sent + wire + recv
        key = (msg.src, msg.dst)
        arrive = max(arrive, self._last_arrival.get(key, 0.0))  # serial link keeps pair order
        self._last_arrival[key] = arrive
        self.stats.sent[msg.dst] += 1
        self.stats.by_kind[msg.kind.value] += 1
        self.stats.in_flight += 1
        self.scheduler.at(arrive, self._arrive, msg, arrive)
        return SendRecord(msg, now, arrive, arrive - now)

    def _arrive(self, msg: Message, t: float) -> None:
        self.stats.in_flight -= 1
        if self.fault_drop is not None and self.fault_drop(msg):
            self.stats.dropped[msg.dst] += 1
            return
        if self._deliver(msg, t):
            self.stats.delivered[msg.dst] += 1
        else:
            self.stats.dropped[msg.dst] += 1


def _location_payload(module: str, proc: str | None) -> bytes:
    return (module + "\0" + (proc or "")).encode()


def pairs_in_order(records: Iterable[SendRecord]) -> bool:
    """True if arrivals respect send order for every (src, dst) pair."""
    last: dict[tuple[str, str], tuple[float, float]] = {}
    for r in records:
        k = (r.msg.src, r.msg.dst)
        if k in last and r.arrive_time < last[k][1]:
            return False
        last[k] = (r.send_time, r.arrive_time)
    return True
