"""Hardware model: processors, interconnect latency, power states and energy.

Times are simulated milliseconds, powers milliwatts, energies millijoules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence


class PlatformError(ValueError):
    pass


class TimelineError(PlatformError):
    """Raised for overlapping or non-contiguous power-state intervals."""


class PowerState(str, Enum):
    ACTIVE = "Active"
    IDLE = "Idle"


@dataclass(frozen=True)
class ProcessorSpec:
    id: str
    clock_rate: float  # cycles / second
    ram: int
    rom: int
    active_power: float
    idle_power: float
    strength_rank: int
    msg_send_cycles: int
    msg_recv_cycles: int

    def __post_init__(self):
        if self.clock_rate <= 0:
            raise PlatformError(f"{self.id}: clock_rate must be positive")
        if not self.active_power > self.idle_power >= 0:
            raise PlatformError(f"{self.id}: need active_power > idle_power >= 0")
        if self.msg_send_cycles < 0 or self.msg_recv_cycles < 0:
            raise PlatformError(f"{self.id}: negative message cycle cost")

    def cycles_to_ms(self, cycles: float) -> float:
        return cycles * 1000.0 / self.clock_rate

    def power(self, state: PowerState) -> float:
        return self.active_power if state is PowerState.ACTIVE else self.idle_power


@dataclass(frozen=True)
class LinkSpec:
    """Serial interconnect (an I2C bus at 100 kHz in the reference prototype).

    ``per_byte_latency`` of 0.09 ms is nine bit-times at 100 kHz (eight data
    bits plus ACK); framing and driver overhead is folded into ``base_latency``.
    """

    base_latency: float = 9.5
    per_byte_latency: float = 0.09
    central_receiver_penalty: float = 7.0

    def __post_init__(self):
        if min(self.base_latency, self.per_byte_latency, self.central_receiver_penalty) < 0:
            raise PlatformError("link latencies must be non-negative")


#: Bytes of routing/kind header carried by every message on the wire.
MESSAGE_HEADER_BYTES = 8


def message_latency(link: LinkSpec, payload: int, dest_is_central: bool) -> float:
    if payload < 0:
        raise PlatformError("payload must be >= 0")
    latency = link.base_latency + link.per_byte_latency * payload
    if dest_is_central:
        latency += link.central_receiver_penalty
    return latency


class VirtualClock:
    def __init__(self, now: float = 0.0):
        self._now = float(now)

    @property
    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise PlatformError(f"clock cannot move backwards ({t} < {self._now})")
        self._now = float(t)

    def __repr__(self) -> str:
        return f"VirtualClock(now={self._now})"


@dataclass(frozen=True)
class Interval:
    start: float
    end: float
    state: PowerState

    @property
    def duration(self) -> float:
        return self.end - self.start


class PowerStateTimeline:
    """Active periods per processor; everything else is Idle.

    Overlapping Active marks (a handler running while a transfer is in
    progress) are merged, so the exported segments never overlap.
    """

    def __init__(self, processors: Iterable[str] = ()):
        self._active: dict[str, list[tuple[float, float]]] = {p: [] for p in processors}

    def mark_active(self, proc: str, start: float, end: float) -> None:
        if end < start:
            raise TimelineError(f"interval end {end} before start {start}")
        if end == start:
            return
        self._active.setdefault(proc, []).append((start, end))

    def processors(self) -> list[str]:
        return sorted(self._active)

    def active_time(self, proc: str, horizon: float) -> float:
        return sum(iv.duration for iv in self.segments(proc, horizon) if iv.state is PowerState.ACTIVE)

    def segments(self, proc: str, horizon: float) -> list[Interval]:
        merged: list[list[float]] = []
        for s, e in sorted(self._active.get(proc, ())):
            s, e = max(s, 0.0), min(e, horizon)
            if e <= s:
                continue
            if merged and s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        out: list[Interval] = []
        t = 0.0
        for s, e in merged:
            if s > t:
                out.append(Interval(t, s, PowerState.IDLE))
            out.append(Interval(s, e, PowerState.ACTIVE))
            t = e
        if horizon > t:
            out.append(Interval(t, horizon, PowerState.IDLE))
        return out

    def export(self, horizon: float) -> dict[str, list[Interval]]:
        return {p: self.segments(p, horizon) for p in self.processors()}


def charge_cycles(proc: ProcessorSpec, cycles: float, clock: VirtualClock,
                  timeline: PowerStateTimeline | None = None) -> float:
    """Elapsed ms for ``cycles`` on ``proc``, marked Active from ``clock.now``."""
    if cycles < 0:
        raise PlatformError("cycles must be >= 0")
    elapsed = proc.cycles_to_ms(cycles)
    if timeline is not None:
        timeline.mark_active(proc.id, clock.now, clock.now + elapsed)
    return elapsed


@dataclass
class EnergyLedger:
    energy: dict[str, float] = field(default_factory=dict)  # mJ per processor

    @property
    def total(self) -> float:
        return math.fsum(self.energy.values())

    def average_power(self, duration_ms: float) -> dict[str, float]:
        if duration_ms <= 0:
            return {p: 0.0 for p in self.energy}
        return {p: e * 1000.0 / duration_ms for p, e in self.energy.items()}

    def __add__(self, other: "EnergyLedger") -> "EnergyLedger":
        keys = sorted(set(self.energy) | set(other.energy))
        return EnergyLedger({k: self.energy.get(k, 0.0) + other.energy.get(k, 0.0) for k in keys})


def settle_energy(timeline: Mapping[str, Sequence[Interval]],
                  specs: Mapping[str, ProcessorSpec]) -> EnergyLedger:
    ledger: dict[str, float] = {}
    for proc, intervals in timeline.items():
        spec = specs[proc]
        total = []
        prev_end = None
        for iv in intervals:
            if iv.end < iv.start:
                raise TimelineError(f"{proc}: negative-length interval {iv}")
            if prev_end is not None and not math.isclose(iv.start, prev_end, abs_tol=1e-9):
                kind = "overlapping" if iv.start < prev_end else "non-contiguous"
                raise TimelineError(f"{proc}: {kind} intervals at t={iv.start}")
            prev_end = iv.end
            # mW * ms = uJ
            total.append(spec.power(iv.state) * iv.duration / 1000.0)
        ledger[proc] = math.fsum(total)
    return EnergyLedger(ledger)


@dataclass(frozen=True)
class Platform:
    processors: tuple[ProcessorSpec, ...]
    link: LinkSpec
    central: str

    def __post_init__(self):
        ids = [p.id for p in self.processors]
        if len(set(ids)) != len(ids):
            raise PlatformError(f"duplicate processor ids: {ids}")
        ranks = [p.strength_rank for p in self.processors]
        if len(set(ranks)) != len(ranks):
            raise PlatformError(f"strength_rank ties are not allowed: {ranks}")
        if self.central not in ids:
            raise PlatformError(f"central processor {self.central!r} not defined")
        if self.spec(self.central).strength_rank != max(ranks):
            raise PlatformError("the central processor must be the strongest")

    def spec(self, pid: str) -> ProcessorSpec:
        for p in self.processors:
            if p.id == pid:
                return p
        raise KeyError(pid)

    @property
    def specs(self) -> dict[str, ProcessorSpec]:
        return {p.id: p for p in self.processors}

    @property
    def peripherals(self) -> list[str]:
        return [p.id for p in self.processors if p.id != self.central]

    def is_central(self, pid: str) -> bool:
        return pid == self.central


OMAP3 = ProcessorSpec("OMAP3", 600e6, ram=256 * 2**20, rom=0, active_power=200.0, idle_power=13.4,
                      strength_rank=2, msg_send_cycles=1800, msg_recv_cycles=1800)
LPC = ProcessorSpec("LPC", 72e6, ram=8 * 1024, rom=32 * 1024, active_power=42.9, idle_power=7.0,
                    strength_rank=1, msg_send_cycles=891, msg_recv_cycles=1612)
MSP = ProcessorSpec("MSP", 3e6, ram=10 * 1024, rom=56 * 1024, active_power=7.5, idle_power=3.2,
                    strength_rank=0, msg_send_cycles=1500, msg_recv_cycles=1560)


def default_platform(link: LinkSpec | None = None) -> Platform:
    return Platform((OMAP3, LPC, MSP), link or LinkSpec(), central="OMAP3")
