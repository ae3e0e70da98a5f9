"""Run a scenario: build the simulator from a config, drive it, report.

Handlers come from the module IRs: procedures named ``On...`` become event
handlers (``OnData:<channel>`` and ``OnTimer:<id>`` bind to one channel or
timer), every other procedure is an RPC entry point.

Measurements cover ``[boot, boot + duration]``, where boot is the moment
the location tables have settled and every OnCreate runs.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import random
import statistics
from dataclasses import dataclass, field
from typing import Any

from ..dsm.protocol import OwnerOrder, SharedObjectDescriptor
from ..instrument.idl import parse_idl
from ..instrument.interp import MASK, InterpStats, Interpreter
from ..instrument.ir import ModuleIR, strip
from ..instrument.passes import InstrumentedModuleIR, estimate_footprint, instrument
from ..instrument.roles import assign_roles
from ..platform import Interval, settle_energy
from ..runtime import (STALLED, ConstantTrace, ModuleKind, ModuleSpec, PlaybackTrace, RuntimeConfig,
                       SensorChannel, Simulator, SinusoidTrace)
from ..transport import EventKind, Message
from .config import ScenarioConfig, validate

REPORT_SCHEMA = "reflexsim.report/1"


class ReportError(AssertionError):
    """A conservation identity failed when the report was assembled."""


# ---- building ------------------------------------------------------------------------


def make_trace(gen: dict, base_dir: str = "."):
    kind = gen["kind"]
    if kind == "constant":
        return ConstantTrace(gen.get("values", [0]))
    if kind == "sinusoid":
        return SinusoidTrace(gen.get("amplitude", 1.0), gen.get("period_ms", 1000.0), gen.get("offset", 0.0),
                             gen.get("axes", 3), gen.get("phase_step", 0.25))
    if kind == "playback":
        path = gen["csv"] if os.path.isabs(gen["csv"]) else os.path.join(base_dir, gen["csv"])
        return PlaybackTrace.from_csv(path, gen.get("rate_hz", 1.0))
    raise ValueError(f"unknown generator {kind!r}")


class _SharedStore:
    """Legacy mode: every module on one processor reads one global copy."""

    def __init__(self, slots: dict[str, int], initial: dict[str, list[int]]):
        self.values = {o: list(initial.get(o, [0] * n)) + [0] * max(0, n - len(initial.get(o, [])))
                       for o, n in slots.items()}


class _LegacyCtx:
    def __init__(self, ctx, store: _SharedStore):
        self._ctx, self._store = ctx, store

    def read(self, obj: str, idx: int = 0) -> int:
        return self._store.values[obj][idx]

    def write(self, obj: str, idx: int, value: int) -> None:
        self._store.values[obj][idx] = value

    def get_sensor_data(self, channel: str):
        return self._ctx.get_sensor_data(channel)

    @property
    def rng(self):
        return self._ctx.rng


def _seed_acc(ev) -> int:
    if ev is None:
        return 0
    if ev.kind is EventKind.SENSOR_DATA:
        return sum(int(v) for v in ev.body[1]) & MASK
    if ev.kind is EventKind.INCOMING_MESSAGE and isinstance(ev.body, Message):
        return len(ev.body.payload)
    return 0


@dataclass
class Built:
    config: ScenarioConfig
    sim: Simulator
    legacy: bool
    irs: dict[str, ModuleIR]
    instrumented: dict[str, InstrumentedModuleIR] = field(default_factory=dict)
    descriptors: list[SharedObjectDescriptor] = field(default_factory=list)
    order: OwnerOrder | None = None
    interp_stats: dict[str, InterpStats] = field(default_factory=dict)
    ui_times: list[float] = field(default_factory=list)
    t0: float = 0.0

    @property
    def t_end(self) -> float:
        return self.t0 + self.config.duration_ms


def build(cfg: ScenarioConfig, legacy: bool = False) -> Built:
    validate(cfg, raise_errors=True)
    plat = cfg.build_platform()
    types = parse_idl(cfg.types)
    irs = cfg.module_irs()
    placement = {m.id: (plat.central if legacy else m.processor) for m in cfg.modules}
    rt_cfg = RuntimeConfig(stall_timeout=cfg.stall_timeout_ms, policy=cfg.policy)
    sim = Simulator(plat, cfg.seed, rt_cfg)
    out = Built(cfg, sim, legacy, irs)

    for s in cfg.sensors:
        trace = make_trace(s.generator, cfg.base_dir)
        if legacy:  # the phone's own sensors sit on its serial bus
            sim.add_sensor(SensorChannel(s.channel, plat.central, trace, s.sample_bytes, s.read_cycles, True))
        else:
            sim.add_sensor(SensorChannel(s.channel, s.processor, trace, s.sample_bytes, s.read_cycles, s.bus))

    if legacy:
        slots: dict[str, int] = {}
        for ir in irs.values():
            for obj, ty in ir.shared.items():
                slots[obj] = types[ty].slots if ty in types else 1
        store = _SharedStore(slots, cfg.initial)
        programs = {mid: strip(ir) for mid, ir in irs.items()}
        wrap = lambda ctx: _LegacyCtx(ctx, store)
    else:
        descs, order = assign_roles(irs.values(), placement, plat, types, swap=cfg.toggles.role_swap)
        out.descriptors, out.order = descs, order
        programs = {}
        for mid, ir in irs.items():
            inst = instrument(ir, None, descs, order, cfg.toggles.intra_batching, cfg.toggles.inter_batching)
            out.instrumented[mid] = inst
            programs[mid] = inst.ir
        wrap = lambda ctx: ctx

    for mc in cfg.modules:
        stats = out.interp_stats[mc.id] = InterpStats()
        interp = Interpreter(programs[mc.id], stats)
        handlers, procs = _bind(programs[mc.id], interp, wrap, mc)
        kind = ModuleKind.CENTRAL if mc.kind == "central" else ModuleKind.PERIPHERAL
        sim.add_module(ModuleSpec(mc.id, placement[mc.id], kind, handlers, procs, mc.memory_budget,
                                  mc.queue_capacity))
    if not legacy:
        initial = {o: tuple(v) for o, v in cfg.initial.items()}
        sim.configure_dsm(out.descriptors, {m: out.order.rank(m) for m in out.order.modules()}, initial)
    out.t0 = sim.transport.location_quiescent_at

    for i, q in enumerate(cfg.workload.ui_queries):
        rng = random.Random(f"{cfg.seed}/ui/{i}")
        k = 0
        while True:
            t = out.t0 + q.offset_ms + k * q.period_ms + (rng.uniform(-q.jitter_ms, q.jitter_ms)
                                                           if q.jitter_ms else 0.0)
            if t >= out.t_end:
                break
            sim.inject(q.module, max(t, out.t0), EventKind.SENSOR_DATA, (q.channel, (k,)))
            out.ui_times.append(max(t, out.t0))
            k += 1
    return out


def _bind(ir: ModuleIR, interp: Interpreter, wrap, mc):
    def handler(name):
        return lambda ctx, ev: interp.run(name, wrap(ctx), _seed_acc(ev))

    def rpc(name):
        return lambda ctx, body: interp.run(name, wrap(ctx), body & MASK if isinstance(body, int) else 0)

    handlers, procs = {}, {}
    for p in ir.procedures:
        if p.name.startswith("On"):
            handlers[p.name] = handler(p.name)
        else:
            procs[p.name] = rpc(p.name)
    create = handlers.get("OnCreate")

    def on_create(ctx, ev):
        for t in mc.timers:
            ctx.register_timer(t.interval_ms, t.id)
        for s in mc.subscriptions:
            ctx.subscribe_sensor(s.channel, s.rate_hz)
        if create is not None:
            return create(ctx, ev)
        return None

    handlers["OnCreate"] = on_create
    return handlers, procs


# ---- running --------------------------------------------------------------------------


@dataclass
class _Snapshot:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    in_flight: int = 0
    by_kind: dict = field(default_factory=dict)

    @classmethod
    def take(cls, stats) -> "_Snapshot":
        return cls(sum(stats.sent.values()), sum(stats.delivered.values()), sum(stats.dropped.values()),
                   stats.in_flight, dict(stats.by_kind))


def execute(b: Built) -> tuple[_Snapshot, _Snapshot]:
    """Run to the end of the window; message counters before and after."""
    if b.config.duration_ms <= 0:
        z = _Snapshot()
        return z, z
    b.sim.scheduler.run_until(b.t0)  # location updates land; nothing has booted yet
    before = _Snapshot.take(b.sim.transport.stats)
    b.sim.run(b.t_end)
    return before, _Snapshot.take(b.sim.transport.stats)


def simulate(b: Built) -> dict:
    """Execute a built scenario and assemble its report."""
    before, after = execute(b)
    return _report(b, before, after)


def run(cfg: ScenarioConfig, legacy_baseline: bool = True) -> dict:
    report = simulate(build(cfg))
    if legacy_baseline:
        leg = simulate(build(cfg, legacy=True))
        report["legacy"] = {"system_power_mW": leg["system_power_mW"], "energy": leg["energy"],
                            "exceptions": len(leg["exceptions"]), "drops": leg["drops"]}
        lp = leg["system_power_mW"]
        report["power_vs_legacy"] = {
            "ratio": _r(report["system_power_mW"] / lp) if lp > 0 else None,
            "reduction_pct": _r(100.0 * (1.0 - report["system_power_mW"] / lp)) if lp > 0 else None,
        }
    return report


# ---- reporting --------------------------------------------------------------------------


def _r(x: float, nd: int = 6) -> float:
    return round(float(x), nd) + 0.0


def _dist(values: list[float]) -> dict:
    if not values:
        return {"count": 0, "mean": 0.0, "min": 0.0, "p50": 0.0, "p95": 0.0, "max": 0.0, "total": 0.0}
    v = sorted(values)
    q = lambda p: v[min(len(v) - 1, int(math.ceil(p * len(v))) - 1)]
    return {"count": len(v), "mean": _r(math.fsum(v) / len(v)), "min": _r(v[0]), "p50": _r(statistics.median(v)),
            "p95": _r(q(0.95)), "max": _r(v[-1]), "total": _r(math.fsum(v))}


def _clip(segs: list[Interval], t0: float, t1: float) -> list[Interval]:
    out = []
    for iv in segs:
        s, e = max(iv.start, t0), min(iv.end, t1)
        if e > s:
            out.append(Interval(s, e, iv.state))
    return out


def _requester_block(samples) -> dict:
    return {
        "latency": _dist([s.latency for s in samples]),
        "transport": _dist([s.transport_out + s.transport_back for s in samples]),
        "transport_out": _dist([s.transport_out for s in samples]),
        "lazy": _dist([s.lazy for s in samples]),
        "transport_back": _dist([s.transport_back for s in samples]),
    }


def _report(b: Built, before: _Snapshot, after: _Snapshot) -> dict:
    cfg, sim = b.config, b.sim
    t0, t1 = b.t0, b.t_end
    dur = max(0.0, t1 - t0)
    plat = sim.platform
    used = sorted({m.proc for m in sim.modules.values()} | {c.processor for c in sim.channels.values()})
    timeline = {p: _clip(sim.timeline.segments(p, t1), t0, t1) for p in used}
    ledger = settle_energy(timeline, plat.specs)
    power = ledger.average_power(dur)
    energy = {p: {"energy_mJ": _r(ledger.energy[p]),
                  "avg_power_mW": _r(power[p]),
                  "active_ms": _r(sum(iv.duration for iv in timeline[p] if iv.state.value == "Active")),
                  "active_fraction": _r(sum(iv.duration for iv in timeline[p] if iv.state.value == "Active")
                                        / dur) if dur else 0.0}
              for p in used}
    system_power = _r(math.fsum(power.values()))

    req = [s for s in sim.requester_samples if not s.is_release]
    rel = [s for s in sim.requester_samples if s.is_release]
    per_module = {}
    for mid, m in sorted(sim.modules.items()):
        cyc = m.counters.processor_cycles
        per_module[mid] = {
            "processor": m.proc,
            "busy_ms": _r(m.busy_ms), "stall_ms": _r(m.stall_ms), "owner_stall_ms": _r(m.owner_stall_ms),
            "processor_cycles": _r(cyc), "state_check_cycles": _r(m.state_check_cycles),
            "state_check_fraction": _r(m.state_check_cycles / cyc, 9) if cyc else 0.0,
            "owner_stall_fraction": _r(m.owner_stall_ms / (m.busy_ms + m.owner_stall_ms), 9)
            if m.busy_ms + m.owner_stall_ms > 0 else 0.0,
            "messages_sent": m.counters.messages_sent, "messages_received": m.counters.messages_received,
            "messages_dropped": m.counters.messages_dropped, "peak_queue_depth": m.counters.peak_queue_depth,
            "state": m.state,
        }
    checks: dict[str, dict[str, int]] = {}
    for (mid, site), n in sorted(sim.state_checks.items()):
        checks.setdefault(mid, {})[site] = n
    footprint = {}
    for mid, inst in sorted(b.instrumented.items()):
        n, nbytes = estimate_footprint(inst)
        size = inst.original.size
        footprint[mid] = {"sites": n, "bytes": nbytes, "module_size": size,
                          "percent": _r(100.0 * nbytes / size, 4) if size else None}
    kinds = sorted(set(after.by_kind) | set(before.by_kind))
    by_kind = {k: after.by_kind.get(k, 0) - before.by_kind.get(k, 0) for k in kinds}
    by_kind = {k: v for k, v in by_kind.items() if v}
    msgs = {"by_kind": by_kind, "sent": after.sent - before.sent, "delivered": after.delivered - before.delivered,
            "dropped": after.dropped - before.dropped, "in_flight_start": before.in_flight,
            "in_flight_end": after.in_flight}
    msg_ok = (msgs["sent"] == msgs["delivered"] + msgs["dropped"] + after.in_flight - before.in_flight
              and sim.transport.stats.conserved())
    energy_ok = (math.isclose(math.fsum(e for e in ledger.energy.values()), ledger.total, abs_tol=1e-9)
                 and all(math.isclose(power[p] * dur / 1000.0, ledger.energy[p], rel_tol=1e-9, abs_tol=1e-9)
                         for p in used))
    if not (msg_ok and energy_ok):
        raise ReportError(f"conservation failed: messages={msg_ok} energy={energy_ok}")
    stalled = [{"module": m.id, "waiting_for": m.wait.kind if m.wait else None,
                "since": _r(m.wait.since) if m.wait else None}
               for m in sim.modules.values() if m.state == STALLED and dur]

    return {
        "schema": REPORT_SCHEMA,
        "scenario": cfg.name,
        "mode": "legacy" if b.legacy else "reflex",
        "seed": cfg.seed,
        "duration_ms": _r(dur),
        "window": [_r(t0), _r(t1) if dur else _r(t0)],
        "toggles": {k: getattr(cfg.toggles, k) for k in ("intra_batching", "inter_batching", "role_swap",
                                                         "regulation")},
        "energy": energy,
        "system_power_mW": system_power,
        "latency": {
            "requester": _requester_block(req),
            "release": _requester_block(rel),
            "requester_by_module": {mid: _requester_block([s for s in req if s.module == mid])
                                    for mid in sorted({s.module for s in req})},
            "owner": _dist([s.duration for s in sim.owner_stalls]),
            "owner_by_module": {mid: _dist([s.duration for s in sim.owner_stalls if s.module == mid])
                                for mid in sorted({s.module for s in sim.owner_stalls})},
            "total_requester_ms": _r(math.fsum(s.latency for s in sim.requester_samples)),
        },
        "messages": msgs,
        "drops": dict(sorted(sim.drops.items())),
        "unhandled": {f"{m}/{k}": n for (m, k), n in sorted(sim.unhandled.items())},
        "state_checks": checks,
        "state_checks_total": sum(sim.state_checks.values()),
        "modules": per_module,
        "footprint": footprint,
        "exceptions": [{"kind": e.kind.value, "module": e.module, "detail": e.detail, "time": _r(e.time)}
                       for e in sim.exceptions],
        "timeouts": [{k: (_r(v) if isinstance(v, float) else v) for k, v in t.items()} for t in sim.timeouts],
        "stalled_at_end": stalled,
        "terminated": list(sim.terminated),
        "ui_queries": len(b.ui_times),
        "conservation": {"messages": msg_ok, "energy": energy_ok},
    }


# ---- output -------------------------------------------------------------------------------


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _csv(rows: list[list[Any]], header: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def csv_tables(report: dict) -> dict[str, str]:
    """Flat tables: energy per processor, latency summary, modules, state checks."""
    energy = [[p, e["energy_mJ"], e["avg_power_mW"], e["active_ms"], e["active_fraction"]]
              for p, e in sorted(report["energy"].items())]
    lat = []
    for name in ("requester", "release"):
        for part, d in sorted(report["latency"][name].items()):
            lat.append([name, part, d["count"], d["mean"], d["p50"], d["p95"], d["max"], d["total"]])
    d = report["latency"]["owner"]
    lat.append(["owner", "stall", d["count"], d["mean"], d["p50"], d["p95"], d["max"], d["total"]])
    mods = [[m, v["processor"], v["busy_ms"], v["owner_stall_ms"], v["state_check_fraction"],
             v["owner_stall_fraction"], v["messages_sent"], v["messages_dropped"]]
            for m, v in sorted(report["modules"].items())]
    checks = [[m, site, n] for m, sites in sorted(report["state_checks"].items()) for site, n in sorted(sites.items())]
    return {
        "energy.csv": _csv(energy, ["processor", "energy_mJ", "avg_power_mW", "active_ms", "active_fraction"]),
        "latency.csv": _csv(lat, ["kind", "part", "count", "mean_ms", "p50_ms", "p95_ms", "max_ms", "total_ms"]),
        "modules.csv": _csv(mods, ["module", "processor", "busy_ms", "owner_stall_ms", "state_check_fraction",
                                   "owner_stall_fraction", "messages_sent", "messages_dropped"]),
        "state_checks.csv": _csv(checks, ["module", "site", "count"]),
    }


def write_report(report: dict, out_dir: str, fmt: str = "both", stem: str = "report") -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if fmt in ("json", "both"):
        path = os.path.join(out_dir, f"{stem}.json")
        with open(path, "w") as fh:
            fh.write(to_json(report))
        written.append(path)
    if fmt in ("csv", "both"):
        for name, text in csv_tables(report).items():
            path = os.path.join(out_dir, f"{stem}_{name}")
            with open(path, "w") as fh:
                fh.write(text)
            written.append(path)
    return written
