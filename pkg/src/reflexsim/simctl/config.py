"""Scenario configuration: one JSON document per scenario.

Schema ``reflexsim.scenario/1``::

    {
      "schema": "reflexsim.scenario/1",
      "name": str, "description": str,
      "seed": int, "duration_ms": float,
      "stall_timeout_ms": float | null, "policy": "report" | ...,
      "platform": {"processors": [...], "link": {...}, "central": str} | null,
      "types": "<IDL text>",
      "modules": [{"id", "processor", "kind": "central" | "peripheral",
                   "ir": "<IR text>" | "ir_file": path,
                   "memory_budget", "queue_capacity",
                   "timers": [{"id", "interval_ms"}],
                   "subscriptions": [{"channel", "rate_hz"}]}],
      "sensors": [{"channel", "processor", "generator": {...},
                   "sample_bytes", "read_cycles", "bus"}],
      "workload": {"ui_queries": [{"module", "channel", "period_ms",
                                   "jitter_ms", "offset_ms"}]},
      "toggles": {"intra_batching", "inter_batching", "role_swap", "regulation"},
      "initial": {obj: [int, ...]},
      "assumptions": {key: str}
    }

Generators: ``{"kind": "constant", "values": [...]}``,
``{"kind": "sinusoid", "amplitude", "period_ms", "offset", "axes"}`` or
``{"kind": "playback", "csv": path, "rate_hz"}``. Shared objects and their
groups come from the ``shared`` lines of the module IRs; their layouts
from ``types``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

from ..instrument.idl import SharedTypeError, parse_idl
from ..instrument.ir import IRError, ModuleIR, parse
from ..platform import LinkSpec, Platform, PlatformError, ProcessorSpec, default_platform
from ..runtime import POLICIES

SCHEMA = "reflexsim.scenario/1"
TOGGLES = ("intra_batching", "inter_batching", "role_swap", "regulation")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n" + "\n".join(f"  - {e}" for e in self.errors))


@dataclass
class TimerConfig:
    id: str
    interval_ms: float


@dataclass
class Subscription:
    channel: str
    rate_hz: float


@dataclass
class ModuleConfig:
    id: str
    processor: str
    kind: str = "peripheral"
    ir: str | None = None
    ir_file: str | None = None
    memory_budget: int = 4096
    queue_capacity: int = 16
    timers: list[TimerConfig] = field(default_factory=list)
    subscriptions: list[Subscription] = field(default_factory=list)


@dataclass
class SensorConfig:
    channel: str
    processor: str
    generator: dict = field(default_factory=lambda: {"kind": "constant", "values": [0, 0, 0]})
    sample_bytes: int = 6
    read_cycles: int = 200
    bus: bool = False


@dataclass
class UIQuery:
    module: str
    channel: str = "ui"
    period_ms: float = 30_000.0
    jitter_ms: float = 0.0
    offset_ms: float = 0.0


@dataclass
class Workload:
    ui_queries: list[UIQuery] = field(default_factory=list)


@dataclass
class Toggles:
    intra_batching: bool = True
    inter_batching: bool = True
    role_swap: bool = False
    regulation: bool = True


@dataclass
class ScenarioConfig:
    name: str
    modules: list[ModuleConfig]
    sensors: list[SensorConfig] = field(default_factory=list)
    types: str = ""
    workload: Workload = field(default_factory=Workload)
    toggles: Toggles = field(default_factory=Toggles)
    duration_ms: float = 60_000.0
    seed: int = 0
    stall_timeout_ms: float | None = None
    policy: str = "report"
    platform: dict | None = None
    initial: dict[str, list[int]] = field(default_factory=dict)
    description: str = ""
    assumptions: dict[str, str] = field(default_factory=dict)
    base_dir: str = field(default=".", repr=False, compare=False)

    # ---- derived ----------------------------------------------------------------

    def build_platform(self) -> Platform:
        if self.platform is None:
            return default_platform()
        procs = tuple(ProcessorSpec(**p) for p in self.platform["processors"])
        link = LinkSpec(**self.platform.get("link", {}))
        return Platform(procs, link, self.platform["central"])

    def ir_text(self, m: ModuleConfig) -> str:
        if m.ir is not None:
            return m.ir
        path = m.ir_file if os.path.isabs(m.ir_file) else os.path.join(self.base_dir, m.ir_file)
        with open(path) as fh:
            return fh.read()

    def module_irs(self) -> dict[str, ModuleIR]:
        return {m.id: parse(self.ir_text(m)) for m in self.modules}

    def with_toggles(self, **kw) -> "ScenarioConfig":
        return replace(self, toggles=replace(self.toggles, **kw))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return {"schema": SCHEMA, **d}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---- loading --------------------------------------------------------------------


def _build(cls, raw: Any, where: str, errors: list[str]):
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected an object")
        return None
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        errors.append(f"{where}: unknown field(s) {unknown}")
    try:
        return cls(**{k: v for k, v in raw.items() if k in names})
    except TypeError as e:
        errors.append(f"{where}: {e}")
        return None


def _build_list(cls, raw: Any, where: str, errors: list[str]) -> list:
    if not isinstance(raw, list):
        errors.append(f"{where}: expected a list")
        return []
    built = [_build(cls, x, f"{where}[{i}]", errors) for i, x in enumerate(raw)]
    return [b for b in built if b is not None]


def from_dict(raw: dict, base_dir: str = ".") -> ScenarioConfig:
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected an object"])
    raw = dict(raw)
    schema = raw.pop("schema", None)
    if schema != SCHEMA:
        errors.append(f"schema: expected {SCHEMA!r}, got {schema!r}")
    mods = []
    for i, m in enumerate(raw.pop("modules", None) or []):
        mc = _build(ModuleConfig, m, f"modules[{i}]", errors)
        if mc is None:
            continue
        mc.timers = _build_list(TimerConfig, mc.timers, f"modules[{i}].timers", errors)
        mc.subscriptions = _build_list(Subscription, mc.subscriptions, f"modules[{i}].subscriptions", errors)
        mods.append(mc)
    sensors = _build_list(SensorConfig, raw.pop("sensors", None) or [], "sensors", errors)
    wl_raw = raw.pop("workload", None) or {}
    wl = _build(Workload, wl_raw, "workload", errors) or Workload()
    wl.ui_queries = _build_list(UIQuery, wl.ui_queries, "workload.ui_queries", errors)
    toggles = _build(Toggles, raw.pop("toggles", None) or {}, "toggles", errors) or Toggles()
    if errors:
        raise ConfigError(errors)
    cfg = _build(ScenarioConfig, {**raw, "modules": mods, "sensors": sensors, "workload": wl,
                                  "toggles": toggles}, "scenario", errors)
    if cfg is None:
        raise ConfigError(errors)
    cfg.base_dir = base_dir
    validate(cfg, raise_errors=True)
    return cfg


def loads(text: str, base_dir: str = ".") -> ScenarioConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError([f"not valid JSON: {e}"]) from None
    return from_dict(raw, base_dir)


def load(path: str) -> ScenarioConfig:
    with open(path) as fh:
        return loads(fh.read(), os.path.dirname(os.path.abspath(path)))


# ---- validation -------------------------------------------------------------------


def validate(cfg: ScenarioConfig, raise_errors: bool = False) -> list[str]:
    """Every problem found, one line each; empty when the config is usable."""
    errs: list[str] = []
    try:
        plat = cfg.build_platform()
    except (PlatformError, KeyError, TypeError) as e:
        errs.append(f"platform: {e}")
        plat = None
    if cfg.duration_ms < 0:
        errs.append("duration_ms: must be >= 0")
    if cfg.stall_timeout_ms is not None and cfg.stall_timeout_ms <= 0:
        errs.append("stall_timeout_ms: must be positive or null")
    if cfg.policy not in POLICIES:
        errs.append(f"policy: {cfg.policy!r} not one of {list(POLICIES)}")
    types = {}
    try:
        types = parse_idl(cfg.types)
    except (SharedTypeError, ValueError) as e:
        errs.append(f"types: {e}")

    procs = {p.id for p in plat.processors} if plat else set()
    ids = [m.id for m in cfg.modules]
    if not ids:
        errs.append("modules: at least one module is required")
    for d in sorted({i for i in ids if ids.count(i) > 1}):
        errs.append(f"modules: duplicate id {d!r}")
    centrals = [m.id for m in cfg.modules if m.kind == "central"]
    if len(centrals) != 1:
        errs.append(f"modules: exactly one central module required, found {centrals}")

    channels: dict[str, list[str]] = {}
    for s in cfg.sensors:
        channels.setdefault(s.channel, []).append(s.processor)
        if plat and s.processor not in procs:
            errs.append(f"sensors.{s.channel}: unknown processor {s.processor!r}")
        kind = s.generator.get("kind") if isinstance(s.generator, dict) else None
        if kind not in ("constant", "sinusoid", "playback"):
            errs.append(f"sensors.{s.channel}: unknown generator {kind!r}")
        elif kind == "playback" and "csv" not in s.generator:
            errs.append(f"sensors.{s.channel}: playback generator needs a csv path")
    for ch, where in channels.items():
        if len(where) != 1:
            errs.append(f"sensors.{ch}: bound to {len(where)} processors, expected exactly one")

    irs: dict[str, ModuleIR] = {}
    for m in cfg.modules:
        tag = f"modules.{m.id}"
        if m.kind not in ("central", "peripheral"):
            errs.append(f"{tag}: kind must be 'central' or 'peripheral'")
        if plat:
            if m.processor not in procs:
                errs.append(f"{tag}: unknown processor {m.processor!r}")
            elif m.kind == "central" and m.processor != plat.central:
                errs.append(f"{tag}: the central module must run on {plat.central}")
        if (m.ir is None) == (m.ir_file is None):
            errs.append(f"{tag}: give exactly one of 'ir' or 'ir_file'")
        else:
            try:
                ir = parse(cfg.ir_text(m))
            except OSError as e:
                errs.append(f"{tag}: cannot read IR: {e}")
            except IRError as e:
                errs.append(f"{tag}: IR: {e}")
            else:
                if ir.module != m.id:
                    errs.append(f"{tag}: IR declares module {ir.module!r}")
                irs[m.id] = ir
        if m.queue_capacity < 1:
            errs.append(f"{tag}: queue_capacity must be >= 1")
        if m.memory_budget < 0:
            errs.append(f"{tag}: memory_budget must be >= 0")
        for t in m.timers:
            if t.interval_ms <= 0:
                errs.append(f"{tag}.timers.{t.id}: interval must be positive")
        for s in m.subscriptions:
            if s.channel not in channels:
                errs.append(f"{tag}: subscribes to unknown channel {s.channel!r}")
            elif channels[s.channel][0] != m.processor:
                errs.append(f"{tag}: channel {s.channel!r} is bound to {channels[s.channel][0]}, "
                            f"not {m.processor}")
            if s.rate_hz <= 0:
                errs.append(f"{tag}: subscription rate for {s.channel!r} must be positive")

    type_of: dict[str, str] = {}
    for mid, ir in irs.items():
        for obj, ty in ir.shared.items():
            if ty and types and ty not in types:
                errs.append(f"modules.{mid}: shared {obj!r} has undefined type {ty!r}")
            if type_of.setdefault(obj, ty) != ty:
                errs.append(f"shared {obj!r}: declared with types {type_of[obj]!r} and {ty!r}")
        for p in ir.procedures:
            for _, _, s in p.statements():
                target = getattr(s, "target", None)
                if target and "." in target:
                    mod, proc = target.split(".", 1)
                    if mod not in irs and mod not in ids:
                        errs.append(f"modules.{mid}: call to unknown module {mod!r}")
                    elif mod in irs and not irs[mod].has_proc(proc):
                        errs.append(f"modules.{mid}: call to unknown procedure {target!r}")
                dst = getattr(s, "dst", None)
                if dst and dst not in ids:
                    errs.append(f"modules.{mid}: send to unknown module {dst!r}")
    for obj, vals in cfg.initial.items():
        if obj not in type_of:
            errs.append(f"initial.{obj}: not a shared object")
    for i, q in enumerate(cfg.workload.ui_queries):
        if q.module not in ids:
            errs.append(f"workload.ui_queries[{i}]: unknown module {q.module!r}")
        if q.period_ms <= 0:
            errs.append(f"workload.ui_queries[{i}]: period must be positive")
        if not 0 <= q.jitter_ms < q.period_ms:
            errs.append(f"workload.ui_queries[{i}]: jitter must be in [0, period)")
    if raise_errors and errs:
        raise ConfigError(errs)
    return errs
