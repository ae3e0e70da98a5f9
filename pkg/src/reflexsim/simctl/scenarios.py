"""Built-in benchmark scenarios.

Signal processing is modeled as ``compute`` cycles; detections (a step, a
gesture, a GPS request, an admitted sound frame) as ``prob`` branches whose
rates follow each benchmark's workload assumptions.
"""

from __future__ import annotations

from .config import ModuleConfig, ScenarioConfig, SensorConfig, Subscription, TimerConfig, UIQuery, Workload

ACCEL = {"kind": "sinusoid", "amplitude": 300, "period_ms": 800, "offset": 512, "axes": 3}

# ---- pedometer --------------------------------------------------------------------

PEDO_TYPES = """\
struct PedoStats
  int32 steps
  int32 stride
  int32 distance
  int32 calories
end
"""

PEDO_PERIPHERAL = """\
module pedometer size 2400
shared stats PedoStats
proc OnCreate
block e
  write stats 0 0
  write stats 1 70
  write stats 2 0
  write stats 3 0
  ret
proc OnData:accel
block e
  compute 62000              # low-pass filter, peak detection
  read stats 1
  prob 0.0833 step done      # one step per 400 ms at 30 Hz
block step
  write stats 0 1
  call stride
  write stats 2 0
  write stats 3 0
  goto done
block done
  ret
proc stride
block e
  compute 4000
  read stats 0
  write stats 1 3
  ret
proc reset
block e
  write stats 0 0
  write stats 2 0
  write stats 3 0
  ret
end
"""

PEDO_CENTRAL = """\
module phone
shared stats PedoStats
proc OnData:ui
block e
  read stats 0
  read stats 2
  read stats 3
  compute 300000             # render the counters
  prob 0.05 reset done
block reset
  call pedometer.reset
  goto done
block done
  ret
end
"""

# ---- uWave --------------------------------------------------------------------------

UWAVE_TYPES = """\
struct Template
  int32[64] cells
end
"""

UWAVE_PERIPHERAL = """\
module uwave size 1800
shared tmplA Template
shared tmplB Template
proc OnCreate
block e
  write tmplA 0 1
  write tmplB 0 2
  ret
proc OnTimer:match
block e
  sense accel
  read tmplA 0
  read tmplB 0
  goto rows
block rows
  loop 64 cols done
block cols
  loop 64 cell rows
block cell
  read tmplA 3
  read tmplB 3
  goto cols
block done
  compute 60000              # DTW distance over the 64 x 64 grid
  prob 0.02 gesture fin
block gesture
  call phone.gesture
  write tmplA 1 7            # adapt the matched template
  goto fin
block fin
  ret
proc recalibrate
block e
  read tmplB 2
  write tmplB 2 1
  ret
end
"""

UWAVE_CENTRAL = """\
module phone
shared tmplA Template
shared tmplB Template
proc OnData:ui
block e
  read tmplA 0
  read tmplB 0
  compute 600000             # show the gesture library
  prob 0.3 edit done
block edit
  write tmplB 4 9            # user edits a template
  goto done
block done
  ret
proc gesture
block e
  compute 200000
  ret
end
"""

# ---- RAPS -----------------------------------------------------------------------------

RAPS_TYPES = """\
struct HistAvg
  int32[4] avg
end
struct GeoLog
  int32[6] fixes
end
struct Stamps
  int32[3] t
end
struct Count
  int32 n
end
"""

RAPS_A = """\
module raps_a size 2400
shared avg HistAvg
proc OnCreate
block e
  write avg 0 0
  write avg 1 0
  ret
proc OnData:accel
block e
  compute 40000              # movement features, position uncertainty
  read avg 0
  read avg 1
  prob 0.000405 gps done     # 350 fixes per day at 10 Hz
block gps
  call raps_b.locate
  read avg 2
  write avg 3 1
  goto done
block done
  ret
proc OnTimer:decay
block e
  read avg 0
  write avg 0 0
  call smooth
  write avg 1 0
  ret
proc smooth
block e
  compute 3000
  read avg 2
  write avg 2 1
  ret
end
"""

RAPS_B = """\
module raps_b size 2400
shared avg HistAvg
shared fixes GeoLog
shared stamps Stamps
shared count Count
proc OnCreate
block e
  write count 0 0
  write fixes 0 0
  ret
proc locate
block e
  blocking 1000              # wait for a GPS fix
  compute 150000
  read count 0
  write fixes 0 1
  write stamps 0 1
  write count 0 1
  read avg 0
  write avg 2 5              # fold the fix into the historical averages
  ret
proc OnTimer:prune
block e
  read count 0
  read fixes 1
  prob 0.5 drop done
block drop
  write fixes 1 0
  write count 0 0
  goto done
block done
  ret
end
"""

RAPS_CENTRAL = """\
module phone
shared fixes GeoLog
shared stamps Stamps
shared count Count
proc OnData:ui
block e
  read count 0
  read fixes 0
  read stamps 0
  compute 400000             # draw the recorded locations
  ret
end
"""

# ---- SoundSense ---------------------------------------------------------------------------

SS_TYPES = """\
struct Admission
  int32 energy
  int32 entropy
end
struct Features
  int32[8] f
end
"""

SS_PERIPHERAL = """\
module soundsense size 1800
shared params Admission
shared feats Features
proc OnCreate
block e
  write params 0 100
  write params 1 50
  ret
proc OnData:mic
block e
  compute 2300000            # frame energy and spectral entropy
  read params 0
  read params 1
  prob 0.0853 admit done     # 1.33 admitted frames/s at 15.6 frames/s
block admit
  compute 400000             # window features
  write feats 0 1
  write feats 1 1
  goto done
block done
  ret
proc OnTimer:noise
block e
  read params 0
  write feats 7 1
  ret
end
"""

SS_CENTRAL = """\
module phone
shared params Admission
shared feats Features
proc OnTimer:classify
block e
  read feats 0
  read feats 1
  compute 6000000            # classify the latest admitted window
  ret
proc OnTimer:adapt
block e
  read feats 2
  read params 0
  compute 6000000            # fit new admission thresholds
  write params 0 1
  ret
end
"""


def _phone(ir: str, timers=None) -> ModuleConfig:
    return ModuleConfig("phone", "OMAP3", "central", ir=ir, memory_budget=1 << 20, timers=list(timers or []))


def pedometer() -> ScenarioConfig:
    return ScenarioConfig(
        name="pedometer",
        description="Step counter on the MSP; the phone shows four shared integers on demand.",
        types=PEDO_TYPES,
        modules=[ModuleConfig("pedometer", "MSP", ir=PEDO_PERIPHERAL,
                              subscriptions=[Subscription("accel", 30.0)]),
                 _phone(PEDO_CENTRAL)],
        sensors=[SensorConfig("accel", "MSP", dict(ACCEL))],
        workload=Workload([UIQuery("phone", "ui", 30_000.0, 2_000.0, 5_000.0)]),
        duration_ms=120_000.0,
        assumptions={"steps": "one step detected every 400 ms", "ui": "UI query every 30 s"},
    )


def uwave() -> ScenarioConfig:
    return ScenarioConfig(
        name="uwave",
        description="Gesture matching on the MSP against two 64-int templates shared with the phone.",
        types=UWAVE_TYPES,
        modules=[ModuleConfig("uwave", "MSP", ir=UWAVE_PERIPHERAL,
                              timers=[TimerConfig("match", 500.0)]),
                 _phone(UWAVE_CENTRAL)],
        sensors=[SensorConfig("accel", "MSP", dict(ACCEL))],
        workload=Workload([UIQuery("phone", "ui", 900_000.0, 10_000.0, 20_000.0)]),
        duration_ms=60_000.0,
        assumptions={"ui": "UI activated every 15 min", "matching": "pattern match every 500 ms"},
    )


def raps() -> ScenarioConfig:
    return ScenarioConfig(
        name="raps",
        description="Movement tracking on the MSP (PA) asks the LPC (PB) for GPS fixes; "
                    "the phone queries the recorded locations.",
        types=RAPS_TYPES,
        modules=[ModuleConfig("raps_a", "MSP", ir=RAPS_A, subscriptions=[Subscription("accel", 10.0)],
                              timers=[TimerConfig("decay", 60_000.0)]),
                 ModuleConfig("raps_b", "LPC", ir=RAPS_B, timers=[TimerConfig("prune", 300_000.0)]),
                 _phone(RAPS_CENTRAL)],
        sensors=[SensorConfig("accel", "MSP", dict(ACCEL))],
        workload=Workload([UIQuery("phone", "ui", 60_000.0, 5_000.0, 10_000.0)]),
        duration_ms=3_600_000.0,
        assumptions={"gps": "350 new geo-locations per day, GPS on 27% of time (GPS power not modeled)",
                     "ui": "location query every 60 s"},
    )


def soundsense() -> ScenarioConfig:
    return ScenarioConfig(
        name="soundsense",
        description="Frame admission on the LPC; the phone classifies admitted windows and adapts "
                    "the admission thresholds.",
        types=SS_TYPES,
        modules=[ModuleConfig("soundsense", "LPC", ir=SS_PERIPHERAL,
                              subscriptions=[Subscription("mic", 15.625)],
                              timers=[TimerConfig("noise", 10_000.0)]),
                 _phone(SS_CENTRAL, [TimerConfig("classify", 750.0),
                                             TimerConfig("adapt", 2000.0)])],
        sensors=[SensorConfig("mic", "LPC", {"kind": "sinusoid", "amplitude": 2000, "period_ms": 230,
                                             "offset": 0, "axes": 1}, sample_bytes=2, read_cycles=100)],
        duration_ms=120_000.0,
        assumptions={"admission": "average frame admission rate 1.33 Hz",
                     "classification": "the phone classifies the latest window at the admission rate",
                     "adaptation": "admission thresholds refit every 2 s"},
    )


BUILTINS = {"pedometer": pedometer, "uwave": uwave, "raps": raps, "soundsense": soundsense}


def scenario_builtin(name: str) -> ScenarioConfig:
    try:
        return BUILTINS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(BUILTINS)}") from None
