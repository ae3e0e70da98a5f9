import json

import pytest

from reflexsim.simctl import BUILTINS, ConfigError, build, loads, run, scenario_builtin, to_json, validate
from reflexsim.simctl.cli import main
from reflexsim.simctl.config import ModuleConfig, ScenarioConfig, SensorConfig, Subscription
from reflexsim.simctl.engine import ReportError, csv_tables, simulate
from reflexsim.simctl.experiments import ablate, check, world_app
from reflexsim.transport import MessageKind


def descs(cfg):
    return {d.object_id: d for d in build(cfg).descriptors}


# ---- builtin scenarios ------------------------------------------------------------


def test_pedometer_shares_four_ints_owned_by_the_msp_module():
    d = descs(scenario_builtin("pedometer"))
    assert list(d) == ["stats"]
    assert d["stats"].size == 16 and d["stats"].fields == 4
    assert d["stats"].owner == "pedometer" and d["stats"].sharing_group == {"pedometer", "phone"}


def test_uwave_templates_and_query_period():
    cfg = scenario_builtin("uwave")
    d = descs(cfg)
    assert sorted(d) == ["tmplA", "tmplB"] and all(x.fields == 64 for x in d.values())
    assert cfg.workload.ui_queries[0].period_ms == 15 * 60 * 1000


def test_raps_groups():
    cfg = scenario_builtin("raps")
    d = descs(cfg)
    placement = {m.id: m.processor for m in cfg.modules}
    assert placement == {"raps_a": "MSP", "raps_b": "LPC", "phone": "OMAP3"}
    assert d["avg"].sharing_group == {"raps_a", "raps_b"} and d["avg"].owner == "raps_a"
    for o in ("fixes", "stamps", "count"):
        assert d[o].sharing_group == {"raps_b", "phone"} and d[o].owner == "raps_b"


def test_soundsense_is_one_lpc_peripheral_and_the_phone():
    cfg = scenario_builtin("soundsense")
    assert sorted((m.id, m.processor) for m in cfg.modules) == [("phone", "OMAP3"), ("soundsense", "LPC")]
    assert "1.33" in cfg.assumptions["admission"]


def test_unknown_builtin():
    with pytest.raises(KeyError):
        scenario_builtin("tetris")


@pytest.mark.parametrize("name", sorted(BUILTINS))
def test_builtins_validate_and_round_trip(name):
    cfg = scenario_builtin(name)
    assert validate(cfg) == []
    again = loads(cfg.to_json())
    assert again.to_json() == cfg.to_json()


# ---- validation ------------------------------------------------------------------------


def _tiny(**kw) -> ScenarioConfig:
    central = "module phone\nshared x\nproc OnData:ui\nblock e\n  read x 0\n  ret\nend\n"
    periph = "module p\nshared x\nproc OnData:accel\nblock e\n  write x 0 1\n  ret\nend\n"
    base = dict(name="tiny", modules=[ModuleConfig("p", "MSP", ir=periph, subscriptions=[Subscription("accel", 10)]),
                                      ModuleConfig("phone", "OMAP3", "central", ir=central)],
                sensors=[SensorConfig("accel", "MSP")], duration_ms=2000.0)
    base.update(kw)
    return ScenarioConfig(**base)


def test_errors_are_itemized():
    cfg = _tiny(sensors=[SensorConfig("accel", "MSP"), SensorConfig("accel", "LPC")], policy="panic")
    cfg.modules[0].subscriptions.append(Subscription("gyro", 5))
    cfg.modules[1].processor = "LPC"
    errs = validate(cfg)
    assert any("bound to 2 processors" in e for e in errs)
    assert any("unknown channel 'gyro'" in e for e in errs)
    assert any("central module must run on OMAP3" in e for e in errs)
    assert any("policy" in e for e in errs)
    with pytest.raises(ConfigError) as ei:
        validate(cfg, raise_errors=True)
    assert len(ei.value.errors) == len(errs) >= 4


def test_missing_ir_file_reported(tmp_path):
    cfg = _tiny()
    cfg.modules[0].ir, cfg.modules[0].ir_file = None, "nope.ir"
    cfg.base_dir = str(tmp_path)
    assert any("cannot read IR" in e for e in validate(cfg))


def test_ir_file_relative_to_config(tmp_path):
    cfg = _tiny()
    (tmp_path / "p.ir").write_text(cfg.modules[0].ir)
    raw = cfg.to_dict()
    raw["modules"][0]["ir"], raw["modules"][0]["ir_file"] = None, "p.ir"
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(raw))
    from reflexsim.simctl import load
    assert validate(load(str(path))) == []


def test_schema_and_unknown_fields_rejected():
    raw = _tiny().to_dict()
    raw["schema"] = "something/0"
    raw["modules"][0]["colour"] = "red"
    with pytest.raises(ConfigError) as ei:
        loads(json.dumps(raw))
    msg = "\n".join(ei.value.errors)
    assert "schema" in msg and "colour" in msg


def test_bad_json():
    with pytest.raises(ConfigError):
        loads("{not json")


# ---- running ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def pedo60():
    cfg = scenario_builtin("pedometer")
    cfg.duration_ms = 60_000.0
    return run(cfg)


def test_pedometer_report_has_every_section(pedo60):
    for key in ("energy", "system_power_mW", "legacy", "power_vs_legacy", "latency", "messages", "drops",
                "state_checks", "footprint", "exceptions", "modules", "conservation"):
        assert key in pedo60
    lat = pedo60["latency"]["requester"]
    assert set(lat) == {"latency", "transport", "transport_out", "lazy", "transport_back"}
    assert lat["latency"]["count"] > 0
    assert pedo60["conservation"] == {"messages": True, "energy": True}


def test_decomposition_adds_up(pedo60):
    lat = pedo60["latency"]["requester"]
    parts = lat["transport_out"]["total"] + lat["lazy"]["total"] + lat["transport_back"]["total"]
    assert parts == pytest.approx(lat["latency"]["total"], abs=1e-4)


def test_pedometer_central_active_only_around_ui_queries(pedo60):
    c = pedo60["energy"]["OMAP3"]
    n = pedo60["ui_queries"]
    assert n == 2
    # a query costs a few message legs and a short render; nothing in between
    assert 0 < c["active_ms"] < n * 150.0
    assert c["active_fraction"] < 0.005


def test_legacy_baseline_runs_on_the_central_only(pedo60):
    assert set(pedo60["legacy"]["energy"]) == {"OMAP3"}
    assert pedo60["power_vs_legacy"]["reduction_pct"] > 60


def test_zero_duration_counters_are_zero():
    cfg = scenario_builtin("pedometer")
    cfg.duration_ms = 0
    r = run(cfg, legacy_baseline=False)
    assert r["messages"]["sent"] == 0 and r["messages"]["by_kind"] == {}
    assert r["state_checks_total"] == 0 and r["latency"]["requester"]["latency"]["count"] == 0
    assert all(e["energy_mJ"] == 0 for e in r["energy"].values())
    assert r["system_power_mW"] == 0 and r["exceptions"] == [] and r["drops"] == {}


def test_soundsense_owner_stall_fraction():
    r = run(scenario_builtin("soundsense"), legacy_baseline=False)
    assert 0 < r["modules"]["soundsense"]["owner_stall_fraction"] <= 0.025


def test_same_seed_same_bytes():
    cfg = scenario_builtin("soundsense")
    cfg.duration_ms = 20_000
    assert to_json(run(cfg)) == to_json(run(cfg))


def test_other_seed_other_run():
    a, b = scenario_builtin("soundsense"), scenario_builtin("soundsense")
    a.duration_ms = b.duration_ms = 20_000
    b.seed = 7
    assert to_json(run(a, False)) != to_json(run(b, False))


def test_stall_timeout_gives_partial_report_with_diagnosis():
    cfg = scenario_builtin("pedometer")
    cfg.duration_ms, cfg.stall_timeout_ms = 40_000, 500.0
    b = build(cfg)
    b.sim.transport.fault_drop = lambda m: m.kind is MessageKind.DSM_RESPONSE
    r = simulate(b)
    assert r["timeouts"] and r["timeouts"][0]["module"] == "phone"
    assert r["timeouts"][0]["kind"] == "response"
    assert r["messages"]["dropped"] >= 1 and r["conservation"]["messages"]


def test_csv_tables(pedo60):
    tables = csv_tables(pedo60)
    assert tables["energy.csv"].splitlines()[0] == "processor,energy_mJ,avg_power_mW,active_ms,active_fraction"
    assert len(tables["energy.csv"].splitlines()) == 3
    assert "pedometer" in tables["state_checks.csv"]


def test_footprint_reported_per_module(pedo60):
    fp = pedo60["footprint"]["pedometer"]
    assert fp["bytes"] == 10 * fp["sites"] and fp["module_size"] == 2400


# ---- ablations and checks ---------------------------------------------------------------------


def test_ablation_pairs_share_the_seed():
    cfg = scenario_builtin("pedometer")
    cfg.duration_ms = 10_000
    a = ablate(cfg, "role_swap")
    assert a["baseline"]["seed"] == a["toggled"]["seed"]
    assert a["toggled"]["toggles"]["role_swap"] and not a["baseline"]["toggles"]["role_swap"]
    assert a["ratios"]["central_energy"] > 1
    with pytest.raises(KeyError):
        ablate(cfg, "turbo")


def test_raps_topology_is_safe():
    verdict, code = check(scenario_builtin("raps"))
    app = world_app(scenario_builtin("raps"))
    assert code == 0 and len(app.programs) == 3


def test_single_group_is_safe():
    assert check(scenario_builtin("pedometer"))[1] == 0


def opposite_order_config() -> ScenarioConfig:
    w = "module w\nshared o1\nshared o2\nproc OnCreate\nblock e\n  write o1 0 1\n  write o2 0 1\n  ret\nend\n"
    r1 = "module r1\nshared o1\nshared o2\nproc OnTimer\nblock e\n  write o1 0 1\n  write o2 0 1\n  ret\nend\n"
    r2 = "module phone\nshared o1\nshared o2\nproc OnTimer\nblock e\n  write o2 0 1\n  write o1 0 1\n  ret\nend\n"
    return ScenarioConfig("opposite", [ModuleConfig("w", "MSP", ir=w), ModuleConfig("r1", "LPC", ir=r1),
                                       ModuleConfig("phone", "OMAP3", "central", ir=r2)])


def test_opposite_order_needs_the_regulation():
    cfg = opposite_order_config()
    assert check(cfg)[1] == 0
    verdict, code = check(cfg.with_toggles(regulation=False))
    assert code == 1 and verdict.cycle


# ---- CLI ------------------------------------------------------------------------------------


def test_cli_scenario_then_validate(tmp_path, capsys):
    assert main(["scenario", "raps", "--out", str(tmp_path)]) == 0
    assert main(["validate", str(tmp_path / "raps.json")]) == 0
    assert "raps: ok" in capsys.readouterr().out


def test_cli_invalid_config_exit_code(tmp_path, capsys):
    raw = _tiny().to_dict()
    raw["modules"][0]["processor"] = "Z80"
    (tmp_path / "bad.json").write_text(json.dumps(raw))
    assert main(["validate", str(tmp_path / "bad.json")]) == 1
    assert "Z80" in capsys.readouterr().err


def test_cli_run_writes_json_and_csv(tmp_path):
    assert main(["run", "pedometer", "--duration", "3000", "--seed", "3", "--out", str(tmp_path),
                 "--format", "both"]) == 0
    report = json.loads((tmp_path / "pedometer.json").read_text())
    assert report["seed"] == 3 and report["duration_ms"] == 3000
    assert (tmp_path / "pedometer_latency.csv").exists()


def test_cli_check_counterexample(tmp_path, capsys):
    (tmp_path / "opp.json").write_text(opposite_order_config().to_json())
    assert main(["check", str(tmp_path / "opp.json")]) == 0
    assert main(["check", str(tmp_path / "opp.json"), "--no-regulation"]) == 1
    assert "cycle" in capsys.readouterr().out.lower()


def test_cli_usage_error():
    with pytest.raises(SystemExit) as ei:
        main(["frobnicate"])
    assert ei.value.code == 3


def test_report_error_is_an_assertion():
    assert issubclass(ReportError, AssertionError)
