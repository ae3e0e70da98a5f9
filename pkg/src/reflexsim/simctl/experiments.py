"""Ablations (one toggle flipped, same seed) and the scenario deadlock check."""

from __future__ import annotations

from ..dsm.checker import CounterexampleTrace, Inconclusive, Safe, build_app, verify_no_deadlock
from ..dsm.world import WorldApp
from ..instrument.ir import Read, Write
from ..instrument.roles import assign_roles, sharing_groups
from .config import ScenarioConfig
from .engine import _r, run

ABLATIONS = {
    "inter_batching_off": {"inter_batching": False},
    "intra_batching_off": {"intra_batching": False},
    "role_swap": {"role_swap": True},
}

EXIT_SAFE, EXIT_COUNTEREXAMPLE, EXIT_INCONCLUSIVE = 0, 1, 2


def _ratio(a: float, b: float) -> float | None:
    return _r(a / b) if b else None


def ablate(cfg: ScenarioConfig, toggle: str) -> dict:
    if toggle not in ABLATIONS:
        raise KeyError(f"unknown ablation {toggle!r}; choose from {sorted(ABLATIONS)}")
    base = run(cfg, legacy_baseline=False)
    flipped = run(cfg.with_toggles(**ABLATIONS[toggle]), legacy_baseline=False)
    central = cfg.build_platform().central
    e = lambda r, p: r["energy"].get(p, {}).get("energy_mJ", 0.0)
    ratios = {
        "total_requester_latency": _ratio(flipped["latency"]["total_requester_ms"],
                                          base["latency"]["total_requester_ms"]),
        "state_checks": _ratio(flipped["state_checks_total"], base["state_checks_total"]),
        "central_energy": _ratio(e(flipped, central), e(base, central)),
        "system_power": _ratio(flipped["system_power_mW"], base["system_power_mW"]),
        "dsm_messages": _ratio(flipped["messages"]["by_kind"].get("DsmRequestBatch", 0),
                               base["messages"]["by_kind"].get("DsmRequestBatch", 0)),
    }
    return {"schema": "reflexsim.ablation/1", "scenario": cfg.name, "toggle": toggle,
            "baseline": base, "toggled": flipped, "ratios": ratios}


def world_app(cfg: ScenarioConfig) -> WorldApp:
    """Abstract the scenario for the checker: one program per module touching,
    in first-access order, every shared object any of its procedures touches."""
    irs = cfg.module_irs()
    plat = cfg.build_platform()
    placement = {m.id: m.processor for m in cfg.modules}
    _, order = assign_roles(irs.values(), placement, plat, swap=cfg.toggles.role_swap)
    ranks = {m: order.rank(m) for m in order.modules()}
    groups = {o: sorted(ms) for o, ms in sharing_groups(irs.values()).items() if len(ms) > 1}
    accesses = {}
    for mid, ir in irs.items():
        seen: dict[str, bool] = {}
        for p in ir.procedures:
            for _, _, s in p.statements():
                if isinstance(s, (Read, Write)) and s.obj in groups:
                    seen[s.obj] = seen.get(s.obj, False) or isinstance(s, Write)
        if seen:
            accesses[mid] = list(seen.items())
    app = build_app(ranks, groups, accesses, cfg.toggles.regulation)
    return app


def check(cfg: ScenarioConfig, bound: int = 200, max_states: int = 2_000_000):
    """Verdict plus its exit code (0 Safe, 1 counterexample, 2 inconclusive)."""
    verdict = verify_no_deadlock(world_app(cfg), bound=bound, max_states=max_states)
    if isinstance(verdict, Safe):
        return verdict, EXIT_SAFE
    if isinstance(verdict, CounterexampleTrace):
        return verdict, EXIT_COUNTEREXAMPLE
    assert isinstance(verdict, Inconclusive)
    return verdict, EXIT_INCONCLUSIVE


def pooled_latency(reports: list[dict]) -> dict:
    """Sample-weighted means over several runs: requester latency and its
    transport/lazy parts (releases excluded), and owner stall latency."""
    out = {}
    for part in ("latency", "transport", "transport_out", "lazy", "transport_back"):
        n = sum(r["latency"]["requester"][part]["count"] for r in reports)
        tot = sum(r["latency"]["requester"][part]["total"] for r in reports)
        out[f"requester_{part}"] = _r(tot / n) if n else 0.0
    n = sum(r["latency"]["owner"]["count"] for r in reports)
    out["owner"] = _r(sum(r["latency"]["owner"]["total"] for r in reports) / n) if n else 0.0
    out["requester_samples"] = sum(r["latency"]["requester"]["latency"]["count"] for r in reports)
    out["owner_samples"] = n
    return out
