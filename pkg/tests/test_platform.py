import math

import pytest
from hypothesis import given, strategies as st

from reflexsim.platform import (LPC, MSP, OMAP3, Interval, LinkSpec, Platform, PlatformError, PowerState,
                                PowerStateTimeline, ProcessorSpec, TimelineError, VirtualClock, charge_cycles,
                                default_platform, message_latency, settle_energy)

SPECS = {p.id: p for p in (OMAP3, LPC, MSP)}


def test_zero_payload_peripheral_is_base_latency():
    link = LinkSpec()
    assert message_latency(link, 0, False) == link.base_latency


def test_central_destination_adds_seven_ms():
    link = LinkSpec()
    for n in (0, 16, 64, 256):
        assert message_latency(link, n, True) == pytest.approx(message_latency(link, n, False) + 7.0)


def test_typical_round_trip_transport_in_band():
    # a request to a peripheral owner and its response back to the central
    # requester, each carrying a small batch
    link = LinkSpec()
    for payload in (8 + 12, 8 + 28):
        transport = message_latency(link, payload, False) + message_latency(link, payload, True)
        assert 26.0 <= transport <= 33.0


def test_negative_payload_rejected():
    with pytest.raises(PlatformError):
        message_latency(LinkSpec(), -1, False)


def test_link_fields_non_negative():
    with pytest.raises(PlatformError):
        LinkSpec(base_latency=-1.0)


@given(st.integers(0, 4096), st.integers(0, 4096), st.booleans())
def test_latency_monotone_in_payload(a, b, central):
    lo, hi = sorted((a, b))
    link = LinkSpec()
    assert message_latency(link, lo, central) <= message_latency(link, hi, central)


def test_charge_cycles_examples():
    clock = VirtualClock()
    assert charge_cycles(MSP, 1500, clock) == pytest.approx(0.5)
    assert charge_cycles(LPC, 891, clock) == pytest.approx(0.012375)
    assert charge_cycles(OMAP3, 0, clock) == 0.0


def test_charge_cycles_marks_active():
    clock = VirtualClock(10.0)
    tl = PowerStateTimeline(["MSP"])
    charge_cycles(MSP, 3000, clock, tl)
    segs = tl.segments("MSP", 20.0)
    assert [(s.start, s.end, s.state) for s in segs] == [
        (0.0, 10.0, PowerState.IDLE), (10.0, 11.0, PowerState.ACTIVE), (11.0, 20.0, PowerState.IDLE)]


def test_clock_is_monotone():
    clock = VirtualClock(5.0)
    clock.advance_to(5.0)
    with pytest.raises(PlatformError):
        clock.advance_to(4.9)


def test_settle_energy_examples():
    led = settle_energy({"MSP": [Interval(0, 1000, PowerState.ACTIVE)]}, SPECS)
    assert led.energy["MSP"] == pytest.approx(7.5)
    led = settle_energy({"OMAP3": [Interval(0, 1000, PowerState.IDLE)]}, SPECS)
    assert led.energy["OMAP3"] == pytest.approx(13.4)
    assert settle_energy({"LPC": []}, SPECS).energy["LPC"] == 0.0


def test_settle_energy_rejects_overlap_and_gaps():
    with pytest.raises(TimelineError, match="overlapping"):
        settle_energy({"MSP": [Interval(0, 10, PowerState.IDLE), Interval(5, 20, PowerState.ACTIVE)]}, SPECS)
    with pytest.raises(TimelineError, match="non-contiguous"):
        settle_energy({"MSP": [Interval(0, 10, PowerState.IDLE), Interval(11, 20, PowerState.ACTIVE)]}, SPECS)


def test_timeline_merges_overlapping_marks():
    tl = PowerStateTimeline(["LPC"])
    tl.mark_active("LPC", 1, 4)
    tl.mark_active("LPC", 3, 6)
    tl.mark_active("LPC", 8, 9)
    assert tl.active_time("LPC", 10) == pytest.approx(6.0)
    settle_energy(tl.export(10), SPECS)  # contiguous by construction


@given(st.lists(st.tuples(st.floats(0, 500), st.floats(0, 50)), max_size=20), st.floats(1, 500))
def test_energy_additive_over_partition(marks, cut):
    horizon = 600.0
    tl = PowerStateTimeline(["MSP"])
    for s, d in marks:
        tl.mark_active("MSP", s, s + d)
    segs = tl.segments("MSP", horizon)
    whole = settle_energy({"MSP": segs}, SPECS).energy["MSP"]
    left, right = [], []
    for iv in segs:
        if iv.end <= cut:
            left.append(iv)
        elif iv.start >= cut:
            right.append(iv)
        else:
            left.append(Interval(iv.start, cut, iv.state))
            right.append(Interval(cut, iv.end, iv.state))
    parts = settle_energy({"MSP": left}, SPECS) + settle_energy({"MSP": right}, SPECS)
    assert math.isclose(parts.energy["MSP"], whole, rel_tol=1e-9, abs_tol=1e-9)
    assert whole >= 0


def test_processor_spec_validation():
    with pytest.raises(PlatformError):
        ProcessorSpec("X", 1e6, 0, 0, active_power=1.0, idle_power=2.0, strength_rank=0,
                      msg_send_cycles=0, msg_recv_cycles=0)


def test_platform_rejects_rank_ties():
    twin = ProcessorSpec("MSP2", 3e6, 0, 0, 7.5, 3.2, strength_rank=0, msg_send_cycles=1, msg_recv_cycles=1)
    with pytest.raises(PlatformError, match="ties"):
        Platform((OMAP3, MSP, twin), LinkSpec(), "OMAP3")


def test_default_platform_shape():
    plat = default_platform()
    assert plat.central == "OMAP3"
    assert plat.peripherals == ["LPC", "MSP"]
    assert plat.spec("MSP").clock_rate == 3e6
