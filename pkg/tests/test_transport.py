import pytest
from hypothesis import given, settings, strategies as st

from reflexsim.platform import OMAP3, LinkSpec, Platform, PowerStateTimeline, default_platform, message_latency
from reflexsim.transport import (Event, EventKind, EventQueue, Message, MessageKind, RegistrationError, RoutingError,
                                 Scheduler, Transport, pairs_in_order, runtime_id)


def make(platform=None, accept=True):
    plat = platform or default_platform()
    sched = Scheduler()
    tl = PowerStateTimeline(p.id for p in plat.processors)
    got = []

    def deliver(msg, t):
        got.append((msg, t))
        if msg.kind is MessageKind.LOCATION_UPDATE:
            tr.apply_location_update(msg.dst.split("@")[1], msg)
            return True
        return accept(msg) if callable(accept) else accept

    tr = Transport(plat, sched, tl, deliver)
    return tr, sched, got


def settle(tr, sched, *regs):
    for m, p in regs:
        tr.register_module(m, p)
    sched.run_until(tr.location_quiescent_at)


def app(src, dst, n=0):
    return Message(src, dst, MessageKind.APP_DATA, bytes(n))


def test_register_broadcasts_to_every_peripheral():
    tr, sched, got = make()
    msgs = tr.register_module("PA", "MSP")
    assert len(msgs) == 2 and {m.dst for m in msgs} == {runtime_id("LPC"), runtime_id("MSP")}
    assert all(m.kind is MessageKind.LOCATION_UPDATE for m in msgs)
    assert tr.tables["MSP"].snapshot().get("PA") is None  # not yet applied remotely


def test_single_processor_registration_sends_nothing():
    plat = Platform((OMAP3,), LinkSpec(), "OMAP3")
    tr, _, _ = make(plat)
    assert tr.register_module("C", "OMAP3") == []


def test_replicas_agree_after_broadcast():
    tr, sched, got = make()
    settle(tr, sched, ("PA", "MSP"), ("PB", "LPC"))
    for proc in ("MSP", "LPC", "OMAP3"):
        assert tr.locate("PA", proc) == "MSP" and tr.locate("PB", proc) == "LPC"
    tr.deregister_module("PA")
    with pytest.raises(RoutingError):
        tr.locate("PA", "OMAP3")


def test_duplicate_registration_rejected():
    tr, _, _ = make()
    tr.register_module("PA", "MSP")
    with pytest.raises(RegistrationError):
        tr.register_module("PA", "LPC")


def test_unknown_destination_is_routing_error():
    tr, _, _ = make()
    tr.register_module("C", "OMAP3")
    with pytest.raises(RoutingError):
        tr.send(app("C", "ghost"), 0.0, "OMAP3")


def test_same_processor_send_has_no_link_latency():
    tr, sched, got = make()
    settle(tr, sched, ("A", "MSP"), ("B", "MSP"))
    rec = tr.send(app("A", "B", 32), 50.0, "MSP")
    spec = default_platform().spec("MSP")
    expect = spec.cycles_to_ms(spec.msg_send_cycles) + spec.cycles_to_ms(spec.msg_recv_cycles)
    assert rec.arrive_time == pytest.approx(50.0 + expect)


def test_central_destination_is_seven_ms_slower():
    plat = default_platform()
    tr, sched, got = make(plat)
    settle(tr, sched, ("C", "OMAP3"), ("PA", "MSP"), ("PB", "LPC"))
    to_central = tr.send(app("PA", "C", 20), 50.0, "MSP")
    to_periph = tr.send(app("PA", "PB", 20), 50.0, "MSP")
    wire_c = to_central.leg_ms - _overheads(plat, "MSP", "OMAP3")
    wire_p = to_periph.leg_ms - _overheads(plat, "MSP", "LPC")
    assert wire_c == pytest.approx(message_latency(plat.link, 28, True))
    assert wire_c - wire_p == pytest.approx(7.0)


def _overheads(plat, src, dst):
    s, d = plat.spec(src), plat.spec(dst)
    return s.cycles_to_ms(s.msg_send_cycles) + d.cycles_to_ms(d.msg_recv_cycles)


def test_full_queue_drop_is_silent_and_counted():
    tr, sched, got = make(accept=False)
    settle(tr, sched, ("A", "MSP"), ("B", "LPC"))
    tr.send(app("A", "B"), 50.0, "MSP")  # no exception for the sender
    sched.run_until(500)
    assert tr.stats.dropped["B"] == 1 and tr.stats.delivered["B"] == 0
    assert tr.stats.conserved()


def test_endpoints_active_during_transfer():
    plat = default_platform()
    tr, sched, got = make(plat)
    settle(tr, sched, ("A", "MSP"), ("C", "OMAP3"))
    before = {p: tr.timeline.active_time(p, 1000) for p in ("MSP", "OMAP3")}
    rec = tr.send(app("A", "C", 10), 100.0, "MSP")
    s, d = plat.spec("MSP"), plat.spec("OMAP3")
    wire = message_latency(plat.link, 18, True)
    assert tr.timeline.active_time("MSP", 1000) - before["MSP"] == pytest.approx(
        s.cycles_to_ms(s.msg_send_cycles) + wire)
    assert tr.timeline.active_time("OMAP3", 1000) - before["OMAP3"] == pytest.approx(
        wire + d.cycles_to_ms(d.msg_recv_cycles))
    assert rec.arrive_time == pytest.approx(100.0 + _overheads(plat, "MSP", "OMAP3") + wire)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["A", "B", "C"]), st.sampled_from(["A", "B", "C"]),
                          st.integers(0, 300), st.floats(0, 5)), min_size=1, max_size=30))
def test_fifo_per_pair_and_conservation(sends):
    tr, sched, got = make(accept=lambda m: len(m.payload) % 3 != 0)
    procs = {"A": "MSP", "B": "LPC", "C": "OMAP3"}
    settle(tr, sched, *procs.items())
    records, now = [], sched.now
    for src, dst, n, gap in sends:
        now += gap
        sched.run_until(now)
        records.append(tr.send(app(src, dst, n), now, procs[src]))
    assert pairs_in_order(records)
    sched.run_until(now + 1000)
    delivered = [(m.src, m.dst, m.payload) for m, _ in got if m.kind is MessageKind.APP_DATA]
    for pair in {(s, d) for s, d, _, _ in sends}:
        sent = [bytes(n) for s, d, n, _ in sends if (s, d) == pair]
        assert [p for s, d, p in delivered if (s, d) == pair] == sent
    assert tr.stats.conserved() and tr.stats.in_flight == 0


# ---- event queue -------------------------------------------------------------


def ev(kind, body=None, t=0.0):
    if kind is EventKind.INCOMING_MESSAGE:
        body = body or Message("x", "y", MessageKind.DSM_REQUEST)
    return Event(kind, body, t)


def test_poll_prefers_sensor_data_over_requests():
    q = EventQueue()
    q.push(ev(EventKind.INCOMING_MESSAGE))
    q.push(ev(EventKind.SENSOR_DATA, ("accel", (1, 2, 3))))
    assert q.poll().kind is EventKind.SENSOR_DATA
    assert q.poll().kind is EventKind.INCOMING_MESSAGE


def test_poll_empty_and_fifo_within_kind():
    q = EventQueue()
    assert q.poll() is None
    q.push(ev(EventKind.TIMER, "t", 1.0))
    q.push(ev(EventKind.TIMER, "t", 2.0))
    assert q.poll().enqueue_time == 1.0


def test_queue_capacity_drops_newest():
    q = EventQueue(capacity=2)
    assert q.push(ev(EventKind.TIMER, 1)) and q.push(ev(EventKind.TIMER, 2))
    assert not q.push(ev(EventKind.TIMER, 3))
    assert [e.body for e in q] == [1, 2] and q.peak_depth == 2


def test_incoming_message_event_needs_message():
    with pytest.raises(TypeError):
        Event(EventKind.INCOMING_MESSAGE, "not a message", 0.0)


def test_scheduler_orders_ties_by_insertion():
    s, out = Scheduler(), []
    s.at(5, out.append, "a")
    s.at(5, out.append, "b")
    s.at(1, out.append, "c")
    s.run_until(10)
    assert out == ["c", "a", "b"] and s.now == 10
    with pytest.raises(ValueError):
        s.at(3, out.append, "late")
