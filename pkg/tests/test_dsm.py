import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from reflexsim.dsm.checker import (CounterexampleTrace, Inconclusive, Safe, build_app, canonical_app,
                                   enumerate_instances, opposite_order_instance, sweep, verify_no_deadlock)
from reflexsim.dsm.protocol import (CopyState, CoherenceViolation, DsmNode, OwnerOrder,
                                    ProtocolError, RequestKind, Role, SharedObjectDescriptor, plan_requests)
from reflexsim.dsm.world import (OwnerAccess, Request, World, compile_procedure, make_descriptors, random_run)

A, RL, RP = RequestKind.ACQUIRE, RequestKind.RELEASE, RequestKind.REPLICATE
RANKS = {"P": 0, "Q": 1, "C": 2}


def nodes(groups, initial=None):
    descs = make_descriptors(RANKS, groups)
    return {m: DsmNode.build(m, descs, initial) for m in RANKS}


def exchange(req, owner, items):
    batch = req.request_batch(owner.module, items)
    pairs = owner.serve(batch)
    for b, resp in pairs:
        if b is batch:
            req.apply_response(batch, resp)
    return batch, pairs


def test_owner_is_weakest_member():
    descs = make_descriptors(RANKS, {"x": ["C", "P"], "y": ["C", "Q"], "z": ["P", "Q"]})
    assert {d.object_id: d.owner for d in descs} == {"x": "P", "y": "Q", "z": "P"}
    assert make_descriptors(RANKS, {"x": ["C", "P"]}, swap_roles=True)[0].owner == "C"


def test_descriptor_owner_must_be_member():
    with pytest.raises(Exception):
        SharedObjectDescriptor("x", "int32", frozenset({"P"}), "C", 4)


def test_replicate_refreshes_copy_without_state_change():
    n = nodes({"x": ["P", "C"]}, {"x": (7,)})
    n["P"].copies["x"].value = (42,)
    exchange(n["C"], n["P"], [("x", RP)])
    assert n["C"].value("x") == (42,)
    assert n["C"].state("x") is CopyState.SHARED
    assert n["P"].state("x") is CopyState.EXCLUSIVE


def test_acquire_then_release_round_trip():
    n = nodes({"x": ["P", "C"]})
    exchange(n["C"], n["P"], [("x", A)])
    assert n["C"].state("x") is CopyState.EXCLUSIVE
    assert n["P"].state("x") is CopyState.INVALID
    n["C"].write("x", 0, 99)
    exchange(n["C"], n["P"], [("x", RL)])
    assert n["P"].value("x") == (99,)
    assert n["P"].state("x") is CopyState.EXCLUSIVE
    assert n["C"].state("x") is CopyState.SHARED


def test_release_carries_value_even_when_unmodified():
    n = nodes({"x": ["P", "C"]}, {"x": (5,)})
    exchange(n["C"], n["P"], [("x", A)])
    batch = n["C"].request_batch("P", [("x", RL)])
    assert batch.requests[0].value == (5,)


def test_batched_response_is_atomic():
    n = nodes({"o1": ["P", "C"], "o2": ["P", "C"]}, {"o2": (3,)})
    batch, pairs = exchange(n["C"], n["P"], [("o1", A), ("o2", RP)])
    assert len(pairs) == 1
    (_, resp), = pairs
    assert resp.results == (("o1", A, (0,)), ("o2", RP, (3,)))
    assert n["P"].state("o1") is CopyState.INVALID
    assert n["P"].state("o2") is CopyState.EXCLUSIVE


def test_acquire_while_invalid_is_queued_until_release():
    n = nodes({"x": ["P", "Q", "C"]})
    exchange(n["C"], n["P"], [("x", A)])
    b2 = n["Q"].request_batch("P", [("x", A)])
    assert n["P"].serve(b2) == []
    assert n["P"].pending == [b2]
    n["C"].write("x", 0, 11)
    rel, pairs = exchange(n["C"], n["P"], [("x", RL)])
    assert [b for b, _ in pairs] == [rel, b2]  # release ack, then the drained acquire
    resp = [r for b, r in pairs if b is b2][0]
    n["Q"].apply_response(b2, resp)
    assert n["Q"].value("x") == (11,)
    assert n["Q"].is_exclusive("x") and not n["C"].is_exclusive("x")


def test_two_queued_acquires_served_fifo():
    n = nodes({"x": ["P", "Q", "C"]})
    n["P"].copies["x"].state = CopyState.INVALID  # someone else holds it; value arrives by release
    bq = n["Q"].request_batch("P", [("x", A)])
    bc = n["C"].request_batch("P", [("x", A)])
    assert n["P"].serve(bq) == [] and n["P"].serve(bc) == []
    n["P"].copies["x"].state = CopyState.EXCLUSIVE
    out = n["P"].drain()
    assert [b for b, _ in out] == [bq]
    assert n["P"].pending == [bc]


def test_owner_cannot_issue_requests():
    n = nodes({"x": ["P", "C"]})
    with pytest.raises(ProtocolError):
        n["P"].request_batch("P", [("x", A)])


def test_batch_must_target_one_owner():
    n = nodes({"x": ["P", "C"], "y": ["Q", "C"]})
    with pytest.raises(ProtocolError):
        n["C"].request_batch("P", [("x", A), ("y", A)])


def test_mixed_owner_batch_rejected_by_server():
    n = nodes({"x": ["P", "C"], "y": ["Q", "C"]})
    batch = n["C"].request_batch("Q", [("y", A)])
    with pytest.raises(ProtocolError):
        n["P"].serve(batch)


def test_release_without_holding_rejected():
    n = nodes({"x": ["P", "C"]})
    with pytest.raises(ProtocolError):
        n["C"].request_batch("P", [("x", RL)])


def test_local_access_rules():
    n = nodes({"x": ["P", "C"]})
    with pytest.raises(CoherenceViolation):
        n["C"].write("x", 0, 1)
    exchange(n["C"], n["P"], [("x", A)])
    with pytest.raises(CoherenceViolation):
        n["P"].read("x")
    assert n["P"].role("x") is Role.OWNER


def test_plan_requests_skips_exclusive_and_orders_by_owner():
    n = nodes({"x": ["P", "C"], "y": ["Q", "C"], "z": ["P", "C"]})
    order = OwnerOrder(RANKS)
    plan = plan_requests(n["C"], {"y": A, "x": RP, "z": A}, order)
    assert plan == [("P", [("x", RP), ("z", A)]), ("Q", [("y", A)])]
    exchange(n["C"], n["P"], [("x", A), ("z", A)])
    assert plan_requests(n["C"], {"x": A, "z": A}, order) == []


def test_owner_order_rejects_ties():
    with pytest.raises(Exception):
        OwnerOrder({"a": 0, "b": 0})


def test_compiled_procedure_orders_batches():
    descs = make_descriptors(RANKS, {"x": ["P", "C"], "y": ["Q", "C"]})
    owner_of = {d.object_id: d.owner for d in descs}
    prog = compile_procedure("C", [("y", True), ("x", False)], owner_of, OwnerOrder(RANKS))
    reqs = [op for op in prog if isinstance(op, Request)]
    assert [(r.owner, r.items) for r in reqs] == [
        ("P", (("x", RP),)), ("Q", (("y", A),)), ("Q", (("y", RL),))]


# ---- checker -------------------------------------------------------------


def test_opposite_order_without_regulation_deadlocks():
    v = verify_no_deadlock(opposite_order_instance(regulation=False))
    assert isinstance(v, CounterexampleTrace) and v.exit_code == 1
    assert sorted(v.cycle) == ["R1", "R2"]
    text = v.render()
    assert text.startswith("# wait-cycle:")
    assert all(len(line.split()) >= 4 for line in text.splitlines()[1:])


def test_opposite_order_with_regulation_is_safe():
    v = verify_no_deadlock(opposite_order_instance(regulation=True))
    assert isinstance(v, Safe) and v.exit_code == 0


def test_counterexample_is_shortest():
    # without reduction the search is plain BFS, so no shorter stuck state exists
    v = verify_no_deadlock(opposite_order_instance(False))
    steps = {int(line.split()[0]) for line in v.steps}
    assert max(steps) + 1 == 12


def test_single_module_is_safe():
    app = build_app({"M": 0}, {"a": ["M"], "b": ["M"]}, {"M": [("a", True), ("b", True), ("a", False)]})
    assert isinstance(verify_no_deadlock(app), Safe)


def test_bound_exceeded_is_inconclusive():
    v = verify_no_deadlock(opposite_order_instance(True), bound=3)
    assert isinstance(v, Inconclusive) and v.exit_code == 2


def test_two_requesters_one_object_exclusivity_exhaustive():
    app = build_app(RANKS, {"x": ["P", "Q", "C"]}, {"Q": [("x", True)], "C": [("x", True)]})
    # explore every interleaving with the invariant observer switched on
    seen, stack = set(), [World(app, values=True)]
    while stack:
        w = stack.pop()
        for label in w.enabled():
            nxt = _full_clone(w)
            nxt.apply(label)
            k = nxt.key()
            if k not in seen:
                seen.add(k)
                stack.append(nxt)
    assert len(seen) > 10


def _full_clone(w):
    import copy
    return copy.deepcopy(w)


def test_reduction_keeps_verdicts():
    apps = list(itertools.islice(enumerate_instances(regulation=False), 0, None, 997))
    for app in apps:
        full = verify_no_deadlock(app)
        red = verify_no_deadlock(app, reduce=True)
        _, small = canonical_app(app)
        can = verify_no_deadlock(small, reduce=True)
        assert type(full) is type(red) is type(can)


def test_canonical_signature_merges_relabelled_objects():
    ranks = {"M0": 0, "M1": 1}
    a = build_app(ranks, {"g0o0": ["M0", "M1"]}, {"M1": [("g0o0", True)], "M0": [("g0o0", True)]})
    b = build_app(ranks, {"zz": ["M0", "M1"]}, {"M1": [("zz", True)], "M0": [("zz", True)]})
    assert canonical_app(a)[0] == canonical_app(b)[0]


def test_sampled_sweep_regulation_on_safe():
    res = sweep(itertools.islice(enumerate_instances(), 0, None, 211))
    assert res.instances > 200 and res.safe == res.instances


# ---- randomized coherence properties -------------------------------------

app_groups = st.dictionaries(
    st.sampled_from(["a", "b", "c", "d"]),
    st.sampled_from([("P", "C"), ("Q", "C"), ("P", "Q"), ("P", "Q", "C")]),
    min_size=1, max_size=4)


@st.composite
def small_apps(draw):
    groups = draw(app_groups)
    accesses = {}
    for m in RANKS:
        mine = [o for o, g in groups.items() if m in g]
        if not mine:
            continue
        acc = draw(st.lists(st.tuples(st.sampled_from(mine), st.booleans()), max_size=5))
        if acc:
            accesses[m] = acc
    return build_app(RANKS, groups, accesses)


@settings(max_examples=150, deadline=None)
@given(small_apps(), st.integers(0, 2**32 - 1))
def test_random_schedules_preserve_coherence(app, seed):
    w = random_run(app, random.Random(seed), max_steps=500)
    assert w.terminal()
    # owner copies hold the last released value and every member agrees at quiescence
    for d in app.descriptors:
        holders = [m for m in d.sharing_group if w.nodes[m].is_exclusive(d.object_id)]
        assert holders == [d.owner]
