import random

import pytest
from hypothesis import given, settings, strategies as st

from reflexsim.dsm.protocol import OwnerOrder, SharedObjectDescriptor
from reflexsim.instrument.harness import HarnessError, SyncSystem, compare_batching, random_app, run_instrumented
from reflexsim.instrument.idl import (AmbiguousTypeError, PointerTypeError, TypeDescriptor, dump_idl, generate_stubs,
                                      parse_idl, scalar)
from reflexsim.instrument.interp import count_state_checks
from reflexsim.instrument.ir import IRError, Post, Pre, dump, parse, same_program, strip
from reflexsim.instrument.modref import Access, analyze_mod_ref
from reflexsim.instrument.passes import (estimate_footprint, held_across_blocking, instrument, ordering_violations,
                                         unchecked_owner_accesses)
from reflexsim.instrument.roles import RoleError, assign_roles
from reflexsim.platform import default_platform

MM, YM, MR, YR = Access.MUST_MOD, Access.MAY_MOD, Access.MUST_REF, Access.MAY_REF

UWAVE = """
module uwave size 1800
shared tmpl Template
proc match
block entry
  sense accel
  read tmpl 0
  goto outer
block outer
  loop 64 row done
block row
  goto inner
block inner
  loop 64 cell next
block cell
  read tmpl 1
  compute 40
  goto inner
block next
  goto outer
block done
  ret
end
"""


def one_owner(module, objs, slots=2):
    descs = [SharedObjectDescriptor(o, "T", frozenset({module}), module, 4 * slots, slots) for o in objs]
    return descs, OwnerOrder({module: 0})


# ---- IR --------------------------------------------------------------------


def test_ir_round_trip_and_errors():
    ir = parse(UWAVE)
    assert ir.size == 1800 and ir.shared == {"tmpl": "Template"}
    assert same_program(parse(dump(ir)), ir)
    with pytest.raises(IRError, match="undeclared"):
        parse("module m\nproc p\nblock a\n  read x 0\n  ret\nend\n")
    with pytest.raises(IRError, match="terminator"):
        parse("module m\nproc p\nblock a\n  compute 1\nend\n")
    with pytest.raises(IRError, match="unknown"):
        parse("module m\nproc p\nblock a\n  goto z\nend\n")


def test_recursion_rejected():
    src = "module m\nproc a\nblock e\n  call b\n  ret\nproc b\nblock e\n  call a\n  ret\nend\n"
    with pytest.raises(IRError, match="recursion"):
        parse(src)


# ---- Mod/Ref ------------------------------------------------------------------


def test_write_then_read_is_must_mod_and_ref():
    ir = parse("module m\nshared o1\nproc p\nblock b\n  write o1 0 1\n  read o1 0\n  ret\nend\n")
    s = analyze_mod_ref(ir)
    assert {MM, MR} <= s.block("p", "b", "o1")
    assert {MM, MR} <= s.proc("p", "o1")


def test_one_armed_write_is_may_mod():
    ir = parse("""module m
shared o1
proc p
block e
  branch 0 t f
block t
  write o1 0 1
  goto j
block f
  goto j
block j
  ret
end
""")
    s = analyze_mod_ref(ir)
    assert YM in s.proc("p", "o1") and MM not in s.proc("p", "o1")
    assert s.block("p", "f", "o1") == frozenset({Access.NEVER})


def test_nested_loop_body_must_ref():
    s = analyze_mod_ref(parse(UWAVE))
    assert MR in s.block("match", "cell", "tmpl")
    assert Access.MUST_REF in s.proc("match", "tmpl")  # entry read is on every path


def test_callee_summary_flows_into_caller():
    ir = parse("module m\nshared o\nproc a\nblock e\n  call b\n  ret\nproc b\nblock e\n  write o 0 1\n  blocking 3\n  ret\nend\n")
    s = analyze_mod_ref(ir)
    assert MM in s.proc("a", "o")
    assert s.blocking == {"a": True, "b": True}


# ---- roles ------------------------------------------------------------------------

def _irs(*pairs):
    return [parse(f"module {m}\n" + "".join(f"shared {o}\n" for o in objs)
                  + "proc p\nblock e\n  compute 1\n  ret\nend\n") for m, objs in pairs]


def test_peripheral_owns_and_central_requests():
    descs, order = assign_roles(_irs(("ui", ["x"]), ("pedo", ["x"])), {"ui": "OMAP3", "pedo": "MSP"},
                                default_platform())
    assert descs[0].owner == "pedo" and descs[0].requesters == ["ui"]
    assert order.modules() == ["pedo", "ui"]


def test_weakest_peripheral_owns():
    descs, _ = assign_roles(_irs(("a", ["h"]), ("b", ["h"])), {"a": "LPC", "b": "MSP"}, default_platform())
    assert descs[0].owner == "b"


def test_group_of_one_owns_and_needs_no_messages():
    irs = _irs(("solo", ["z"]))
    irs[0] = parse("module solo\nshared z\nproc p\nblock e\n  write z 0 3\n  read z 0\n  ret\nend\n")
    descs, order = assign_roles(irs, {"solo": "MSP"}, default_platform())
    assert descs[0].owner == "solo" and descs[0].requesters == []
    inst = instrument(irs[0], None, descs, order)
    sysm = SyncSystem({"solo": inst.ir}, descs, order)
    sysm.run("solo", "p")
    assert sysm.messages == 0


def test_rank_tie_in_group_rejected():
    with pytest.raises(RoleError, match="tie"):
        assign_roles(_irs(("a", ["h"]), ("b", ["h"])), {"a": "MSP", "b": "MSP"}, default_platform())


def test_role_swap_gives_strongest():
    descs, order = assign_roles(_irs(("ui", ["x"]), ("pedo", ["x"])), {"ui": "OMAP3", "pedo": "MSP"},
                                default_platform(), swap=True)
    assert descs[0].owner == "ui"


# ---- instrumentation ----------------------------------------------------------------

REQ_TWO_OWNERS = """module C
shared a
shared b
proc p
block e
  read b 0
  write a 0 2
  ret
end
"""


def _two_owner_descs():
    descs = [SharedObjectDescriptor("a", "T", frozenset({"O1", "C"}), "O1", 4),
             SharedObjectDescriptor("b", "T", frozenset({"O2", "C"}), "O2", 4)]
    return descs, OwnerOrder({"O1": 0, "O2": 1, "C": 2})


def test_requester_entry_and_exit_order():
    descs, order = _two_owner_descs()
    inst = instrument(parse(REQ_TWO_OWNERS), None, descs, order)
    stmts = inst.ir.proc("p").blocks[0].stmts
    pres = [s for s in stmts if isinstance(s, Pre)]
    posts = [s for s in stmts if isinstance(s, Post)]
    assert [p.items for p in pres] == [(("a", True),), (("b", False),)]
    assert [p.objs for p in posts] == [("b",), ("a",)]
    assert stmts.index(pres[-1]) < stmts.index(posts[0])
    assert ordering_violations(inst) == []


def test_inter_batching_off_splits_per_object():
    descs = [SharedObjectDescriptor(o, "T", frozenset({"O1", "C"}), "O1", 4) for o in ("a", "b")]
    order = OwnerOrder({"O1": 0, "C": 1})
    on = instrument(parse(REQ_TWO_OWNERS), None, descs, order)
    off = instrument(parse(REQ_TWO_OWNERS), None, descs, order, inter=False)
    assert [len(s.items) for s in on.sites() if isinstance(s, Pre)] == [2]
    assert [len(s.items) for s in off.sites() if isinstance(s, Pre)] == [1, 1]


def test_owner_loop_check_eliminated():
    ir = parse(UWAVE)
    descs, order = one_owner("uwave", ["tmpl"])
    inst = instrument(ir, None, descs, order)
    pres = [s for s in inst.sites() if isinstance(s, Pre)]
    assert len(pres) == 1  # only the entry block keeps its check
    assert ("match", "cell", "tmpl", "entry") in inst.eliminated
    assert unchecked_owner_accesses(inst) == []


def test_no_shared_access_leaves_ir_unchanged():
    ir = parse("module m\nshared x\nproc p\nblock e\n  compute 5\n  blocking 2\n  ret\nend\n")
    descs = [SharedObjectDescriptor("x", "T", frozenset({"m", "c"}), "c", 4)]
    inst = instrument(ir, None, descs, OwnerOrder({"c": 0, "m": 1}))
    assert same_program(inst.ir, ir)
    assert estimate_footprint(inst) == (0, 0)


def test_blocking_point_splits_requester_block():
    ir = parse("module C\nshared a\nproc p\nblock e\n  write a 0 1\n  blocking 4\n  read a 0\n  ret\nend\n")
    descs = [SharedObjectDescriptor("a", "T", frozenset({"O", "C"}), "O", 4)]
    inst = instrument(ir, None, descs, OwnerOrder({"O": 0, "C": 1}))
    modes = [(type(s).__name__, s.mode) for s in inst.sites()]
    assert modes == [("Pre", "entry"), ("Post", "split"), ("Pre", "split"), ("Post", "exit")]
    assert held_across_blocking(inst) == []


def test_footprint_is_ten_bytes_per_site():
    descs, order = _two_owner_descs()
    inst = instrument(parse(REQ_TWO_OWNERS), None, descs, order)
    assert estimate_footprint(inst) == (4, 40)
    # seven sites -> seventy bytes
    src = "module C\nshared a\nshared b\nproc p\nblock e\n  read a 0\n  blocking 1\n  read b 0\n  ret\nend\n"
    inst = instrument(parse(src), None, descs, order)
    assert estimate_footprint(inst) == (8, 80)
    n, bytes_ = estimate_footprint(inst, per_site=10)
    assert bytes_ == 10 * n


# ---- state-check counting -------------------------------------------------------------


def _checks(src, module, objs, intra):
    ir = parse(src)
    descs, order = one_owner(module, objs)
    inst = instrument(ir, None, descs, order, intra=intra)
    return sum(count_state_checks(run_instrumented(inst, descs, order, ir.procedures[0].name)).values())


def test_uwave_intra_batching_ratio():
    off = _checks(UWAVE, "uwave", ["tmpl"], intra=False)
    on = _checks(UWAVE, "uwave", ["tmpl"], intra=True)
    assert on == 1 and off == 64 * 64 + 1
    assert off / on >= 1000


def test_straight_line_single_access_ratio_one():
    src = "module m\nshared x\nproc p\nblock e\n  read x 0\n  ret\nend\n"
    assert _checks(src, "m", ["x"], False) == _checks(src, "m", ["x"], True) == 1


def test_loop_never_entered_only_entry_check():
    src = UWAVE.replace("loop 64 row done", "loop 0 row done")
    assert _checks(src, "uwave", ["tmpl"], False) == _checks(src, "uwave", ["tmpl"], True) == 1


# ---- batching oracle -------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batched_equals_reference_and_plain(seed):
    app = random_app(random.Random(seed))
    c = compare_batching(app, seed=seed)
    assert c.equal


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_static_disciplines_on_random_programs(seed):
    app = random_app(random.Random(seed))
    for ir in app.irs.values():
        assert same_program(parse(dump(ir)), ir)
        for intra in (True, False):
            for inter in (True, False):
                inst = instrument(ir, None, app.descriptors, app.order, intra=intra, inter=inter)
                assert same_program(strip(inst.ir), ir)
                assert same_program(parse(dump(inst.ir)), inst.ir)
                assert ordering_violations(inst) == []
                assert held_across_blocking(inst) == []
                assert unchecked_owner_accesses(inst) == []
                for proc, block, obj, d in inst.eliminated:
                    assert d in inst.original.proc(proc).dominators()[block] and d != block


def test_missing_release_is_caught_by_oracle():
    # dropping exit releases leaves a requester holding an object
    descs, order = _two_owner_descs()
    ir = parse(REQ_TWO_OWNERS)
    inst = instrument(ir, None, descs, order)
    for b in inst.ir.proc("p").blocks:
        b.stmts = [s for s in b.stmts if not isinstance(s, Post)]
    owners = {m: parse(f"module {m}\nshared {o}\nproc p\nblock e\n  write {o} 0 1\n  ret\nend\n")
              for m, o in (("O1", "a"), ("O2", "b"))}
    irs = {"C": inst.ir, **{m: instrument(i, None, descs, order).ir for m, i in owners.items()}}
    sysm = SyncSystem(irs, descs, order)
    sysm.run("C", "p")
    assert not sysm.quiescent()
    with pytest.raises(HarnessError):
        sysm.run("O1", "p")


# ---- IDL ---------------------------------------------------------------------------------


def test_pedometer_stats_stub():
    types = parse_idl("struct PedoStats\n  int32 steps\n  int32 stride\n  int32 velocity\n  int32 distance\nend\n")
    stub = generate_stubs(types["PedoStats"])
    assert stub.size == 16
    assert stub.unmarshal(stub.marshal((1, -2, 3, 4))) == (1, -2, 3, 4)


def test_template_array_stub():
    t = parse_idl("struct Template\n  int32[64] data\nend\n")["Template"]
    assert t.slots == 64 and generate_stubs(t).size == 256


def test_empty_descriptor():
    stub = generate_stubs(TypeDescriptor("Empty"))
    assert stub.marshal(()) == b"" and stub.unmarshal(b"") == ()


def test_pointer_and_ambiguous_types_rejected():
    with pytest.raises(PointerTypeError):
        parse_idl("struct S\n  int32* p\nend\n")
    with pytest.raises(PointerTypeError):
        scalar("uintptr_t", "addr")
    with pytest.raises(AmbiguousTypeError):
        parse_idl("struct S\n  int n\nend\n")


def test_idl_text_round_trip():
    types = parse_idl("struct A\n  uint8 f\n  int16[3] g\nend\nstruct B\nend\n")
    assert parse_idl(dump_idl(list(types.values()))) == types


fields = st.lists(st.tuples(st.sampled_from(["int8", "int16", "int32", "int64", "uint8", "uint16", "uint32",
                                             "uint64"]), st.integers(1, 4)), max_size=5)


@settings(max_examples=100, deadline=None)
@given(fields, st.data())
def test_marshal_round_trip(spec, data):
    desc = TypeDescriptor("R", tuple(scalar(f"{t}[{n}]" if n > 1 else t, f"f{i}") for i, (t, n) in enumerate(spec)))
    stub = generate_stubs(desc)
    vals = []
    for f in desc.fields:
        lo, hi = f.bounds()
        vals += data.draw(st.lists(st.integers(lo, hi), min_size=f.count, max_size=f.count))
    raw = stub.marshal(vals)
    assert len(raw) == desc.size
    assert stub.unmarshal(raw) == tuple(vals)
