"""Compiler side: module IR, Mod/Ref analysis, roles, access instrumentation, IDL stubs."""

from .idl import TypeDescriptor, generate_stubs, parse_idl
from .interp import InterpStats, Interpreter, count_state_checks
from .ir import ModuleIR, dump, parse
from .modref import Access, ModRefSummary, analyze_mod_ref
from .passes import InstrumentedModuleIR, estimate_footprint, instrument, strip
from .roles import assign_roles
