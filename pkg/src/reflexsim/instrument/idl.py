"""Shared-type descriptions and packed little-endian marshaling stubs.

IDL text::

    struct PedoStats
      int32 steps
      uint16[8] hist
    end

Field types are ``int8/16/32/64``, ``uint8/16/32/64`` and ``bool``, with an
optional ``[n]`` array suffix. Pointers and pointer-sized integers are
rejected; C types without a fixed width (``int``, ``long``...) are refused
as ambiguous so the developer spells the width out.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from typing import Sequence


class SharedTypeError(ValueError):
    """Shared type rejected."""


class PointerTypeError(SharedTypeError):
    pass


class AmbiguousTypeError(SharedTypeError):
    pass


_FMT = {("int", 8): "b", ("int", 16): "h", ("int", 32): "i", ("int", 64): "q",
        ("uint", 8): "B", ("uint", 16): "H", ("uint", 32): "I", ("uint", 64): "Q"}
_AMBIGUOUS = {"int", "unsigned", "long", "short", "char", "size_t", "ssize_t", "float", "double"}
_POINTERISH = {"intptr_t", "uintptr_t", "ptrdiff_t", "ptr", "void"}
_FIELD_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(\*+)?(?:\[(\d+)\])?$")


@dataclass(frozen=True)
class Field:
    name: str
    signed: bool
    width: int  # bits
    count: int = 1

    @property
    def fmt(self) -> str:
        return _FMT[("int" if self.signed else "uint", self.width)] * self.count

    @property
    def size(self) -> int:
        return self.width // 8 * self.count

    def bounds(self) -> tuple[int, int]:
        if self.signed:
            return -(1 << (self.width - 1)), (1 << (self.width - 1)) - 1
        return 0, (1 << self.width) - 1


@dataclass(frozen=True)
class TypeDescriptor:
    name: str
    fields: tuple[Field, ...] = ()

    @property
    def size(self) -> int:
        return sum(f.size for f in self.fields)

    @property
    def slots(self) -> int:
        """Number of flattened scalar values."""
        return sum(f.count for f in self.fields)


def scalar(type_name: str, field_name: str = "_") -> Field:
    t = type_name.strip()
    m = _FIELD_RE.match(t)
    if m is None:
        raise SharedTypeError(f"cannot parse type {type_name!r}")
    base, stars, count = m.group(1), m.group(2), m.group(3)
    if stars or base in _POINTERISH:
        raise PointerTypeError(f"{field_name}: pointer-valued field {type_name!r} cannot be shared")
    if base in _AMBIGUOUS:
        raise AmbiguousTypeError(f"{field_name}: {base!r} has no fixed width; give an explicit IDL type")
    if base == "bool":
        signed, width = False, 8
    else:
        tm = re.fullmatch(r"(u?)int(8|16|32|64)", base)
        if tm is None:
            raise AmbiguousTypeError(f"{field_name}: unknown type {base!r}; give an explicit IDL type")
        signed, width = tm.group(1) == "", int(tm.group(2))
    n = int(count) if count is not None else 1
    if n <= 0:
        raise SharedTypeError(f"{field_name}: array length must be positive")
    return Field(field_name, signed, width, n)


def parse_idl(text: str) -> dict[str, TypeDescriptor]:
    out: dict[str, TypeDescriptor] = {}
    name: str | None = None
    fields: list[Field] = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if tok[0] == "struct":
            if name is not None or len(tok) != 2:
                raise SharedTypeError(f"line {n}: bad struct header")
            name, fields = tok[1], []
        elif tok[0] == "end":
            if name is None:
                raise SharedTypeError(f"line {n}: 'end' outside a struct")
            if name in out:
                raise SharedTypeError(f"line {n}: duplicate struct {name!r}")
            names = [f.name for f in fields]
            if len(set(names)) != len(names):
                raise SharedTypeError(f"line {n}: duplicate field in {name!r}")
            out[name] = TypeDescriptor(name, tuple(fields))
            name = None
        else:
            if name is None or len(tok) != 2:
                raise SharedTypeError(f"line {n}: expected '<type> <field>' inside a struct")
            fields.append(scalar(tok[0], tok[1]))
    if name is not None:
        raise SharedTypeError(f"struct {name!r} not closed")
    return out


def dump_idl(types: Sequence[TypeDescriptor]) -> str:
    lines = []
    for t in types:
        lines.append(f"struct {t.name}")
        for f in t.fields:
            base = f"{'' if f.signed else 'u'}int{f.width}"  # bool prints as uint8
            lines.append(f"  {base}{f'[{f.count}]' if f.count > 1 else ''} {f.name}")
        lines.append("end")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Stub:
    """Marshal/unmarshal pair for one descriptor."""

    descriptor: TypeDescriptor
    format: str

    @property
    def size(self) -> int:
        return struct.calcsize(self.format)

    def marshal(self, values: Sequence[int]) -> bytes:
        vals = tuple(values)
        if len(vals) != self.descriptor.slots:
            raise SharedTypeError(f"{self.descriptor.name}: expected {self.descriptor.slots} values, got {len(vals)}")
        i = 0
        for f in self.descriptor.fields:
            lo, hi = f.bounds()
            for v in vals[i:i + f.count]:
                if not lo <= v <= hi:
                    raise SharedTypeError(f"{self.descriptor.name}.{f.name}: {v} out of range")
            i += f.count
        return struct.pack(self.format, *vals)

    def unmarshal(self, data: bytes) -> tuple[int, ...]:
        return struct.unpack(self.format, data)


def generate_stubs(desc: TypeDescriptor) -> Stub:
    return Stub(desc, "<" + "".join(f.fmt for f in desc.fields))
