"""Static owner/requester assignment: the weakest group member owns."""

from __future__ import annotations

from typing import Iterable, Mapping

from ..dsm.protocol import OwnerOrder, SharedObjectDescriptor
from ..platform import Platform
from .idl import TypeDescriptor
from .ir import ModuleIR


class RoleError(ValueError):
    pass


def sharing_groups(app: Iterable[ModuleIR]) -> dict[str, set[str]]:
    """Object -> modules declaring it shared."""
    groups: dict[str, set[str]] = {}
    for ir in app:
        for obj in ir.shared:
            groups.setdefault(obj, set()).add(ir.module)
    return groups


def assign_roles(app: Iterable[ModuleIR], placement: Mapping[str, str], platform: Platform,
                 types: Mapping[str, TypeDescriptor] | None = None,
                 swap: bool = False) -> tuple[list[SharedObjectDescriptor], OwnerOrder]:
    """Descriptors plus the weakest-first module order.

    ``swap`` inverts the rule (strongest member owns), for the role ablation.
    """
    irs = list(app)
    types = dict(types or {})
    missing = [ir.module for ir in irs if ir.module not in placement]
    if missing:
        raise RoleError(f"no placement for modules {missing}")
    rank = {m: platform.spec(p).strength_rank for m, p in placement.items()}
    groups = sharing_groups(irs)
    type_of: dict[str, str] = {}
    for ir in irs:
        for obj, ty in ir.shared.items():
            if type_of.setdefault(obj, ty) != ty:
                raise RoleError(f"object {obj!r} declared with types {type_of[obj]!r} and {ty!r}")
    descs = []
    for obj in sorted(groups):
        members = groups[obj]
        ranks = sorted(rank[m] for m in members)
        if len(set(ranks)) != len(ranks):
            raise RoleError(f"object {obj!r}: group members {sorted(members)} tie in strength rank")
        pick = max if swap else min
        owner = pick(members, key=rank.__getitem__)
        td = types.get(type_of[obj])
        size, slots = (td.size, td.slots) if td is not None else (4, 1)
        descs.append(SharedObjectDescriptor(obj, type_of[obj], frozenset(members), owner, size, slots))
    # modules on one processor never share; order them by id to keep ranks unique
    ordered = sorted(rank, key=lambda m: (rank[m], m))
    if swap:
        ordered.reverse()
    return descs, OwnerOrder({m: i for i, m in enumerate(ordered)})
