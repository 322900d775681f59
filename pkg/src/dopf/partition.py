"""Area decomposition with fictitious boundary buses and generators.

Each tie-line is modeled in full by both areas it connects. The far endpoint
becomes a fictitious bus in the local area, carrying a zero-cost generator with
unbounded output; consistency between the copies is enforced later by the
distributed algorithm through the shared-variable registry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import networkx as nx

from dopf.forms import FormulationKind
from dopf.network import Branch, Bus, BusType, Generator, NetworkCase


class PartitionError(ValueError):
    pass


def read_partition(source: str | Path) -> dict[int, int]:
    """Read ``bus_id area_id`` pairs, one per line; ``#`` starts a comment."""
    path = Path(source)
    text = path.read_text() if path.exists() else str(source)
    out: dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise PartitionError(f"line {lineno}: expected 'bus_id area_id', got {raw!r}")
        try:
            bus, area = int(parts[0]), int(parts[1])
        except ValueError:
            raise PartitionError(f"line {lineno}: non-integer field in {raw!r}") from None
        if bus in out:
            raise PartitionError(f"line {lineno}: bus {bus} assigned twice")
        out[bus] = area
    return out


def assign_areas(case: NetworkCase, override: dict[int, int] | None = None) -> NetworkCase:
    if override is None:
        return case
    ids = {b.id for b in case.buses}
    unknown = sorted(set(override) - ids)
    if unknown:
        raise PartitionError(f"override references unknown bus(es) {unknown}")
    missing = sorted(ids - set(override))
    if missing:
        raise PartitionError(f"override missing bus(es) {missing}")
    bad = sorted(b for b, a in override.items() if a < 1)
    if bad:
        raise PartitionError(f"area ids must be >= 1 (buses {bad})")
    return case.with_areas(override)


@dataclass(frozen=True)
class AreaSubnetwork:
    area_id: int
    local_case: NetworkCase
    boundary_buses: frozenset[int]
    tie_lines: frozenset[tuple[int, int, int]]
    neighbors: frozenset[int]

    @property
    def has_reference(self) -> bool:
        return bool(self.local_case.reference_buses)

    @property
    def fictitious_buses(self) -> list[int]:
        return [b.id for b in self.local_case.buses if b.fictitious]


def tie_lines(case: NetworkCase) -> list[Branch]:
    return [br for br in case.active_branches()
            if case.bus(br.f_bus).area != case.bus(br.t_bus).area]


def _fictitious_bus(bus: Bus) -> Bus:
    return replace(bus, bus_type=BusType.PQ, pd=0.0, qd=0.0, gs=0.0, bs=0.0, fictitious=True)


def _fictitious_generator(bus_id: int) -> Generator:
    return Generator(index=-bus_id, bus=bus_id, pmin=-math.inf, pmax=math.inf,
                     qmin=-math.inf, qmax=math.inf, fictitious=True)


def decompose(case: NetworkCase) -> dict[int, AreaSubnetwork]:
    """Split ``case`` by bus area into self-contained area subnetworks."""
    for br in case.branches:
        for end in (br.f_bus, br.t_bus):
            if not case.has_bus(end):
                raise PartitionError(f"branch {br.index}: endpoint bus {end} missing")
    area_of = {b.id: b.area for b in case.buses}
    areas = case.areas
    ties = tie_lines(case)
    tie_idx = {br.index for br in ties}

    subnets = {}
    for a in areas:
        buses = [b for b in case.buses if b.area == a]
        if not buses:
            raise PartitionError(f"area {a} has no buses")
        local_ids = {b.id for b in buses}
        gens = [g for g in case.generators if g.bus in local_ids]
        branches = []
        a_ties, boundary, far, neighbors = set(), set(), [], set()
        for br in case.branches:
            f_in, t_in = br.f_bus in local_ids, br.t_bus in local_ids
            if f_in and t_in:
                branches.append(br)
            elif (f_in or t_in) and br.index in tie_idx:
                branches.append(br)
                a_ties.add((br.index, br.f_bus, br.t_bus))
                near, other = (br.f_bus, br.t_bus) if f_in else (br.t_bus, br.f_bus)
                boundary.update((near, other))
                if other not in far:
                    far.append(other)
                neighbors.add(area_of[other])
            # out-of-service cross-area branches carry no flow and are dropped
        for other in far:
            buses.append(_fictitious_bus(case.bus(other)))
            gens.append(_fictitious_generator(other))
        local = NetworkCase(name=f"{case.name}:area{a}", base_mva=case.base_mva,
                            buses=tuple(buses), generators=tuple(gens), branches=tuple(branches))
        subnets[a] = AreaSubnetwork(a, local, frozenset(boundary), frozenset(a_ties), frozenset(neighbors))
    return subnets


def area_graph(subnets: dict[int, AreaSubnetwork]) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(subnets)
    for a, s in subnets.items():
        g.add_edges_from((a, b) for b in s.neighbors)
    return g


def area_diameter(subnets: dict[int, AreaSubnetwork]) -> int:
    g = area_graph(subnets)
    if g.number_of_nodes() <= 1:
        return 0
    if not nx.is_connected(g):
        raise PartitionError("area adjacency graph is disconnected")
    return nx.diameter(g)


@dataclass(frozen=True, order=True)
class SharedVariableKey:
    """One area's copy of a consistency-constrained variable.

    ``name`` is the formulation variable name (see :mod:`dopf.forms`);
    ``owner`` holds this copy and ``counterpart`` holds the mirrored one.
    """

    owner: int
    counterpart: int
    kind: str
    name: tuple

    @property
    def element(self):
        return self.name[1] if self.kind == "bus" else self.name[1:]

    @property
    def variable(self) -> str:
        return self.name[0]

    def mirror(self) -> SharedVariableKey:
        return SharedVariableKey(self.counterpart, self.owner, self.kind, self.name)


def _tie_variables(br_key: tuple[int, int, int], formulation: FormulationKind) -> list[tuple[str, tuple]]:
    idx, f, t = br_key
    fwd, rev = (idx, f, t), (idx, t, f)
    if formulation == FormulationKind.DC:
        return [("bus", ("va", f)), ("bus", ("va", t)),
                ("branch", ("p",) + fwd), ("branch", ("p",) + rev)]
    return [("bus", ("w", f)), ("bus", ("w", t)),
            ("branch", ("wr", idx)), ("branch", ("wi", idx)),
            ("branch", ("p",) + fwd), ("branch", ("q",) + fwd),
            ("branch", ("p",) + rev), ("branch", ("q",) + rev)]


def shared_registry(subnets: dict[int, AreaSubnetwork], formulation) -> list[SharedVariableKey]:
    """Every area's shared-variable keys, sorted; the set is closed under :meth:`SharedVariableKey.mirror`."""
    kind = FormulationKind.parse(formulation)
    area_of = {b.id: a for a, s in subnets.items() for b in s.local_case.buses if not b.fictitious}
    keys = set()
    for a, sub in subnets.items():
        for br_key in sub.tie_lines:
            _, f, t = br_key
            other = t if area_of[f] == a else f
            for elem_kind, name in _tie_variables(br_key, kind):
                keys.add(SharedVariableKey(a, area_of[other], elem_kind, name))
    return sorted(keys)
