"""MATPOWER case parsing and the per-unit network model.

All quantities are stored in per-unit on ``base_mva``; angles in radians.
Loads and shunts live on the bus record (Pd/Qd, Gs/Bs), as in the file format.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import IntEnum
from importlib import resources
from pathlib import Path


class BusType(IntEnum):
    PQ = 1
    PV = 2
    REF = 3
    ISOLATED = 4


@dataclass(frozen=True)
class Bus:
    id: int
    bus_type: BusType
    pd: float
    qd: float
    gs: float
    bs: float
    area: int
    vmin: float
    vmax: float
    vm0: float = 1.0
    va0: float = 0.0
    base_kv: float = 0.0
    fictitious: bool = False


@dataclass(frozen=True)
class Generator:
    """A generator; ``index`` is its 1-based row in the file.

    Fictitious boundary generators use ``index = -bus`` so they can never
    collide with a file generator.
    """

    index: int
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    c2: float = 0.0
    c1: float = 0.0
    c0: float = 0.0
    status: bool = True
    fictitious: bool = False
    pg0: float = 0.0
    qg0: float = 0.0

    def cost(self, pg: float) -> float:
        if self.fictitious:
            return 0.0
        return self.c2 * pg * pg + self.c1 * pg + self.c0


@dataclass(frozen=True)
class Branch:
    """A pi-model branch. ``rate_a`` is ``inf`` when the file gives 0 (no limit)."""

    index: int
    f_bus: int
    t_bus: int
    r: float
    x: float
    b: float
    rate_a: float = math.inf
    tap: float = 1.0
    shift: float = 0.0
    status: bool = True
    angmin: float = -2 * math.pi
    angmax: float = 2 * math.pi

    def directed_keys(self) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        return (self.index, self.f_bus, self.t_bus), (self.index, self.t_bus, self.f_bus)


@dataclass(frozen=True)
class NetworkCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    _bus_map: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "_bus_map", {b.id: b for b in self.buses})

    def bus(self, bus_id: int) -> Bus:
        return self._bus_map[bus_id]

    def has_bus(self, bus_id: int) -> bool:
        return bus_id in self._bus_map

    @property
    def areas(self) -> list[int]:
        return sorted({b.area for b in self.buses})

    @property
    def reference_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.bus_type == BusType.REF]

    @property
    def has_voltage_data(self) -> bool:
        """True when the file carries a non-flat voltage profile usable for warm starts."""
        return any(b.vm0 != 1.0 or b.va0 != 0.0 for b in self.buses)

    def active_buses(self) -> list[Bus]:
        return [b for b in self.buses if b.bus_type != BusType.ISOLATED]

    def active_generators(self) -> list[Generator]:
        return [g for g in self.generators if g.status and self._live(g.bus)]

    def active_branches(self) -> list[Branch]:
        return [br for br in self.branches if br.status and self._live(br.f_bus) and self._live(br.t_bus)]

    def _live(self, bus_id: int) -> bool:
        bus = self._bus_map.get(bus_id)
        return bus is not None and bus.bus_type != BusType.ISOLATED

    def with_areas(self, areas: dict[int, int]) -> NetworkCase:
        buses = [replace(b, area=areas[b.id]) for b in self.buses]
        return replace(self, buses=tuple(buses))


class MatpowerError(ValueError):
    pass


class MatpowerSyntaxError(MatpowerError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class UnsupportedCostModel(MatpowerError):
    pass


class InvalidCaseError(MatpowerError):
    def __init__(self, violations: list[str]):
        super().__init__("invalid case: " + "; ".join(violations))
        self.violations = violations


_FUNCTION = re.compile(r"^\s*function\s+\w+\s*=\s*(\w+)")
_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_REQUIRED = ("baseMVA", "bus", "gen", "branch", "gencost")


def _strip_comment(line: str) -> str:
    # '%' inside single-quoted strings is not a comment
    quoted = False
    for i, ch in enumerate(line):
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            return line[:i]
    return line


def _parse_number(token: str, line: int, column: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise MatpowerSyntaxError(f"invalid number {token!r}", line, column) from None


def _tokenize_rows(body: str, line: int, col0: int, rows: list[list[float]], current: list[float]):
    """Accumulate numeric fields of a matrix body fragment into ``rows``."""
    for m in re.finditer(r"[^\s,;]+|;", body):
        tok = m.group(0)
        column = col0 + m.start() + 1
        if tok == ";":
            if current:
                rows.append(current[:])
                current.clear()
            continue
        current.append(_parse_number(tok, line, column))


def _read_matrices(text: str) -> tuple[str | None, dict[str, object]]:
    name = None
    values: dict[str, object] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = _strip_comment(lines[i])
        i += 1
        if not raw.strip():
            continue
        fm = _FUNCTION.match(raw)
        if fm:
            name = fm.group(1)
            continue
        am = _ASSIGN.match(raw)
        if not am:
            continue
        key, rhs = am.group(1), am.group(2)
        rhs_col = am.start(2)
        stripped = rhs.strip()
        if stripped.startswith("{"):
            # cell arrays (bus names etc.) are skipped
            depth = stripped.count("{") - stripped.count("}")
            while depth > 0 and i < len(lines):
                chunk = _strip_comment(lines[i])
                depth += chunk.count("{") - chunk.count("}")
                i += 1
            continue
        if not stripped.startswith("["):
            if key == "baseMVA":
                token = stripped.rstrip(";").strip()
                values[key] = _parse_number(token, lineno, rhs_col + len(rhs) - len(rhs.lstrip()) + 1)
            continue
        # matrix: everything up to the closing ']'
        rows: list[list[float]] = []
        current: list[float] = []
        body = rhs[rhs.index("[") + 1:]
        col0 = rhs_col + rhs.index("[") + 1
        start_line = lineno
        while True:
            if "]" in body:
                inner = body[: body.index("]")]
                _tokenize_rows(inner, lineno, col0, rows, current)
                if current:
                    rows.append(current[:])
                break
            _tokenize_rows(body, lineno, col0, rows, current)
            # a newline also ends a row
            if current:
                rows.append(current[:])
                current.clear()
            if i >= len(lines):
                raise MatpowerSyntaxError(f"unterminated matrix mpc.{key}", start_line, rhs_col + 1)
            lineno = i + 1
            body = _strip_comment(lines[i])
            col0 = 0
            i += 1
        widths = {len(r) for r in rows}
        if len(widths) > 1:
            raise MatpowerSyntaxError(f"ragged rows in mpc.{key}", start_line, rhs_col + 1)
        values[key] = rows
    return name, values


def _gencost(row: list[float], base: float, index: int) -> tuple[float, float, float]:
    if len(row) < 4:
        raise MatpowerError(f"gencost row of generator {index} has {len(row)} columns, expected at least 4")
    model = int(row[0])
    if model == 1:
        raise UnsupportedCostModel(f"unsupported cost model: piecewise linear cost on generator {index}")
    if model != 2:
        raise UnsupportedCostModel(f"unsupported cost model: model {model} on generator {index}")
    n = int(row[3])
    coeffs = row[4:4 + n]
    if n < 0 or len(coeffs) < n:
        raise MatpowerError(f"gencost row of generator {index} declares {n} coefficients, has {len(coeffs)}")
    if n > 3:
        if any(c != 0.0 for c in coeffs[: n - 3]):
            raise UnsupportedCostModel(f"unsupported cost model: degree {n - 1} polynomial on generator {index}")
        coeffs = coeffs[n - 3:]
    coeffs = [0.0] * (3 - len(coeffs)) + list(coeffs)
    c2, c1, c0 = coeffs
    return c2 * base * base, c1 * base, c0


def _deg2rad(deg: float) -> float:
    return math.radians(deg)


def parse_matpower(text: str, name: str | None = None) -> NetworkCase:
    """Parse MATPOWER ``.m`` text into a validated per-unit :class:`NetworkCase`."""
    fname, mats = _read_matrices(text)
    for key in _REQUIRED:
        if key not in mats:
            raise MatpowerError(f"missing matrix mpc.{key}")
    if not isinstance(mats["baseMVA"], float):
        raise MatpowerError("mpc.baseMVA must be a scalar")
    base = mats["baseMVA"]
    if base <= 0:
        raise InvalidCaseError([f"base_mva must be positive, got {base}"])

    buses = []
    for row in mats["bus"]:
        if len(row) < 13:
            raise MatpowerError(f"bus row has {len(row)} columns, expected 13")
        if row[1] not in (1, 2, 3, 4):
            raise MatpowerError(f"bus {int(row[0])}: unknown bus type {row[1]:g}")
        buses.append(Bus(
            id=int(row[0]), bus_type=BusType(int(row[1])),
            pd=row[2] / base, qd=row[3] / base, gs=row[4] / base, bs=row[5] / base,
            area=int(row[6]), vm0=row[7], va0=_deg2rad(row[8]), base_kv=row[9],
            vmax=row[11], vmin=row[12],
        ))

    costs = mats["gencost"]
    if len(costs) < len(mats["gen"]):
        raise MatpowerError(f"mpc.gencost has {len(costs)} rows for {len(mats['gen'])} generators")
    gens = []
    for k, row in enumerate(mats["gen"]):
        if len(row) < 10:
            raise MatpowerError(f"gen row has {len(row)} columns, expected at least 10")
        c2, c1, c0 = _gencost(costs[k], base, k + 1)
        gens.append(Generator(
            index=k + 1, bus=int(row[0]), pg0=row[1] / base, qg0=row[2] / base,
            qmax=row[3] / base, qmin=row[4] / base, status=row[7] > 0,
            pmax=row[8] / base, pmin=row[9] / base, c2=c2, c1=c1, c0=c0,
        ))

    branches = []
    for k, row in enumerate(mats["branch"]):
        if len(row) < 11:
            raise MatpowerError(f"branch row has {len(row)} columns, expected at least 11")
        angmin = row[11] if len(row) > 11 else -360.0
        angmax = row[12] if len(row) > 12 else 360.0
        branches.append(Branch(
            index=k + 1, f_bus=int(row[0]), t_bus=int(row[1]),
            r=row[2], x=row[3], b=row[4],
            rate_a=row[5] / base if row[5] > 0 else math.inf,
            tap=row[8] if row[8] != 0 else 1.0, shift=_deg2rad(row[9]),
            status=row[10] > 0, angmin=_deg2rad(angmin), angmax=_deg2rad(angmax),
        ))

    case = NetworkCase(name=name or fname or "case", base_mva=base,
                       buses=tuple(buses), generators=tuple(gens), branches=tuple(branches))
    violations = validate_case(case)
    if violations:
        raise InvalidCaseError(violations)
    return case


def load_case(path_or_name: str | Path) -> NetworkCase:
    """Load a case from a file path, or a bundled case by bare name (``"case14"`` or ``"case14.m"``)."""
    path = Path(path_or_name)
    if path.exists():
        return parse_matpower(path.read_text(), name=path.stem)
    bundled = resources.files("dopf") / "data" / f"{path.stem}.m"
    if path.parent == Path(".") and path.suffix in ("", ".m") and bundled.is_file():
        return parse_matpower(bundled.read_text(), name=path.stem)
    raise FileNotFoundError(f"case file not found: {path_or_name}")


def validate_case(case: NetworkCase, require_reference: bool = True) -> list[str]:
    """Return human-readable invariant violations; an empty list means valid."""
    out = []
    if not case.base_mva > 0:
        out.append(f"base_mva must be positive, got {case.base_mva}")
    seen = set()
    for b in case.buses:
        if b.id in seen:
            out.append(f"duplicate bus id {b.id}")
        seen.add(b.id)
        if not (0 < b.vmin <= b.vmax):
            out.append(f"bus {b.id}: voltage bounds must satisfy 0 < Vmin <= Vmax")
        if b.area < 1:
            out.append(f"bus {b.id}: area must be >= 1, got {b.area}")
    if require_reference:
        nref = sum(1 for b in case.buses if b.bus_type == BusType.REF)
        if nref == 0:
            out.append("no reference bus")
        elif nref > 1:
            out.append(f"{nref} reference buses, expected exactly one")
    for g in case.generators:
        if g.bus not in seen:
            out.append(f"generator {g.index}: unknown bus {g.bus}")
        if g.pmin > g.pmax:
            out.append(f"generator {g.index}: Pmin > Pmax")
        if g.qmin > g.qmax:
            out.append(f"generator {g.index}: Qmin > Qmax")
        if g.c2 < 0:
            out.append(f"generator {g.index}: negative quadratic cost")
        if g.fictitious and (g.c2 or g.c1 or g.c0 or math.isfinite(g.pmin) or math.isfinite(g.pmax)
                             or math.isfinite(g.qmin) or math.isfinite(g.qmax)):
            out.append(f"generator {g.index}: fictitious generators must be free and unbounded")
    for br in case.branches:
        for end in (br.f_bus, br.t_bus):
            if end not in seen:
                out.append(f"branch {br.index}: unknown bus {end}")
        if br.status and br.x == 0:
            out.append(f"branch {br.index}: zero reactance")
        if not (br.angmin <= 0 <= br.angmax):
            out.append(f"branch {br.index}: angle bounds must bracket zero")
    return out
