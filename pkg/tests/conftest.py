from __future__ import annotations

import time
from contextlib import contextmanager
from importlib import resources
from pathlib import Path

import pytest

from dopf.network import load_case, parse_matpower
from dopf.partition import read_partition

DATA = Path(str(resources.files("dopf") / "data"))


def bus_row(i, kind=1, pd=0.0, qd=0.0, area=1, vmax=1.1, vmin=0.9, gs=0.0, bs=0.0, vm=1.0, va=0.0):
    return [i, kind, pd, qd, gs, bs, area, vm, va, 100, 1, vmax, vmin]


def gen_row(bus, pmax, pmin=0.0, qmax=100.0, qmin=-100.0, status=1):
    return [bus, 0, 0, qmax, qmin, 1.0, 100, status, pmax, pmin]


def branch_row(f, t, x, r=0.0, b=0.0, rate=0.0, tap=0.0, shift=0.0, status=1, angmin=-360, angmax=360):
    return [f, t, r, x, b, rate, 0, 0, tap, shift, status, angmin, angmax]


def cost_row(c1, c2=0.0, c0=0.0):
    return [2, 0, 0, 3, c2, c1, c0]


def matpower_text(buses, gens, branches, costs, base=100.0, name="tcase") -> str:
    def mat(rows):
        return "\n".join("\t" + "\t".join(repr(float(v)) if isinstance(v, float) else str(v) for v in r) + ";"
                         for r in rows)
    return (f"function mpc = {name}\nmpc.version = '2';\nmpc.baseMVA = {base};\n"
            f"mpc.bus = [\n{mat(buses)}\n];\n"
            f"mpc.gen = [\n{mat(gens)}\n];\n"
            f"mpc.branch = [\n{mat(branches)}\n];\n"
            f"mpc.gencost = [\n{mat(costs)}\n];\n")


def make_case(buses, gens, branches, costs, **kw):
    return parse_matpower(matpower_text(buses, gens, branches, costs, **kw))


def two_bus_dc():
    """Generator at bus 1, 100 MW load at bus 2, lossless x = 0.1 line."""
    return make_case([bus_row(1, 3), bus_row(2, 1, pd=100.0)],
                     [gen_row(1, 200.0)],
                     [branch_row(1, 2, 0.1)],
                     [cost_row(10.0)])


def symmetric_four_bus():
    """Two mirror-image areas: gen-load in area 1, load-gen in area 2, one tie-line 2-3."""
    return make_case(
        [bus_row(1, 3, area=1), bus_row(2, 1, pd=60.0, area=1),
         bus_row(3, 1, pd=60.0, area=2), bus_row(4, 2, area=2)],
        [gen_row(1, 200.0), gen_row(4, 200.0)],
        [branch_row(1, 2, 0.1), branch_row(2, 3, 0.2), branch_row(3, 4, 0.1)],
        [cost_row(10.0, c2=0.01), cost_row(10.0, c2=0.01)])


@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case14_split():
    return read_partition(DATA / "case14_2areas.txt")


@pytest.fixture(scope="session")
def case118_split():
    return read_partition(DATA / "case118_8areas.txt")


# --- property marker and acceptance summary -------------------------------------

def pytest_collection_modifyitems(items):
    for item in items:
        fn = getattr(item, "function", None)
        if getattr(fn, "is_hypothesis_test", False):
            item.add_marker(pytest.mark.property)


ACCEPTANCE: list[str] = []


@contextmanager
def record_criterion(number: int, label: str):
    """Record one PASS/FAIL line for an acceptance criterion; failures still raise."""
    t0 = time.perf_counter()
    detail: dict[str, str] = {}
    try:
        yield detail
    except BaseException as exc:
        reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        ACCEPTANCE.append(f"FAIL criterion {number}: {label} [{_describe(detail, t0)}] - {reason}")
        raise
    ACCEPTANCE.append(f"PASS criterion {number}: {label} [{_describe(detail, t0)}]")


def _describe(detail: dict, t0: float) -> str:
    return ", ".join([f"{k} {v}" for k, v in detail.items()] + [f"test {time.perf_counter() - t0:.1f} s"])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
