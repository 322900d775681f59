"""Convex OPF formulations (DC approximation, Jabr SOC relaxation) and the solver contract.

Variables are addressed by tuple names:

    ("va", bus)            bus voltage angle (DC)
    ("w", bus)             squared voltage magnitude (SOC)
    ("wr", br), ("wi", br) real/imaginary part of V_f V_t^* on branch ``br`` (SOC)
    ("p", br, i, j)        active flow on branch ``br`` leaving bus ``i`` toward ``j``
    ("q", br, i, j)        reactive flow, same orientation (SOC)
    ("pg", g), ("qg", g)   generator outputs

The objective is restricted to separable convex quadratics, which covers the
generation cost and every penalty term the distributed algorithms attach.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

from dopf.network import Branch, BusType, NetworkCase

DEFAULT_TOL = 1e-8


class FormulationKind(str, Enum):
    DC = "dc"
    SOC = "soc"

    @classmethod
    def parse(cls, value) -> FormulationKind:
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown formulation {value!r}; expected one of dc, soc") from None


@dataclass(frozen=True)
class _Structure:
    """Constraint data shared by every objective variant of one problem."""

    names: tuple
    index: dict
    lb: np.ndarray
    ub: np.ndarray
    eq_A: sp.csr_matrix
    eq_b: np.ndarray
    le_A: sp.csr_matrix
    le_b: np.ndarray
    cones: tuple  # each (F, g): F x + g lies in the second-order cone, first row is the bound
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def assembled(self):
        """Stack everything into Clarabel's ``A x + s = b, s in K`` form (cached)."""
        if "A" in self._cache:
            return self._cache["A"], self._cache["b"], self._cache["K"]
        n = len(self.names)
        eye = sp.identity(n, format="csr")
        lo = np.isfinite(self.lb)
        hi = np.isfinite(self.ub)
        blocks = [self.eq_A, self.le_A, -eye[lo], eye[hi]]
        rhs = [self.eq_b, self.le_b, -self.lb[lo], self.ub[hi]]
        cones = []
        if self.eq_A.shape[0]:
            cones.append(clarabel.ZeroConeT(self.eq_A.shape[0]))
        n_nonneg = self.le_A.shape[0] + int(lo.sum()) + int(hi.sum())
        if n_nonneg:
            cones.append(clarabel.NonnegativeConeT(n_nonneg))
        for F, g in self.cones:
            blocks.append(-F)
            rhs.append(g)
            cones.append(clarabel.SecondOrderConeT(F.shape[0]))
        A = sp.vstack(blocks, format="csc") if blocks else sp.csc_matrix((0, n))
        b = np.concatenate(rhs) if rhs else np.zeros(0)
        self._cache.update(A=A, b=b, K=cones)
        return A, b, cones


@dataclass(frozen=True)
class ConvexProblem:
    """Convex problem: minimize sum(quad * x**2) + lin @ x + const over the structure's constraints."""

    structure: _Structure
    quad: np.ndarray
    lin: np.ndarray
    const: float = 0.0
    name: str = ""

    @property
    def names(self) -> tuple:
        return self.structure.names

    @property
    def index(self) -> dict:
        return self.structure.index

    def objective_value(self, x: np.ndarray) -> float:
        return float(self.quad @ (x * x) + self.lin @ x + self.const)


class ProblemBuilder:
    def __init__(self, name: str = ""):
        self.name = name
        self._names: list = []
        self._index: dict = {}
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._eq: list[tuple[dict, float]] = []
        self._le: list[tuple[dict, float]] = []
        self._cones: list[list[tuple[dict, float]]] = []
        self._quad: dict = {}
        self._lin: dict = {}
        self.const = 0.0

    def var(self, name: Hashable, lb: float = -math.inf, ub: float = math.inf) -> Hashable:
        if name in self._index:
            raise ValueError(f"duplicate variable {name!r}")
        self._index[name] = len(self._names)
        self._names.append(name)
        self._lb.append(lb)
        self._ub.append(ub)
        return name

    def _check(self, coeffs: dict):
        for k in coeffs:
            if k not in self._index:
                raise KeyError(f"undeclared variable {k!r}")

    def eq(self, coeffs: dict, rhs: float = 0.0):
        self._check(coeffs)
        self._eq.append((coeffs, rhs))

    def le(self, coeffs: dict, rhs: float = 0.0):
        self._check(coeffs)
        self._le.append((coeffs, rhs))

    def cone(self, exprs: Sequence[tuple[dict, float]]):
        """Add ``||(e_1, ..., e_m)|| <= e_0`` for affine expressions ``(coeffs, constant)``."""
        for coeffs, _ in exprs:
            self._check(coeffs)
        self._cones.append(list(exprs))

    def cost(self, name: Hashable, lin: float = 0.0, quad: float = 0.0):
        self._check({name: 1})
        self._lin[name] = self._lin.get(name, 0.0) + lin
        self._quad[name] = self._quad.get(name, 0.0) + quad

    def _matrix(self, rows: list[tuple[dict, float]]):
        n = len(self._names)
        data, ri, ci = [], [], []
        for r, (coeffs, _) in enumerate(rows):
            for k, v in coeffs.items():
                if v != 0.0:
                    ri.append(r)
                    ci.append(self._index[k])
                    data.append(v)
        A = sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))
        A.sum_duplicates()
        return A, np.array([rhs for _, rhs in rows], dtype=float)

    def build(self) -> ConvexProblem:
        n = len(self._names)
        eq_A, eq_b = self._matrix(self._eq)
        le_A, le_b = self._matrix(self._le)
        cones = []
        for exprs in self._cones:
            F, g = self._matrix(exprs)
            cones.append((F, g))
        structure = _Structure(
            names=tuple(self._names), index=dict(self._index),
            lb=np.array(self._lb, dtype=float), ub=np.array(self._ub, dtype=float),
            eq_A=eq_A, eq_b=eq_b, le_A=le_A, le_b=le_b, cones=tuple(cones),
        )
        quad = np.zeros(n)
        lin = np.zeros(n)
        for k, v in self._quad.items():
            quad[self._index[k]] = v
        for k, v in self._lin.items():
            lin[self._index[k]] = v
        if np.any(quad < 0):
            raise ValueError("objective must be convex (non-negative quadratic coefficients)")
        return ConvexProblem(structure, quad, lin, float(self.const), self.name)


@dataclass(frozen=True)
class PenaltyTerm:
    """``lin * v + quad * (v - center)**2 + const`` on variable ``name``."""

    name: Hashable
    lin: float = 0.0
    quad: float = 0.0
    center: float = 0.0
    const: float = 0.0

    def value(self, v: float) -> float:
        return self.lin * v + self.quad * (v - self.center) ** 2 + self.const


def attach_objective_terms(problem: ConvexProblem, terms: Iterable) -> ConvexProblem:
    """Return a copy of ``problem`` whose objective also carries the given penalty terms.

    ``terms`` holds :class:`PenaltyTerm` objects or ``(name, lin, quad, center)``
    tuples; repeated names accumulate additively.
    """
    terms = list(terms)
    if not terms:
        return problem
    quad = problem.quad.copy()
    lin = problem.lin.copy()
    const = problem.const
    index = problem.index
    for t in terms:
        if not isinstance(t, PenaltyTerm):
            t = PenaltyTerm(*t)
        name, a, c, center = t.name, t.lin, t.quad, t.center
        const += t.const
        if name not in index:
            raise KeyError(f"unknown variable {name!r}")
        if c < 0:
            raise ValueError(f"negative quadratic coefficient {c} on {name!r}")
        i = index[name]
        quad[i] += c
        lin[i] += a - 2.0 * c * center
        const += c * center * center
    return ConvexProblem(problem.structure, quad, lin, const, problem.name)


def attach_arrays(problem: ConvexProblem, idx: np.ndarray, lin: np.ndarray, quad: np.ndarray,
                  center: np.ndarray, const=0.0) -> ConvexProblem:
    """Vectorized :func:`attach_objective_terms` for index arrays (no duplicate indices)."""
    if np.any(quad < 0):
        raise ValueError("negative quadratic coefficient")
    q = problem.quad.copy()
    c = problem.lin.copy()
    q[idx] += quad
    c[idx] += lin - 2.0 * quad * center
    const = problem.const + float(np.sum(const)) + float(np.sum(quad * center * center))
    return ConvexProblem(problem.structure, q, c, const, problem.name)


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical-failure"


@dataclass
class SubproblemSolution:
    status: SolveStatus
    x: np.ndarray
    index: dict
    objective: float
    iterations: int
    primal_residual: float
    dual_residual: float
    solve_time: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL

    def __getitem__(self, name) -> float:
        return float(self.x[self.index[name]])

    def values(self) -> dict:
        return {k: float(self.x[i]) for k, i in self.index.items()}


_STATUS = {
    "Solved": SolveStatus.OPTIMAL,
    "PrimalInfeasible": SolveStatus.INFEASIBLE,
    "AlmostPrimalInfeasible": SolveStatus.INFEASIBLE,
    "DualInfeasible": SolveStatus.UNBOUNDED,
    "AlmostDualInfeasible": SolveStatus.UNBOUNDED,
}


def solve(problem: ConvexProblem, tol: float = DEFAULT_TOL) -> SubproblemSolution:
    """Solve with an interior-point conic solver; never raises on solver failure."""
    A, b, cones = problem.structure.assembled()
    n = len(problem.names)
    P = sp.diags(2.0 * problem.quad, format="csc") if n else sp.csc_matrix((0, 0))
    result = None
    # tight refinement avoids stalls just above tol on large-penalty subproblems;
    # disabling equilibration is the fallback for the rare remaining stalls
    for extra in ({}, {"equilibrate_enable": False}):
        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.tol_feas = tol
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.max_threads = 1
        settings.iterative_refinement_reltol = 1e-14
        settings.iterative_refinement_abstol = 1e-14
        settings.iterative_refinement_max_iter = 50
        for key, value in extra.items():
            setattr(settings, key, value)
        try:
            result = clarabel.DefaultSolver(P, problem.lin, A, b, cones, settings).solve()
        except Exception:  # noqa: BLE001 - solver internals; report as failure
            result = None
            continue
        if str(result.status) in ("Solved", "PrimalInfeasible", "DualInfeasible"):
            break
    if result is None:
        return SubproblemSolution(SolveStatus.NUMERICAL_FAILURE, np.full(n, np.nan), problem.index,
                                  math.nan, 0, math.inf, math.inf)
    status = _STATUS.get(str(result.status), SolveStatus.NUMERICAL_FAILURE)
    x = np.asarray(result.x, dtype=float)
    obj = problem.objective_value(x) if status == SolveStatus.OPTIMAL else math.nan
    return SubproblemSolution(status, x, problem.index, obj, int(result.iterations),
                              float(result.r_prim), float(result.r_dual), float(result.solve_time))


# --- OPF builders -----------------------------------------------------------------

def angle_bound_active(angle: float) -> bool:
    """MATPOWER's +-360 deg means unbounded; only bounds inside +-90 deg are imposed."""
    return abs(angle) < math.pi / 2


def _add_generator_cost(pb: ProblemBuilder, g):
    if g.fictitious:
        return
    pb.cost(("pg", g.index), lin=g.c1, quad=g.c2)
    pb.const += g.c0


def build_dc(case: NetworkCase) -> ConvexProblem:
    """Lossless DC OPF over bus angles; a REF bus in ``case`` (if any) gets angle 0."""
    pb = ProblemBuilder(f"dc:{case.name}")
    buses = case.active_buses()
    gens = case.active_generators()
    branches = case.active_branches()
    for bus in buses:
        pb.var(("va", bus.id))
        if bus.bus_type == BusType.REF:
            pb.eq({("va", bus.id): 1.0}, 0.0)
    for g in gens:
        pb.var(("pg", g.index), g.pmin, g.pmax)
        _add_generator_cost(pb, g)

    outflows: dict[int, dict] = {bus.id: {} for bus in buses}
    for br in branches:
        fwd, rev = br.directed_keys()
        pf, pt = ("p",) + fwd, ("p",) + rev
        pb.var(pf, -br.rate_a, br.rate_a)
        pb.var(pt, -br.rate_a, br.rate_a)
        b = 1.0 / (br.x * br.tap)
        vf, vt = ("va", br.f_bus), ("va", br.t_bus)
        # p_ft = b (va_f - va_t - shift), p_tf = -p_ft
        pb.eq({pf: 1.0, vf: -b, vt: b}, -b * br.shift)
        pb.eq({pf: 1.0, pt: 1.0}, 0.0)
        if angle_bound_active(br.angmin):
            pb.le({vf: -1.0, vt: 1.0}, -br.angmin)
        if angle_bound_active(br.angmax):
            pb.le({vf: 1.0, vt: -1.0}, br.angmax)
        outflows[br.f_bus][pf] = outflows[br.f_bus].get(pf, 0.0) + 1.0
        outflows[br.t_bus][pt] = outflows[br.t_bus].get(pt, 0.0) + 1.0

    gens_at: dict[int, list] = {bus.id: [] for bus in buses}
    for g in gens:
        gens_at[g.bus].append(g)
    for bus in buses:
        # sum pg - sum p_out = pd + gs
        row = {("pg", g.index): 1.0 for g in gens_at[bus.id]}
        for k, v in outflows[bus.id].items():
            row[k] = -v
        pb.eq(row, bus.pd + bus.gs)
    return pb.build()


@dataclass(frozen=True)
class BranchAdmittance:
    """Linear maps from (w_f, w_t, wr, wi) to the four end flows of a pi-model branch."""

    p_fr: tuple[float, float, float, float]
    q_fr: tuple[float, float, float, float]
    p_to: tuple[float, float, float, float]
    q_to: tuple[float, float, float, float]


def branch_admittance(br: Branch) -> BranchAdmittance:
    y = 1.0 / complex(br.r, br.x)
    g, b = y.real, y.imag
    b_fr = b_to = br.b / 2.0
    tr = br.tap * math.cos(br.shift)
    ti = br.tap * math.sin(br.shift)
    tm = br.tap ** 2
    return BranchAdmittance(
        p_fr=(g / tm, 0.0, (-g * tr + b * ti) / tm, (-b * tr - g * ti) / tm),
        q_fr=(-(b + b_fr) / tm, 0.0, -(-b * tr - g * ti) / tm, (-g * tr + b * ti) / tm),
        p_to=(0.0, g, (-g * tr - b * ti) / tm, -(-b * tr + g * ti) / tm),
        q_to=(0.0, -(b + b_to), -(-b * tr + g * ti) / tm, -(-g * tr - b * ti) / tm),
    )


def build_soc(case: NetworkCase) -> ConvexProblem:
    """Jabr second-order-cone relaxation of AC OPF."""
    pb = ProblemBuilder(f"soc:{case.name}")
    buses = case.active_buses()
    gens = case.active_generators()
    branches = case.active_branches()
    for bus in buses:
        pb.var(("w", bus.id), bus.vmin ** 2, bus.vmax ** 2)
    for g in gens:
        pb.var(("pg", g.index), g.pmin, g.pmax)
        pb.var(("qg", g.index), g.qmin, g.qmax)
        _add_generator_cost(pb, g)

    p_out: dict[int, list] = {bus.id: [] for bus in buses}
    q_out: dict[int, list] = {bus.id: [] for bus in buses}
    for br in branches:
        vmax_prod = case.bus(br.f_bus).vmax * case.bus(br.t_bus).vmax
        wr, wi = ("wr", br.index), ("wi", br.index)
        pb.var(wr, -vmax_prod, vmax_prod)
        pb.var(wi, -vmax_prod, vmax_prod)
        wf, wt = ("w", br.f_bus), ("w", br.t_bus)
        fwd, rev = br.directed_keys()
        pf, qf, pt, qt = ("p",) + fwd, ("q",) + fwd, ("p",) + rev, ("q",) + rev
        for v in (pf, qf, pt, qt):
            pb.var(v)
        adm = branch_admittance(br)
        for flow, coef in ((pf, adm.p_fr), (qf, adm.q_fr), (pt, adm.p_to), (qt, adm.q_to)):
            row = {flow: 1.0}
            for var, c in zip((wf, wt, wr, wi), coef):
                if c:
                    row[var] = row.get(var, 0.0) - c
            pb.eq(row, 0.0)
        # wr^2 + wi^2 <= wf wt  as  ||(2wr, 2wi, wf - wt)|| <= wf + wt
        pb.cone([({wf: 1.0, wt: 1.0}, 0.0), ({wr: 2.0}, 0.0), ({wi: 2.0}, 0.0),
                 ({wf: 1.0, wt: -1.0}, 0.0)])
        if math.isfinite(br.rate_a):
            pb.cone([({}, br.rate_a), ({pf: 1.0}, 0.0), ({qf: 1.0}, 0.0)])
            pb.cone([({}, br.rate_a), ({pt: 1.0}, 0.0), ({qt: 1.0}, 0.0)])
        if angle_bound_active(br.angmin):
            pb.le({wi: -1.0, wr: math.tan(br.angmin)}, 0.0)
        if angle_bound_active(br.angmax):
            pb.le({wi: 1.0, wr: -math.tan(br.angmax)}, 0.0)
        p_out[br.f_bus].append(pf)
        q_out[br.f_bus].append(qf)
        p_out[br.t_bus].append(pt)
        q_out[br.t_bus].append(qt)

    gens_at: dict[int, list] = {bus.id: [] for bus in buses}
    for g in gens:
        gens_at[g.bus].append(g)
    for bus in buses:
        w = ("w", bus.id)
        prow = {("pg", g.index): 1.0 for g in gens_at[bus.id]}
        qrow = {("qg", g.index): 1.0 for g in gens_at[bus.id]}
        for k in p_out[bus.id]:
            prow[k] = prow.get(k, 0.0) - 1.0
        for k in q_out[bus.id]:
            qrow[k] = qrow.get(k, 0.0) - 1.0
        # sum pg - gs w - sum p = pd ; sum qg + bs w - sum q = qd
        prow[w] = prow.get(w, 0.0) - bus.gs
        qrow[w] = qrow.get(w, 0.0) + bus.bs
        pb.eq(prow, bus.pd)
        pb.eq(qrow, bus.qd)
    return pb.build()


def build(case: NetworkCase, formulation) -> ConvexProblem:
    kind = FormulationKind.parse(formulation)
    return build_dc(case) if kind == FormulationKind.DC else build_soc(case)


def generation_cost(case: NetworkCase, solution: SubproblemSolution) -> float:
    """Generation cost of the non-fictitious generators in ``case`` at ``solution``."""
    return sum(g.cost(solution[("pg", g.index)]) for g in case.active_generators() if not g.fictitious)
