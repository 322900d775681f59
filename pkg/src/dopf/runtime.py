"""Synchronous area-worker runtime: initialize, build, solve, exchange, update, terminate.

Areas run on a pool of ``config.workers`` processes (one process per area at
most; areas beyond the pool size are multiplexed round-robin). With a single
worker everything runs in-process. Areas never share mutable state: all
cross-area data travels as :class:`Message` objects through a :class:`Mailbox`
with per-iteration rendezvous, so every area's iteration ``k`` only starts
after all its neighbors' iteration ``k - 1`` messages have been consumed.

Central termination writes each area's mismatch contribution into a shared
array and decides after a barrier. Distributed termination floods per-area
mismatch contributions along with the shared values; after ``D`` extra
iterations (``D`` = area-graph diameter) every area holds the same complete
picture of iteration ``t - D`` and reaches the same decision, then reports the
iterate of that iteration.
"""
from __future__ import annotations

import math
import multiprocessing as mp
import os
import queue
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from dopf.forms import (ConvexProblem, FormulationKind, SubproblemSolution, attach_arrays,
                        branch_admittance, build, generation_cost, solve)
from dopf.kernels import AdaConfig, Kernel, SharedVariableLedger, combine_norm, mismatch_by_variable, mismatch_parts
from dopf.network import NetworkCase
from dopf.partition import AreaSubnetwork, area_diameter, assign_areas, decompose, shared_registry

WORKERS_ENV = "DOPF_WORKERS"


class RunStatus(str, Enum):
    CONTINUE = "continue"
    CONVERGED = "converged"
    ITERATION_LIMIT = "iteration-limit"


class SubproblemFailure(RuntimeError):
    pass


class DeadlockError(RuntimeError):
    pass


class _Aborted(Exception):
    pass


@dataclass
class Message:
    iteration: int
    sender: int
    receiver: int
    values: dict
    # distributed termination: {area: {iteration: (sumsq, maxabs)}}
    status: dict | None = None


class Mailbox:
    """One slot per ordered area pair, each holding at most one message per iteration."""

    def __init__(self):
        self._slots: dict[tuple[int, int], dict[int, Message]] = {}

    def post(self, msg: Message):
        slot = self._slots.setdefault((msg.sender, msg.receiver), {})
        if msg.iteration in slot:
            raise RuntimeError(f"duplicate message {msg.sender}->{msg.receiver} for iteration {msg.iteration}")
        slot[msg.iteration] = msg

    def take(self, sender: int, receiver: int, iteration: int) -> Message | None:
        return self._slots.get((sender, receiver), {}).pop(iteration, None)

    def pending(self) -> int:
        return sum(len(s) for s in self._slots.values())


@dataclass
class IterationRecord:
    iteration: int
    sumsq: float
    maxabs: float
    by_kind: dict
    objective: float
    solve_time: float


# --- initialization -------------------------------------------------------------

def _warm_values(case: NetworkCase, formulation: FormulationKind) -> dict:
    out = {}
    for bus in case.buses:
        if formulation == FormulationKind.DC:
            out[("va", bus.id)] = bus.va0
        else:
            out[("w", bus.id)] = bus.vm0 ** 2
    for br in case.active_branches():
        fwd, rev = br.directed_keys()
        f, t = case.bus(br.f_bus), case.bus(br.t_bus)
        if formulation == FormulationKind.DC:
            p = (f.va0 - t.va0 - br.shift) / (br.x * br.tap)
            out[("p",) + fwd], out[("p",) + rev] = p, -p
            continue
        wf, wt = f.vm0 ** 2, t.vm0 ** 2
        wr = f.vm0 * t.vm0 * math.cos(f.va0 - t.va0)
        wi = f.vm0 * t.vm0 * math.sin(f.va0 - t.va0)
        out[("wr", br.index)], out[("wi", br.index)] = wr, wi
        adm = branch_admittance(br)
        vec = (wf, wt, wr, wi)
        for name, coef in ((("p",) + fwd, adm.p_fr), (("q",) + fwd, adm.q_fr),
                           (("p",) + rev, adm.p_to), (("q",) + rev, adm.q_to)):
            out[name] = sum(c * v for c, v in zip(coef, vec))
    return out


def initial_value(name: tuple, init: str, warm: dict | None) -> float:
    if init == "warm":
        return warm[name]
    # flat start: angles 0, flows 0, w = wr = 1, wi = 0
    return 1.0 if name[0] in ("w", "wr") else 0.0


class AreaWorker:
    """One area's subproblem, ledger and history."""

    def __init__(self, subnet: AreaSubnetwork, keys, config: AdaConfig, warm: dict | None = None):
        self.area = subnet.area_id
        self.subnet = subnet
        self.config = config
        self.kernel = Kernel(config)
        self.base: ConvexProblem = build(subnet.local_case, config.formulation)
        own = [k for k in keys if k.owner == self.area]
        initial = {k.name: initial_value(k.name, config.init, warm) for k in own}
        self.ledger = SharedVariableLedger.create(self.area, own, initial, beta=self.kernel.initial_beta())
        self.idx = np.array([self.base.index[n] for n in self.ledger.names], dtype=int)
        self.history: list[IterationRecord] = []
        self.solution: SubproblemSolution | None = None
        self.objective = math.nan
        self.status_table: dict[int, dict[int, tuple[float, float]]] = {}
        self.snapshots: deque = deque()
        self._solve_time = 0.0

    @property
    def neighbors(self) -> list[int]:
        return self.ledger.counterparts

    def build_problem(self) -> ConvexProblem:
        if not len(self.idx):
            return self.base
        return attach_arrays(self.base, self.idx, *self.kernel.penalty(self.ledger))

    def penalty_value(self, x: np.ndarray) -> float:
        if not len(self.idx):
            return 0.0
        lin, quad, center, const = self.kernel.penalty(self.ledger)
        v = x[self.idx]
        return float(np.sum(lin * v + quad * (v - center) ** 2 + const))

    def solve_step(self, k: int):
        t0 = time.perf_counter()
        sol = solve(self.build_problem(), self.config.solver_tol)
        self._solve_time = time.perf_counter() - t0
        if not sol.optimal:
            raise SubproblemFailure(f"area {self.area}, iteration {k}: subproblem {sol.status.value}")
        self.solution = sol
        self.ledger.local = sol.x[self.idx].copy()
        self.objective = generation_cost(self.subnet.local_case, sol)

    def messages(self, k: int, distributed: bool) -> list[Message]:
        status = None
        if distributed:
            status = {a: dict(v) for a, v in self.status_table.items()}
        return [Message(k, self.area, b, self.ledger.outgoing(b), status) for b in self.neighbors]

    def absorb(self, msg: Message):
        self.ledger.receive(msg.sender, msg.values)
        if msg.status:
            for a, entries in msg.status.items():
                self.status_table.setdefault(a, {}).update(entries)

    def finish(self, k: int, keep: int):
        sumsq, maxabs = mismatch_parts(self.ledger)
        self.history.append(IterationRecord(k, sumsq, maxabs, mismatch_by_variable(self.ledger),
                                            self.objective, self._solve_time))
        self.status_table.setdefault(self.area, {})[k] = (sumsq, maxabs)
        self.snapshots.append((k, self.solution, self.objective, self.ledger.local.copy()))
        while len(self.snapshots) > keep:
            self.snapshots.popleft()
        for entries in self.status_table.values():
            for old in [i for i in entries if i < k - keep - 1]:
                del entries[old]
        self.ledger = self.kernel.update(self.ledger)

    def snapshot(self, k: int):
        for item in self.snapshots:
            if item[0] == k:
                return item
        raise KeyError(f"area {self.area} has no snapshot for iteration {k}")


def warm_start_values(case: NetworkCase, config: AdaConfig) -> dict | None:
    if config.init != "warm":
        return None
    if not case.has_voltage_data:
        raise ValueError(f"warm start requested but case {case.name!r} has no voltage warm-start data")
    return _warm_values(case, config.formulation)


def initialize(subnets: dict[int, AreaSubnetwork], registry, config: AdaConfig,
               case: NetworkCase | None = None) -> dict[int, AreaWorker]:
    """Create every area's worker (problem template + ledger) with flat or warm initial values.

    Warm starts read the bus voltages of ``case``, the undecomposed network.
    """
    if config.init == "warm" and case is None:
        raise ValueError("warm start needs the undecomposed case")
    warm = warm_start_values(case, config) if case is not None else None
    return {a: AreaWorker(s, registry, config, warm) for a, s in sorted(subnets.items())}


# --- termination ----------------------------------------------------------------

def check_termination_central(parts: list[tuple[float, float]], k: int, config: AdaConfig) -> RunStatus:
    """Decide from every area's (sumsq, maxabs) mismatch contribution, listed in area order."""
    if combine_norm(parts, config.norm) <= config.tol:
        return RunStatus.CONVERGED
    if k >= config.max_iter:
        return RunStatus.ITERATION_LIMIT
    return RunStatus.CONTINUE


def check_termination_distributed(worker: AreaWorker, k: int, areas: list[int], diameter: int,
                                  config: AdaConfig) -> tuple[RunStatus, int | None]:
    """Decide from flooded mismatch contributions; returns the certified iteration on convergence.

    At the end of iteration ``k`` every area knows every area's contribution
    for iteration ``k - diameter``, so all areas decide identically.
    """
    tau = k - diameter
    if tau >= 1:
        parts = [worker.status_table.get(a, {}).get(tau) for a in areas]
        if any(p is None for p in parts):
            raise RuntimeError(f"area {worker.area}: incomplete termination status for iteration {tau}")
        if combine_norm(parts, config.norm) <= config.tol:
            return RunStatus.CONVERGED, tau
    if k >= config.max_iter:
        return RunStatus.ITERATION_LIMIT, None
    return RunStatus.CONTINUE, None


# --- execution ------------------------------------------------------------------

@dataclass
class _Outcome:
    status: RunStatus
    iterations: int
    final_iteration: int
    histories: dict
    final: dict  # area -> (objective, solution values dict, shared local values)
    ledgers: dict


def run_iteration(hosted: list[AreaWorker], mailbox: Mailbox, k: int, distributed: bool,
                  keep: int, deliver=None, wait=None):
    """One synchronous iteration for the areas hosted by a single worker.

    Solve every hosted area, send its shared values, wait for all neighbor
    messages of iteration ``k``, then apply the algorithm update.
    """
    for w in hosted:
        w.solve_step(k)
    for w in hosted:
        for msg in w.messages(k, distributed):
            (deliver or mailbox.post)(msg)
    for w in hosted:
        for b in w.neighbors:
            msg = mailbox.take(b, w.area, k)
            while msg is None:
                if wait is None:
                    raise DeadlockError(f"area {w.area}, iteration {k}: no message from area {b}")
                wait()
                msg = mailbox.take(b, w.area, k)
            w.absorb(msg)
    for w in hosted:
        w.finish(k, keep)


def _collect(workers: dict[int, AreaWorker], status: RunStatus, k: int, final_k: int) -> _Outcome:
    final = {}
    for a, w in workers.items():
        _, sol, obj, local = w.snapshot(final_k)
        final[a] = (obj, sol.values(), dict(zip(w.ledger.names, local.tolist())))
    return _Outcome(status, k, final_k, {a: w.history for a, w in workers.items()}, final,
                    {a: w.ledger for a, w in workers.items()})


def _run_serial(workers: dict[int, AreaWorker], config: AdaConfig, diameter: int) -> _Outcome:
    mailbox = Mailbox()
    hosted = list(workers.values())
    areas = list(workers)
    distributed = config.termination == "distributed"
    keep = diameter + 1
    k = 0
    while True:
        k += 1
        run_iteration(hosted, mailbox, k, distributed, keep)
        if distributed:
            decisions = {check_termination_distributed(w, k, areas, diameter, config) for w in hosted}
            if len(decisions) != 1:
                raise RuntimeError(f"areas disagree on termination at iteration {k}: {decisions}")
            status, tau = decisions.pop()
        else:
            parts = [(w.history[-1].sumsq, w.history[-1].maxabs) for w in hosted]
            status, tau = check_termination_central(parts, k, config), k
        if status != RunStatus.CONTINUE:
            return _collect(workers, status, k, tau if status == RunStatus.CONVERGED else k)


def _worker_main(wid, area_ids, subnets, registry, config, warm, diameter, areas,
                 inboxes, owner_of, shared, barrier, results):
    hosted_map: dict[int, AreaWorker] = {}
    try:
        for a in area_ids:
            hosted_map[a] = AreaWorker(subnets[a], registry, config, warm)
        hosted = list(hosted_map.values())
        mailbox = Mailbox()
        inbox = inboxes[wid]
        distributed = config.termination == "distributed"
        keep = diameter + 1
        slot = {a: i for i, a in enumerate(areas)}

        def deliver(msg: Message):
            dest = owner_of[msg.receiver]
            if dest == wid:
                mailbox.post(msg)
            else:
                inboxes[dest].put(msg)

        def wait():
            try:
                msg = inbox.get(timeout=config.message_timeout)
            except queue.Empty:
                raise DeadlockError(f"worker {wid}: timed out after {config.message_timeout}s "
                                    f"awaiting neighbor messages") from None
            if msg is None:
                raise _Aborted()
            mailbox.post(msg)

        k = 0
        while True:
            k += 1
            run_iteration(hosted, mailbox, k, distributed, keep, deliver, wait)
            if distributed:
                status, tau = check_termination_distributed(hosted[0], k, areas, diameter, config)
            else:
                base = (k % 2) * 2 * len(areas)
                for w in hosted:
                    i = base + 2 * slot[w.area]
                    shared[i] = w.history[-1].sumsq
                    shared[i + 1] = w.history[-1].maxabs
                try:
                    barrier.wait(timeout=config.message_timeout)
                except threading.BrokenBarrierError:
                    raise _Aborted() from None
                parts = [(shared[base + 2 * j], shared[base + 2 * j + 1]) for j in range(len(areas))]
                status, tau = check_termination_central(parts, k, config), k
            if status != RunStatus.CONTINUE:
                out = _collect(hosted_map, status, k, tau if status == RunStatus.CONVERGED else k)
                results.put(("ok", wid, out))
                return
    except _Aborted:
        results.put(("aborted", wid, None))
    except BaseException as exc:  # noqa: BLE001 - forwarded to the driver
        barrier.abort()
        for j, q in enumerate(inboxes):
            if j != wid:
                q.put(None)
        results.put(("error", wid, f"{type(exc).__name__}: {exc}"))


def _run_parallel(subnets, registry, config: AdaConfig, warm, diameter: int, nworkers: int) -> _Outcome:
    ctx = mp.get_context("fork")
    areas = sorted(subnets)
    assignment = {w: areas[w::nworkers] for w in range(nworkers)}
    owner_of = {a: w for w, ids in assignment.items() for a in ids}
    inboxes = [ctx.Queue() for _ in range(nworkers)]
    shared = ctx.RawArray("d", 4 * len(areas))
    barrier = ctx.Barrier(nworkers)
    results = ctx.Queue()
    procs = [ctx.Process(target=_worker_main, daemon=True,
                         args=(w, assignment[w], subnets, registry, config, warm, diameter, areas,
                               inboxes, owner_of, shared, barrier, results))
             for w in range(nworkers)]
    for p in procs:
        p.start()
    outcomes, errors = [], []
    try:
        for _ in procs:
            try:
                kind, wid, payload = results.get(timeout=config.message_timeout * (config.max_iter + 1))
            except queue.Empty:
                errors.append("timed out waiting for workers")
                break
            if kind == "ok":
                outcomes.append(payload)
            elif kind == "error":
                errors.append(f"worker {wid}: {payload}")
    finally:
        for p in procs:
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
    if errors:
        raise RuntimeError("; ".join(errors))
    first = outcomes[0]
    for o in outcomes[1:]:
        if (o.status, o.iterations, o.final_iteration) != (first.status, first.iterations, first.final_iteration):
            raise RuntimeError("workers disagree on termination")
        first.histories.update(o.histories)
        first.final.update(o.final)
        first.ledgers.update(o.ledgers)
    first.histories = dict(sorted(first.histories.items()))
    first.final = dict(sorted(first.final.items()))
    return first


# --- reporting ------------------------------------------------------------------

@dataclass
class SolveReport:
    case: str
    algorithm: str
    formulation: str
    areas: int
    penalty: float
    alpha: float | None
    tol: float
    norm: str
    termination: str
    workers: int
    converged: bool
    reason: str
    iterations: int
    converged_iteration: int | None
    objective: float
    area_objectives: dict
    central_objective: float | None
    gap: float | None
    final_l2: float
    final_linf: float
    wall_time: float
    trace: list = field(default_factory=list)
    subproblem_times: list = field(default_factory=list)
    solutions: dict = field(default_factory=dict, repr=False)
    shared_values: dict = field(default_factory=dict, repr=False)

    JSON_EXCLUDE = ("solutions", "shared_values")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in self.JSON_EXCLUDE:
            d.pop(k)
        d["area_objectives"] = {str(a): v for a, v in self.area_objectives.items()}
        return d


TRACE_COLUMNS = ("iteration", "l2", "linf", "objective")


def _trace(histories: dict, norm_tol_iters: int) -> tuple[list, list]:
    areas = sorted(histories)
    trace, times = [], []
    for i in range(norm_tol_iters):
        recs = [histories[a][i] for a in areas]
        parts = [(r.sumsq, r.maxabs) for r in recs]
        row = {"iteration": recs[0].iteration if recs else i + 1,
               "l2": combine_norm(parts, "l2"), "linf": combine_norm(parts, "linf"),
               "objective": float(sum(r.objective for r in recs))}
        kinds: dict[str, float] = {}
        for r in recs:
            for kname, v in r.by_kind.items():
                kinds[kname] = kinds.get(kname, 0.0) + v
        for kname in sorted(kinds):
            row[f"l2_{kname}"] = math.sqrt(kinds[kname])
        trace.append(row)
        times.append([r.solve_time for r in recs])
    return trace, times


def central_objective(case: NetworkCase, formulation, tol: float = 1e-8) -> float:
    sol = solve(build(case, formulation), tol)
    if not sol.optimal:
        raise SubproblemFailure(f"centralized {FormulationKind.parse(formulation).value} solve: {sol.status.value}")
    return generation_cost(case, sol)


def default_workers() -> int:
    return int(os.environ.get(WORKERS_ENV, "1"))


def solve_dopf(case: NetworkCase, config: AdaConfig, solver_tol: float | None = None,
               areas: dict[int, int] | None = None, oracle: bool = True) -> SolveReport:
    """Solve OPF on ``case`` with the configured distributed algorithm.

    ``areas`` optionally overrides the bus-to-area assignment. With ``oracle``
    the centralized solve of the same formulation is run (untimed) and the
    signed relative objective gap is reported.
    """
    if solver_tol is not None:
        config = AdaConfig(**{**config.__dict__, "solver_tol": solver_tol})
    t0 = time.perf_counter()
    case = assign_areas(case, areas)
    subnets = decompose(case)
    registry = shared_registry(subnets, config.formulation)
    diameter = area_diameter(subnets)
    nworkers = min(config.workers, len(subnets))
    if nworkers == 1:
        out = _run_serial(initialize(subnets, registry, config, case), config, diameter)
    else:
        warm = warm_start_values(case, config)
        out = _run_parallel(subnets, registry, config, warm, diameter, nworkers)
    wall = time.perf_counter() - t0

    trace, times = _trace(out.histories, out.iterations)
    final_row = trace[out.final_iteration - 1]
    area_obj = {a: v[0] for a, v in out.final.items()}
    total = float(sum(area_obj.values()))
    converged = out.status == RunStatus.CONVERGED
    central = gap = None
    if oracle:
        central = central_objective(case, config.formulation, config.solver_tol)
        gap = (total - central) / abs(central) if central else 0.0
    return SolveReport(
        case=case.name, algorithm=config.algorithm.value, formulation=config.formulation.value,
        areas=len(subnets), penalty=float(config.penalty),
        alpha=float(config.alpha) if config.algorithm.value == "atc" else None,
        tol=config.tol, norm=config.norm.value, termination=config.termination, workers=nworkers,
        converged=converged, reason=out.status.value, iterations=out.iterations,
        converged_iteration=out.final_iteration if converged else None,
        objective=total, area_objectives=area_obj, central_objective=central, gap=gap,
        final_l2=final_row["l2"], final_linf=final_row["linf"], wall_time=wall,
        trace=trace, subproblem_times=times,
        solutions={a: v[1] for a, v in out.final.items()},
        shared_values={a: v[2] for a, v in out.final.items()},
    )
