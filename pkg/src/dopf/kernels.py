"""Algorithm-specific state and update rules for ADMM, APP and ATC.

Every area keeps one :class:`SharedVariableLedger` over its copies of the
shared variables. Each algorithm contributes a penalty on those copies (a list
of :class:`~dopf.forms.PenaltyTerm`) and an update applied after the neighbor
values for the same iteration have arrived.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from dopf.forms import FormulationKind, PenaltyTerm
from dopf.partition import SharedVariableKey


class Algorithm(str, Enum):
    ADMM = "admm"
    APP = "app"
    ATC = "atc"


class Norm(str, Enum):
    L2 = "l2"
    LINF = "linf"


# default penalties per formulation: ADMM rho / APP beta
DEFAULT_PENALTY = {FormulationKind.DC: 1e4, FormulationKind.SOC: 1e2}
DEFAULT_ATC_BETA = 1.0
DEFAULT_ATC_ALPHA = 1.05


def _enum(cls, value, what):
    if isinstance(value, cls):
        return value
    text = str(value).lower()
    if cls is Norm and text in ("inf", "l_inf", "linfinity"):
        text = "linf"
    try:
        return cls(text)
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown {what} {value!r}; expected one of {choices}") from None


@dataclass
class AdaConfig:
    """Run configuration. ``penalty`` is ADMM's rho, APP's beta, or ATC's initial beta."""

    algorithm: Algorithm = Algorithm.ADMM
    formulation: FormulationKind = FormulationKind.DC
    penalty: float | None = None
    alpha: float = DEFAULT_ATC_ALPHA
    tol: float = 1e-2
    norm: Norm = Norm.L2
    max_iter: int = 2000
    termination: str = "central"
    init: str = "flat"
    workers: int = 1
    solver_tol: float = 1e-8
    message_timeout: float = 120.0

    def __post_init__(self):
        self.algorithm = _enum(Algorithm, self.algorithm, "algorithm")
        self.formulation = FormulationKind.parse(self.formulation)
        self.norm = _enum(Norm, self.norm, "norm")
        if self.penalty is None:
            self.penalty = DEFAULT_ATC_BETA if self.algorithm == Algorithm.ATC else DEFAULT_PENALTY[self.formulation]
        errors = []
        if not self.penalty > 0:
            errors.append(f"penalty must be > 0, got {self.penalty}")
        if self.algorithm == Algorithm.ATC and not self.alpha > 1:
            errors.append(f"ATC growth factor alpha must be > 1, got {self.alpha}")
        if not self.tol > 0:
            errors.append(f"tolerance must be > 0, got {self.tol}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            errors.append(f"max iterations must be >= 1, got {self.max_iter}")
        if self.termination not in ("central", "distributed"):
            errors.append(f"termination must be 'central' or 'distributed', got {self.termination!r}")
        if self.init not in ("flat", "warm"):
            errors.append(f"initialization must be 'flat' or 'warm', got {self.init!r}")
        if int(self.workers) != self.workers or self.workers < 1:
            errors.append(f"workers must be >= 1, got {self.workers}")
        if not 0 < self.solver_tol <= self.tol / 100:
            errors.append(f"solver tolerance {self.solver_tol} must be at least 100x tighter than {self.tol}")
        if errors:
            raise ValueError("; ".join(errors))
        self.max_iter = int(self.max_iter)
        self.workers = int(self.workers)


@dataclass
class SharedVariableLedger:
    area: int
    keys: tuple[SharedVariableKey, ...]
    local: np.ndarray
    received: np.ndarray
    dual: np.ndarray
    prev_local: np.ndarray
    beta: float = 1.0
    k: int = 0
    _by_counterpart: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        groups: dict[int, list[int]] = {}
        for i, key in enumerate(self.keys):
            if key.owner != self.area:
                raise ValueError(f"key {key} not owned by area {self.area}")
            groups.setdefault(key.counterpart, []).append(i)
        self._by_counterpart = {b: np.array(ix, dtype=int) for b, ix in sorted(groups.items())}

    @classmethod
    def create(cls, area: int, keys, initial: dict, beta: float = 1.0) -> SharedVariableLedger:
        keys = tuple(sorted(k for k in keys if k.owner == area))
        x0 = np.array([initial[k.name] for k in keys], dtype=float)
        return cls(area, keys, x0.copy(), x0.copy(), np.zeros(len(keys)), x0.copy(), beta, 0)

    @property
    def names(self) -> list:
        return [k.name for k in self.keys]

    @property
    def counterparts(self) -> list[int]:
        return list(self._by_counterpart)

    def outgoing(self, counterpart: int) -> dict:
        """This area's latest values for the variables it shares with ``counterpart``."""
        ix = self._by_counterpart.get(counterpart, ())
        return {self.keys[i].name: float(self.local[i]) for i in ix}

    def receive(self, counterpart: int, values: dict):
        ix = self._by_counterpart[counterpart]
        missing = [self.keys[i].name for i in ix if self.keys[i].name not in values]
        if missing:
            raise KeyError(f"message from area {counterpart} lacks {missing}")
        for i in ix:
            self.received[i] = values[self.keys[i].name]

    def copy(self) -> SharedVariableLedger:
        return replace(self, local=self.local.copy(), received=self.received.copy(),
                       dual=self.dual.copy(), prev_local=self.prev_local.copy())


def consensus_target(local, received):
    return (local + received) / 2.0


def _terms(ledger: SharedVariableLedger, lin, quad, center, const=None) -> list[PenaltyTerm]:
    n = len(ledger.keys)
    lin = np.broadcast_to(lin, n)
    quad = np.broadcast_to(quad, n)
    center = np.broadcast_to(center, n)
    const = np.zeros(n) if const is None else np.broadcast_to(const, n)
    return [PenaltyTerm(k.name, float(a), float(q), float(c), float(d))
            for k, a, q, c, d in zip(ledger.keys, lin, quad, center, const)]


# Array forms: (lin, quad, center, const) such that the penalty is
# lin * v + quad * (v - center)**2 + const per shared variable.

def admm_penalty(ledger: SharedVariableLedger, rho: float):
    center = consensus_target(ledger.prev_local, ledger.received)
    return ledger.dual, np.full(len(ledger.keys), rho / 2.0), center, np.zeros(len(ledger.keys))


def app_penalty(ledger: SharedVariableLedger, beta: float):
    # proximal weight 2*beta against coupling weight beta; any less diverges
    lin = ledger.dual + beta * (ledger.prev_local - ledger.received)
    return lin, np.full(len(ledger.keys), beta), ledger.prev_local, np.zeros(len(ledger.keys))


def atc_penalty(ledger: SharedVariableLedger, beta: float):
    center = consensus_target(ledger.prev_local, ledger.received)
    return ledger.dual, np.full(len(ledger.keys), beta * beta), center, -ledger.dual * center


def admm_objective_terms(ledger: SharedVariableLedger, rho: float) -> list[PenaltyTerm]:
    """``dual*v + (rho/2)(v - vbar)**2`` with ``vbar`` the pairwise consensus point."""
    return _terms(ledger, *admm_penalty(ledger, rho))


def app_objective_terms(ledger: SharedVariableLedger, beta: float) -> list[PenaltyTerm]:
    """``dual*v + beta*(v - prev)**2 + beta*v*(prev - received)``."""
    return _terms(ledger, *app_penalty(ledger, beta))


def atc_objective_terms(ledger: SharedVariableLedger, beta: float) -> list[PenaltyTerm]:
    """``dual*(v - vbar) + (beta*(v - vbar))**2``."""
    return _terms(ledger, *atc_penalty(ledger, beta))


def _advance(ledger: SharedVariableLedger, dual: np.ndarray, beta: float | None = None) -> SharedVariableLedger:
    out = ledger.copy()
    out.dual = dual
    out.prev_local = ledger.local.copy()
    out.k = ledger.k + 1
    if beta is not None:
        out.beta = beta
    return out


def admm_dual_update(ledger: SharedVariableLedger, rho: float) -> SharedVariableLedger:
    target = consensus_target(ledger.local, ledger.received)
    return _advance(ledger, ledger.dual + rho * (ledger.local - target))


def app_dual_update(ledger: SharedVariableLedger, beta: float) -> SharedVariableLedger:
    return _advance(ledger, ledger.dual + beta * (ledger.local - ledger.received))


def atc_update(ledger: SharedVariableLedger, beta: float, alpha: float) -> SharedVariableLedger:
    target = consensus_target(ledger.local, ledger.received)
    dual = ledger.dual + 2.0 * beta * beta * (ledger.local - target)
    return _advance(ledger, dual, beta=alpha * beta)


def mismatch_parts(ledger: SharedVariableLedger) -> tuple[float, float]:
    """(sum of squares, max abs) of local minus received; combine across areas for global norms."""
    d = ledger.local - ledger.received
    if d.size == 0:
        return 0.0, 0.0
    return float(d @ d), float(np.max(np.abs(d)))


def mismatch_by_variable(ledger: SharedVariableLedger) -> dict[str, float]:
    """Sum of squared mismatch per variable family (``va``, ``p``, ``w``, ...)."""
    d = ledger.local - ledger.received
    out: dict[str, float] = {}
    for key, v in zip(ledger.keys, d):
        out[key.variable] = out.get(key.variable, 0.0) + float(v * v)
    return out


def compute_mismatch(ledger: SharedVariableLedger, norm=Norm.L2) -> float:
    sumsq, maxabs = mismatch_parts(ledger)
    return combine_norm([(sumsq, maxabs)], norm)


def combine_norm(parts, norm) -> float:
    """Global norm from per-area ``(sumsq, maxabs)`` parts, summed in the given order."""
    norm = _enum(Norm, norm, "norm")
    if norm == Norm.L2:
        total = 0.0
        for sumsq, _ in parts:
            total += sumsq
        return math.sqrt(total)
    return max((m for _, m in parts), default=0.0)


class Kernel:
    """Binds one algorithm's penalty and update rules to an :class:`AdaConfig`."""

    def __init__(self, config: AdaConfig):
        self.config = config

    def initial_beta(self) -> float:
        return float(self.config.penalty)

    def penalty(self, ledger: SharedVariableLedger):
        alg, c = self.config.algorithm, self.config
        if alg == Algorithm.ADMM:
            return admm_penalty(ledger, c.penalty)
        if alg == Algorithm.APP:
            return app_penalty(ledger, c.penalty)
        return atc_penalty(ledger, ledger.beta)

    def terms(self, ledger: SharedVariableLedger) -> list[PenaltyTerm]:
        return _terms(ledger, *self.penalty(ledger))

    def update(self, ledger: SharedVariableLedger) -> SharedVariableLedger:
        alg, c = self.config.algorithm, self.config
        if alg == Algorithm.ADMM:
            return admm_dual_update(ledger, c.penalty)
        if alg == Algorithm.APP:
            return app_dual_update(ledger, c.penalty)
        return atc_update(ledger, ledger.beta, c.alpha)
