import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopf.forms import FormulationKind
from dopf.kernels import (AdaConfig, Algorithm, Kernel, Norm, SharedVariableLedger, admm_dual_update,
                          admm_objective_terms, app_dual_update, app_objective_terms, atc_objective_terms,
                          atc_update, combine_norm, compute_mismatch, consensus_target, mismatch_parts)
from dopf.partition import SharedVariableKey


def _keys(n, owner=1, counterpart=2):
    return tuple(SharedVariableKey(owner, counterpart, "bus", ("va", i)) for i in range(n))


def ledger(local, received, dual=None, prev=None, beta=1.0, owner=1, counterpart=2):
    local = np.atleast_1d(np.asarray(local, dtype=float))
    n = len(local)
    received = np.broadcast_to(np.asarray(received, dtype=float), n).copy()
    dual = np.zeros(n) if dual is None else np.broadcast_to(np.asarray(dual, dtype=float), n).copy()
    prev = local.copy() if prev is None else np.broadcast_to(np.asarray(prev, dtype=float), n).copy()
    return SharedVariableLedger(owner, _keys(n, owner, counterpart), local, received, dual, prev, beta, 0)


def _single(terms):
    (t,) = terms
    return t


# --- consensus target ---------------------------------------------------------

def test_consensus_target_examples():
    assert consensus_target(1.0, 0.9) == pytest.approx(0.95)
    assert consensus_target(0.37, 0.37) == 0.37
    assert consensus_target(0.1, -0.1) == 0.0


# --- ADMM ---------------------------------------------------------------------

def test_admm_terms_center_and_weight():
    t = _single(admm_objective_terms(ledger(0.0, 0.9, prev=1.0), 100.0))
    assert (t.lin, t.quad) == (0.0, 50.0)
    assert t.center == pytest.approx(0.95)


def test_admm_terms_dual_is_linear():
    t = _single(admm_objective_terms(ledger(0.0, 0.9, dual=5.0, prev=1.0), 100.0))
    assert t.lin == 5.0


def test_admm_terms_at_consensus():
    t = _single(admm_objective_terms(ledger(0.3, 0.3, dual=2.0, prev=0.3), 10.0))
    assert t.center == 0.3
    # d/dv [lin v + quad (v - c)^2] at v = c
    assert t.lin + 2 * t.quad * (0.3 - t.center) == 2.0


def test_admm_dual_update_examples():
    out = admm_dual_update(ledger(1.0, 0.9), 100.0)
    assert out.dual[0] == pytest.approx(5.0)
    assert out.k == 1
    assert admm_dual_update(ledger(0.4, 0.4, dual=3.0), 100.0).dual[0] == 3.0


# --- APP ----------------------------------------------------------------------

def test_app_terms_pure_proximal():
    # proximal weight is beta (not beta/2); see the stability note in the kernel
    t = _single(app_objective_terms(ledger(0.0, 0.7, prev=0.7), 10.0))
    assert (t.lin, t.quad, t.center) == (0.0, 10.0, 0.7)


def test_app_terms_cross_term():
    t = _single(app_objective_terms(ledger(0.0, 0.8, prev=1.0), 10.0))
    assert t.lin == pytest.approx(2.0)


def test_app_dual_update_examples():
    assert app_dual_update(ledger(1.0, 0.9), 10.0).dual[0] == pytest.approx(1.0)
    assert app_dual_update(ledger(0.5, 0.5, dual=-1.0), 10.0).dual[0] == -1.0


# --- ATC ----------------------------------------------------------------------

def test_atc_terms_unit_beta():
    t = _single(atc_objective_terms(ledger(0.0, 0.0, prev=0.0), 1.0))
    assert (t.lin, t.quad, t.center, t.const) == (0.0, 1.0, 0.0, 0.0)
    assert t.value(0.3) == pytest.approx(0.09)


def test_atc_terms_doubling_beta_quadruples():
    a = _single(atc_objective_terms(ledger(0.0, 0.2, prev=0.4), 1.5))
    b = _single(atc_objective_terms(ledger(0.0, 0.2, prev=0.4), 3.0))
    assert b.quad == pytest.approx(4 * a.quad)


def test_atc_terms_zero_at_consensus():
    t = _single(atc_objective_terms(ledger(0.6, 0.6, dual=7.0, prev=0.6), 2.0))
    assert t.value(0.6) == pytest.approx(0.0, abs=1e-15)
    assert t.lin + 2 * t.quad * (0.6 - t.center) == 7.0


def test_atc_update_examples():
    out = atc_update(ledger(0.5, 0.5, dual=1.0), 1.0, 1.2)
    assert out.beta == pytest.approx(1.2)
    assert out.dual[0] == 1.0
    # local - target = 0.05 with local 1.0, received 0.9
    out = atc_update(ledger(1.0, 0.9), 2.0, 1.05)
    assert out.dual[0] == pytest.approx(0.4)


# --- mismatch -----------------------------------------------------------------

def test_mismatch_examples():
    lg = ledger([1.3, 2.4], [1.0, 2.0])
    assert compute_mismatch(lg, Norm.L2) == pytest.approx(0.5)
    assert compute_mismatch(lg, "linf") == pytest.approx(0.4)
    assert compute_mismatch(ledger([1.0, 2.0], [1.0, 2.0]), "l2") == 0.0


def test_combine_norm_across_areas():
    parts = [mismatch_parts(ledger([0.3], [0.0])), mismatch_parts(ledger([0.0], [0.4]))]
    assert combine_norm(parts, "l2") == pytest.approx(0.5)
    assert combine_norm(parts, "linf") == pytest.approx(0.4)
    assert combine_norm([], "l2") == 0.0


# --- config -------------------------------------------------------------------

def test_config_defaults():
    assert AdaConfig(formulation="dc").penalty == 1e4
    assert AdaConfig(formulation="soc").penalty == 1e2
    atc = AdaConfig(algorithm="atc")
    assert (atc.penalty, atc.alpha) == (1.0, 1.05)
    assert AdaConfig(norm="inf").norm == Norm.LINF


@pytest.mark.parametrize("kw,match", [
    (dict(max_iter=0), "max iterations"),
    (dict(algorithm="atc", alpha=1.0), "alpha"),
    (dict(penalty=-1.0), "penalty"),
    (dict(tol=0.0), "tolerance"),
    (dict(termination="gossip"), "termination"),
    (dict(init="random"), "initialization"),
    (dict(workers=0), "workers"),
    (dict(tol=1e-2, solver_tol=1e-3), "solver tolerance"),
    (dict(algorithm="aladin"), "unknown algorithm"),
])
def test_config_validation(kw, match):
    with pytest.raises(ValueError, match=match):
        AdaConfig(**kw)


# --- properties ---------------------------------------------------------------

_val = st.floats(-2.0, 2.0, allow_nan=False)


@st.composite
def _ledger_states(draw):
    n = draw(st.integers(1, 6))
    vec = st.lists(_val, min_size=n, max_size=n)
    return draw(vec), draw(vec), draw(vec), draw(vec)


@settings(max_examples=100, deadline=None)
@given(_ledger_states(), st.floats(1e-3, 1e6), st.sampled_from(list(Algorithm)))
def test_terms_convex(state, penalty, alg):
    local, received, dual, prev = state
    lg = ledger(local, received, dual, prev, beta=penalty)
    fn = {Algorithm.ADMM: admm_objective_terms, Algorithm.APP: app_objective_terms,
          Algorithm.ATC: atc_objective_terms}[alg]
    assert all(t.quad >= 0 for t in fn(lg, penalty))


@settings(max_examples=100, deadline=None)
@given(_ledger_states())
def test_norm_dominance(state):
    local, received, _, _ = state
    lg = ledger(local, received)
    assert compute_mismatch(lg, "linf") <= compute_mismatch(lg, "l2") + 1e-15


@settings(max_examples=100, deadline=None)
@given(_ledger_states(), st.floats(1e-2, 1e4), st.sampled_from(list(Algorithm)))
def test_mirror_dual_sum_invariant(state, penalty, alg):
    local_a, local_b, dual_a, dual_b = state
    a = ledger(local_a, local_b, dual_a, beta=penalty, owner=1, counterpart=2)
    b = ledger(local_b, local_a, dual_b, beta=penalty, owner=2, counterpart=1)
    cfg = AdaConfig(algorithm=alg, penalty=penalty, alpha=1.1)
    k = Kernel(cfg)
    a2, b2 = k.update(a), k.update(b)
    # ATC steps scale with beta^2; allow rounding relative to the step size
    step = 2 * penalty ** 2 * 4 if alg == Algorithm.ATC else penalty * 4
    np.testing.assert_allclose(a2.dual + b2.dual, a.dual + b.dual, rtol=0, atol=1e-13 * max(step, 1.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1.001, 2.0), st.integers(1, 30))
def test_atc_beta_strictly_increasing(beta0, alpha, steps):
    k = Kernel(AdaConfig(algorithm="atc", penalty=beta0, alpha=alpha))
    lg = ledger([0.1, -0.2], [0.0, 0.3], beta=k.initial_beta())
    betas = [lg.beta]
    for _ in range(steps):
        lg = k.update(lg)
        betas.append(lg.beta)
    for prev, nxt in zip(betas, betas[1:]):
        assert nxt > prev
        assert nxt == pytest.approx(alpha * prev, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(_ledger_states(), st.floats(1e-2, 1e4), st.sampled_from([Algorithm.ADMM, Algorithm.APP]))
def test_consensus_fixed_point(state, penalty, alg):
    values, _, dual, _ = state
    k = Kernel(AdaConfig(algorithm=alg, penalty=penalty))
    lg = ledger(values, values, dual, prev=values)
    for _ in range(2):
        nxt = k.update(lg)
        np.testing.assert_array_equal(nxt.dual, lg.dual)
        assert compute_mismatch(nxt, "l2") == 0.0
        lg = nxt


def test_ledger_routing():
    keys = (SharedVariableKey(1, 2, "bus", ("va", 5)), SharedVariableKey(1, 3, "bus", ("va", 6)))
    lg = SharedVariableLedger.create(1, keys, {("va", 5): 0.1, ("va", 6): 0.2})
    assert lg.counterparts == [2, 3]
    assert lg.outgoing(3) == {("va", 6): 0.2}
    lg.receive(2, {("va", 5): 0.5})
    assert list(lg.received) == [0.5, 0.2]
    with pytest.raises(KeyError):
        lg.receive(3, {})
    with pytest.raises(ValueError):
        SharedVariableLedger(1, (SharedVariableKey(2, 1, "bus", ("va", 5)),), *np.zeros((4, 1)))


def test_kernel_default_formulation_penalty():
    assert Kernel(AdaConfig(formulation=FormulationKind.SOC)).initial_beta() == 100.0
