import numpy as np
import pytest
from hypothesis import given, strategies as st

from kclg.lattice import Domain, sample_equilibrium
from kclg.models import BudgetExceeded, ModelSpecError, get_model, verify_axioms
from kclg.transport import (AuxSpec, NumericalError, VariationalProblem, assemble_diffusion_qp,
                            aux_diffusion_closed_form, build_aux_model, bt1d_aux_spec, bt2d_aux_spec,
                            cluster_aux_spec, coefficients_for, diffusion_coefficient, evaluate_direct, mean_rate,
                            monte_carlo_value, solve_qp, total_current)

BT1D = get_model("bt1d")


def test_mean_rate_bt1d():
    for q in (0.2, 0.5, 0.8):
        assert mean_rate(BT1D, 1, q) == pytest.approx(1 - (1 - q) ** 2)


def test_empty_window_value():
    for q in (0.2, 0.5, 0.8):
        # with f = 0 the form is mu[c] E[(eta0 - eta1)^2] / (2 q (1-q)) = mu[c]
        assert diffusion_coefficient(BT1D, [1.0], [], q) == pytest.approx(2 * q - q * q, abs=1e-12)


def test_sep_and_glt_constants():
    assert diffusion_coefficient(get_model("sep1d"), [1.0], [(0,), (1,)], 0.4) == pytest.approx(1.0)
    assert diffusion_coefficient(get_model("glt1d"), [1.0], [(0,), (1,), (2,)], 0.3) == pytest.approx(0.6)


# frozen exact minima for the window {0,1,2,3}
FROZEN = {(0.5, 4): 43 / 60, (0.2, 4): 859 / 2475, (0.8, 4): 496 / 525}


@pytest.mark.parametrize("q,n", list(FROZEN))
def test_frozen_window_values(q, n):
    val = diffusion_coefficient(BT1D, [1.0], [(k,) for k in range(n)], q)
    assert val == pytest.approx(FROZEN[(q, n)], abs=1e-12)


@given(st.lists(st.floats(-2, 2), min_size=7, max_size=7), st.floats(0.1, 0.9))
def test_quadratic_form_matches_direct_evaluation(vals, q):
    window = [(0,), (1,), (2,)]
    vp = assemble_diffusion_qp(BT1D, [1.0], window, q)

    def f(occ):
        key = tuple(occ[s] for s in window)
        idx = key[0] + 2 * key[1] + 4 * key[2]
        return 0.0 if idx == 0 else vals[idx - 1]

    coef = coefficients_for(vp, f)
    assert vp.value(coef) == pytest.approx(evaluate_direct(BT1D, [1.0], window, q, f), rel=1e-9, abs=1e-12)


def test_minimum_matches_generic_optimizer():
    from scipy.optimize import minimize

    window = [(0,), (1,), (2,), (3,)]
    q = 0.5

    def objective(vals):
        def f(occ):
            idx = occ[(0,)] + 2 * occ[(1,)] + 4 * occ[(2,)] + 8 * occ[(3,)]
            return 0.0 if idx == 0 else vals[idx - 1]
        return evaluate_direct(BT1D, [1.0], window, q, f)

    best = minimize(objective, np.zeros(15), method="BFGS", options={"gtol": 1e-9})
    assert best.fun < 0.75 - 1e-3
    assert diffusion_coefficient(BT1D, [1.0], window, q) == pytest.approx(best.fun, abs=1e-7)


def test_minimum_is_below_any_trial():
    vp = assemble_diffusion_qp(BT1D, [1.0], [(0,), (1,), (2,), (3,)], 0.5)
    coef, val = solve_qp(vp)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert vp.value(coef + 0.1 * rng.standard_normal(len(coef))) >= val - 1e-12


def test_basis_order_does_not_matter():
    vp = assemble_diffusion_qp(BT1D, [1.0], [(0,), (1,), (2,)], 0.4)
    perm = np.random.default_rng(1).permutation(len(vp.b))
    assert solve_qp(vp.permuted(perm))[1] == pytest.approx(solve_qp(vp)[1], abs=1e-12)


def test_monte_carlo_estimators():
    window = [(0,), (1,), (2,)]
    vp = assemble_diffusion_qp(BT1D, [1.0], window, 0.5)
    coef, val = solve_qp(vp)
    mean, se = monte_carlo_value(BT1D, [1.0], window, 0.5, coef, samples=20000, seed=3)
    assert abs(mean - val) < 4 * se
    mc = diffusion_coefficient(BT1D, [1.0], window, 0.5, estimator="mc", samples=20000, seed=3)
    assert abs(mc - val) < 0.05


def test_bad_inputs():
    with pytest.raises(ValueError):
        assemble_diffusion_qp(BT1D, [1.0], [], 1.0)
    with pytest.raises(BudgetExceeded):
        assemble_diffusion_qp(BT1D, [1.0], [(k,) for k in range(8)], 0.5, budget=64)
    bad = VariationalProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2), 0.0, 1.0, [0, 1], [])
    with pytest.raises(NumericalError):
        solve_qp(bad)
    neg = VariationalProblem(-np.eye(2), np.zeros(2), 0.0, 1.0, [0, 1], [])
    with pytest.raises(NumericalError):
        solve_qp(neg)


def test_aux_specs():
    spec = bt1d_aux_spec()
    assert [set(c) for c in spec.clauses(1)] == [{(-1,)}, {(2,)}]
    spec = cluster_aux_spec(1, [(1,), (2,)], 3)
    assert [set(c) for c in spec.clauses(1)] == [{(-4,), (-3,), (-1,)}, {(-3,), (-2,), (2,)},
                                                 {(-1,), (3,), (4,)}, {(2,), (4,), (5,)}]
    assert AuxSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ModelSpecError):
        AuxSpec.from_dict({"dimension": 1})
    with pytest.raises(ModelSpecError):
        AuxSpec(1, ((),))


@pytest.mark.parametrize("spec", [bt1d_aux_spec(), bt2d_aux_spec(), cluster_aux_spec(1, [(1,), (2,)], 3)])
def test_aux_models_are_valid(spec):
    m = build_aux_model(spec)
    assert verify_axioms(m).passed
    assert m.c_max == max(spec.n(a) for a in range(1, spec.dim + 1))


@pytest.mark.parametrize("name,d,L", [("bt1d-aux", 1, 9), ("bt2d-aux", 2, 6), ("bt1d-aux-cluster", 1, 13)])
@given(seed=st.integers(0, 10 ** 6), q=st.floats(0.05, 0.95))
def test_aux_current_vanishes(name, d, L, seed, q):
    m = get_model(name)
    c = sample_equilibrium(Domain.box(L, d, "periodic"), q, seed)
    assert not np.any(total_current(c, m))


def test_non_gradient_model_has_current():
    m = get_model("bt2d")
    dom = Domain.box(8, 2, "periodic")
    assert any(np.any(total_current(sample_equilibrium(dom, 0.5, s), m)) for s in range(20))
    with pytest.raises(ValueError):
        total_current(sample_equilibrium(Domain.box(4, 1), 0.5, 0), m)


@pytest.mark.parametrize("name,u,window", [("bt1d-aux", [1.0], [(0,), (1,), (2,)]),
                                           ("bt2d-aux", [1.0, 0.5], [(0, 0), (1, 0)])])
def test_aux_closed_form_matches_qp(name, u, window):
    m = get_model(name)
    for q in (0.2, 0.5, 0.8):
        assert diffusion_coefficient(m, u, window, q) == pytest.approx(aux_diffusion_closed_form(m, q, u), abs=1e-9)
