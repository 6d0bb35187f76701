import numpy as np
import pytest
from hypothesis import given, strategies as st

from kclg.lattice import Configuration, Domain, sample_equilibrium, sample_fixed_vacancies
from kclg.models import get_model
from kclg.moves import bt2d_certificate
from kclg.selfdiff import aux_tracer_dynamics, kc_tracer_dynamics
from kclg.simulate import (KMC, Fenwick, autocorrelation, chi_square_transitions, run, run_events, series_csv,
                           tracer_run, transition_counts)
from kclg.spectral import build_torus_generator

BT1D = get_model("bt1d")


@given(st.lists(st.floats(0, 5), min_size=1, max_size=40), st.data())
def test_fenwick_search(weights, data):
    tree = Fenwick(np.array(weights))
    assert tree.total == pytest.approx(sum(weights))
    k = data.draw(st.integers(0, len(weights) - 1))
    tree.update(k, 2.5)
    weights[k] = 2.5
    target = data.draw(st.floats(0, sum(weights) * 0.999999))
    idx = tree.find(target)
    cum = np.cumsum(weights)
    assert idx == int(np.searchsorted(cum, target, side="right"))


def test_incremental_rates_match_rebuild():
    for m, dom, q in [(BT1D, Domain.box(10, 1, "empty"), 0.4), (get_model("bt2d"), Domain.box(5, 2, "periodic"), None),
                      (get_model("glt1d"), Domain.box(9, 1, "occupied"), None)]:
        sim = KMC(m, sample_equilibrium(dom, 0.5, 2), seed=1, reservoir_q=q, debug=True)
        run_events(sim, 2000)


def test_event_set_matches_generator_row():
    R = build_torus_generator(BT1D, 6, 2)
    Q = R.Q.tocsr()
    for i in range(len(R.space)):
        c = R.space.configuration(i)
        sim = KMC(BT1D, c)
        got = {}
        for (a, b), r in sim.active_events().items():
            got[int(R.space.states[i]) ^ (1 << a) ^ (1 << b)] = r
        row = Q.getrow(i)
        want = {int(R.space.states[j]): v for j, v in zip(row.indices, row.data) if j != i}
        assert got == want


def test_blocked_configuration():
    c = Configuration.from_vacancies(Domain.box(18, 1), [(10,), (13,), (16,)])
    sim = KMC(BT1D, c)
    assert sim.blocked and sim.step() is None
    assert run_events(sim, 1000) == 0
    ts = run(sim, 10.0, {"n": lambda b: b.sum()}, [1.0, 2.0])
    assert ts["n"].truncated and len(ts["n"].values) == 0


@given(seed=st.integers(0, 1000))
def test_vacancy_count_conserved(seed):
    dom = Domain.box(8, 1, "periodic")
    sim = KMC(BT1D, sample_fixed_vacancies(dom, 3, seed), seed=seed)
    for _ in range(200):
        if sim.step() is None:
            break
        assert int((sim.bits == 0).sum()) == 3


def test_same_seed_is_bit_identical():
    def once():
        sim = KMC(BT1D, Configuration.full(Domain.box(8, 1, "empty")), seed=11, reservoir_q=0.5)
        return run(sim, 50.0, {"N": lambda b: b.sum()}, np.arange(1, 51.0))["N"]
    a, b = once(), once()
    assert np.array_equal(a.values, b.values) and np.array_equal(a.times, b.times)


def test_empty_schedule_and_bad_schedule():
    sim = KMC(BT1D, Configuration.full(Domain.box(6, 1, "empty")), reservoir_q=0.5)
    out = run(sim, 10.0, {"N": lambda b: b.sum()}, [])
    assert len(out["N"].values) == 0
    with pytest.raises(ValueError):
        run(sim, 10.0, {"N": lambda b: b.sum()}, [2.0, 1.0])


def test_reservoir_density_converges():
    L, q = 8, 0.3
    sim = KMC(BT1D, Configuration.full(Domain.box(L, 1, "empty")), seed=4, reservoir_q=q)
    sim.advance_to(200.0)
    ts = run(sim, 8200.0, {"rho": lambda b: b.mean()}, np.arange(201.0, 8201.0, 2.0))["rho"]
    v = ts.values
    # batch means for a correlated series
    batches = v[: len(v) // 40 * 40].reshape(40, -1).mean(axis=1)
    se = batches.std(ddof=1) / np.sqrt(40)
    assert abs(v.mean() - (1 - q)) < 3 * se + 1e-3


def test_transition_frequencies_chi_square():
    R = build_torus_generator(BT1D, 6, 2)
    sim = KMC(BT1D, sample_fixed_vacancies(Domain.box(6, 1, "periodic"), 2, 3), seed=5)
    stat, dof, p = chi_square_transitions(transition_counts(sim, 20000), R)
    assert dof > 0 and p > 0.001


def test_autocorrelation_degenerate_and_white_noise():
    assert autocorrelation(np.ones(100), 1.0).degenerate
    assert autocorrelation([1.0, 2.0], 1.0).degenerate
    noise = np.random.default_rng(0).standard_normal(5000)
    res = autocorrelation(noise, 0.5)
    assert not res.degenerate and res.tau < 0.5


def test_autocorrelation_recovers_ar1():
    rng = np.random.default_rng(1)
    phi = np.exp(-0.1)
    x = np.zeros(50000)
    for k in range(1, len(x)):
        x[k] = phi * x[k - 1] + rng.standard_normal()
    res = autocorrelation(x, 1.0)
    assert res.tau == pytest.approx(10.0, rel=0.15)
    assert res.band[0] < res.tau < res.band[1]


def test_series_csv_has_provenance():
    sim = KMC(BT1D, Configuration.full(Domain.box(6, 1, "empty")), seed=2, reservoir_q=0.5)
    ts = run(sim, 3.0, {"N": lambda b: b.sum()}, [1.0, 2.0, 3.0])
    text = series_csv(ts, {"seed": 2, **ts["N"].provenance})
    lines = text.splitlines()
    assert lines[0].startswith("# {") and '"seed": 2' in lines[0]
    assert lines[1] == "t,N" and len(lines) == 5


def test_aux_tracer_blocked_when_hat_nonempty():
    dyn = aux_tracer_dynamics(bt2d_certificate())
    # all occupied: the carried vacancy pattern is never empty
    res = tracer_run(dyn, 16, 0.5, 5.0, seed=0, replicas=5, initial=lambda rng: np.ones((16, 16), np.uint8))
    assert res.moved == 0 and np.all(res.msd == 0)


def test_aux_tracer_free_walk_at_high_q():
    dyn = aux_tracer_dynamics(bt2d_certificate())
    res = tracer_run(dyn, 32, 0.999999, 5.0, seed=1, replicas=400)
    est, se = res.diffusion_estimate()
    # every replica walks freely with unit rate per generator
    assert abs(est - 1.0) < 4 * se


def test_kc_tracer_run_sep():
    dyn = kc_tracer_dynamics(get_model("sep1d"), 1)
    res = tracer_run(dyn, 10, 0.999999, 2.0, seed=1, replicas=200)
    est, se = res.diffusion_estimate()
    assert abs(est - 1.0) < 4 * se


def test_tracer_rejects_empty_site_and_reservoir():
    dom = Domain.box(5, 1, "empty")
    with pytest.raises(ValueError):
        KMC(BT1D, Configuration.from_vacancies(dom, [(1,)]), tracer=(1,))
    with pytest.raises(ValueError):
        KMC(BT1D, Configuration.full(dom), tracer=(1,), reservoir_q=0.5)
