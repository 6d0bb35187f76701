"""Acceptance criteria, one test per criterion, each recording a PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) to print the lines without pytest.
"""
import sys
import time

import numpy as np
import pytest

from kclg.lattice import Configuration, Direction, Domain, FinitePermutation, cycle_from_sites, make_rng
from kclg.models import get_model, verify_axioms
from kclg.moves import (MoveContext, bt1d_certificate, bt1d_ex_minus_composition, bt1d_ex_plus, bt1d_tr_minus,
                        bt1d_tr_plus, bt2d_certificate, flip_move, hop_move, search_translation, validate)
from kclg.selfdiff import aux_self_diffusion_closed_form, aux_tracer_dynamics, self_diffusion_qp
from kclg.simulate import KMC, chi_square_transitions, run, run_events, tracer_run, transition_counts
from kclg.spectral import (box_census, build_reservoir_generator, build_torus_generator, cluster_masks,
                           contains_empty_cluster, ergodic_components, is_blocked, relaxation_time)
from kclg.transport import aux_diffusion_closed_form, diffusion_coefficient, solve_qp, total_current

from conftest import ACCEPTANCE_LINES

PAIRS = [[(1,), (2,)], [(1,), (3,)]]


def record(n, ok, label, detail, elapsed=None):
    tag = "PASS" if ok else "FAIL"
    timing = f" [{elapsed:.1f}s]" if elapsed is not None else ""
    line = f"{tag} {n:>4} {label}: {detail}{timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_01_axioms():
    worst, failures = 0.0, []
    for name in ["bt1d", "bt2d", "glt1d", "bt1d-aux", "bt2d-aux", "bt1d-aux-cluster"]:
        t = time.perf_counter()
        rep = verify_axioms(get_model(name))
        dt = time.perf_counter() - t
        worst = max(worst, dt)
        if not rep.passed or dt >= 1.0:
            failures.append(name)
    ok = not failures
    record("1", ok, "model axioms", f"6 models, slowest {worst:.2f}s, failing {failures or 'none'}")
    assert ok


def test_02_move_calculus():
    t = time.perf_counter()
    m = get_model("bt1d")
    rep = validate(bt1d_tr_plus(), MoveContext(m), "exhaustive")
    a = rep.valid and rep.permutation == cycle_from_sites([(1,), (2,), (3,)]) and rep.loss == 0 \
        and rep.energy_barrier == 0
    rep = validate(bt1d_ex_minus_composition(), MoveContext(m), "exhaustive")
    b = rep.valid and rep.permutation == FinitePermutation.transposition((-3,), (-4,))
    cert2 = bt2d_certificate()
    library = [(m, bt1d_tr_plus()), (m, bt1d_tr_minus()), (m, bt1d_ex_plus()), (m, bt1d_ex_minus_composition())]
    library += [(cert2.model, p) for p in list(cert2.translations.values()) + list(cert2.exchanges.values())]
    checked, agree = 0, True
    for model, p in library:
        lo, hi = p.window()
        size = int(np.prod([h - l + 1 for l, h in zip(lo, hi)]))
        if size > 16:
            continue
        w = validate(p, MoveContext(model), "worstCase")
        x = validate(p, MoveContext(model), "exhaustive")
        agree &= (w.valid == x.valid) and (w.permutation == x.permutation)
        checked += 1
    elapsed = time.perf_counter() - t
    ok = a and b and agree and checked > 0 and elapsed < 10
    record("2", ok, "move calculus", f"(a) Tr+1 (1,2,3) loss 0 EB 0: {a}; (b) Ex-1 = (-3,-4): {b}; "
           f"(c) worst-case = exhaustive on {checked} moves: {agree}", elapsed)
    assert ok


def test_03_mobility_search():
    t = time.perf_counter()
    bt1d, bt2d = get_model("bt1d"), get_model("bt2d")
    ok1 = all(search_translation(bt1d, [(1,), (2,)], 3, e).program.T == 2 for e in Direction.all(1))
    square = [(1, 1), (1, 2), (2, 1), (2, 2)]
    ok2 = True
    for e in Direction.all(2):
        res = search_translation(bt2d, square, 3, e)
        ok2 &= res.program is not None and validate(res.program, MoveContext(bt2d)).valid
    ok3 = all(search_translation(bt1d, [(0,)], l, e).program is None for l in range(1, 5) for e in Direction.all(1))
    elapsed = time.perf_counter() - t
    ok = ok1 and ok2 and ok3 and elapsed < 30
    record("3", ok, "mobility search", f"BT-1d pair 2-step: {ok1}; BT-2d square all directions: {ok2}; "
           f"single vacancy l<=4 none: {ok3}", elapsed)
    assert ok


def test_04_flip_move():
    t = time.perf_counter()
    m = get_model("bt1d")
    cert = bt1d_certificate()
    ok, worst_eb = True, 0
    for L in (6, 8):
        for z in range(1, L + 1):
            rep = validate(flip_move(m, cert, (z,), L), MoveContext(m, reservoir=True), "exhaustive")
            ok &= bool(rep.valid and rep.lift_valid
                       and np.array_equal(rep.final_states, rep.initial_states ^ (1 << (z - 1))))
            worst_eb = max(worst_eb, rep.energy_barrier)
    elapsed = time.perf_counter() - t
    ok = ok and worst_eb <= 3 and elapsed < 60
    record("4", ok, "flip move", f"L in {{6,8}}, all z, final = flipped initial for every eta; max EB {worst_eb} <= 3",
           elapsed)
    assert ok


def test_05_relaxation_scaling():
    t = time.perf_counter()
    m = get_model("bt1d")
    Ls = [4, 6, 8, 10, 12]
    taus = [relaxation_time(build_reservoir_generator(m, L, 0.5)) for L in Ls]
    slope = np.polyfit(np.log(Ls), np.log(taus), 1)[0]
    ratio = relaxation_time(build_reservoir_generator(m, 8, 0.3)) / taus[2]
    elapsed = time.perf_counter() - t
    ok = 1.6 <= slope <= 2.4 and ratio > 1 and elapsed < 300
    record("5", ok, "relaxation scaling", f"slope {slope:.3f} in [1.6,2.4]; tau(0.3)/tau(0.5) at L=8 = {ratio:.3f}",
           elapsed)
    assert ok


def test_06_ergodic_components():
    t = time.perf_counter()
    m = get_model("bt1d")
    bad = [(L, k) for L in range(1, 11) for k in range(L + 1) if not ergodic_components(m, L, k, PAIRS).match]
    rep = ergodic_components(m, 4, 2, PAIRS)
    single = [c for c in rep.components if c.size == 1]
    small = rep.sizes == [1, 5] and len(single) == 1 and rep.space.vacancy_sites(int(single[0].members[0])) == [(1,), (4,)]
    elapsed = time.perf_counter() - t
    ok = not bad and small and elapsed < 60
    record("6", ok, "ergodic components", f"mismatching (L,k): {bad or 'none'}; L=4 k=2 sizes {rep.sizes}, "
           f"singleton at {{1,4}}: {small}", elapsed)
    assert ok


def test_07_blocked_configuration():
    t = time.perf_counter()
    m = get_model("bt1d")
    c = Configuration.from_vacancies(Domain.box(18, 1), [(10,), (13,), (16,)])
    sim = KMC(m, c)
    rate0 = sim.total_rate
    n = run_events(sim, 10 ** 6)
    unchanged = np.array_equal(sim.bits, c.bits)
    elapsed = time.perf_counter() - t
    ok = rate0 == 0 and is_blocked(c, m) and n == 0 and unchanged and elapsed < 5
    record("7", ok, "blocked configuration", f"total rate {rate0}, events fired {n} of 10^6, unchanged {unchanged}",
           elapsed)
    assert ok


def _pregood_violations(lam, samples=10_000, L=60, k=12, seed=8):
    dom = Domain.box(L, 1)
    masks = cluster_masks(dom, PAIRS)
    rng = make_rng(seed)
    full = (1 << L) - 1
    accepted, violations = 0, 0
    while accepted < samples:
        vac = rng.choice(L, k, replace=False)
        state = full ^ int(sum(1 << int(v) for v in vac))
        if not contains_empty_cluster(np.array([state], np.int64), masks)[0]:
            continue
        accepted += 1
        bits = np.ones(L, np.uint8)
        bits[vac] = 0
        pregood, _ = box_census(Configuration(dom, bits), PAIRS, lam)
        if pregood < k / (2 * lam):
            violations += 1
    return violations


def test_08_pregood_box_count():
    t = time.perf_counter()
    v = _pregood_violations(5)
    elapsed = time.perf_counter() - t
    ok = v == 0 and elapsed < 60
    record("8", ok, "pregood boxes (lambda=5)", f"{v} violations in 10^4 ergodic configurations (L=60, k=12)", elapsed)
    assert ok


@pytest.mark.parametrize("lam", [20, 30])
def test_08_pregood_box_count_large_boxes(lam):
    t = time.perf_counter()
    v = _pregood_violations(lam)
    ok = v == 0
    record(f"8.{lam}", ok, f"pregood boxes (lambda={lam}, supplementary)",
           f"{v} violations in 10^4 ergodic configurations", time.perf_counter() - t)
    assert ok


def test_09_zero_current():
    t = time.perf_counter()
    worst = {}
    rng = make_rng(9)
    for name in ("bt1d-aux", "bt2d-aux"):
        m = get_model(name)
        dom = Domain.box(12, m.dim, "periodic")
        w = 0
        for _ in range(1000):
            q = rng.uniform(0.05, 0.95)
            c = Configuration(dom, (rng.random(dom.size) >= q).astype(np.uint8))
            w = max(w, int(np.abs(total_current(c, m)).max()))
        worst[name] = w
    elapsed = time.perf_counter() - t
    ok = all(v == 0 for v in worst.values()) and elapsed < 5
    record("9", ok, "zero current", f"max |J| over 10^3 torus configurations: {worst}", elapsed)
    assert ok


def test_10_aux_closed_form():
    t = time.perf_counter()
    worst = 0.0
    cases = 0
    for name, max_sites in (("bt1d-aux", 8), ("bt1d-aux-cluster", 8), ("bt2d-aux", 5)):
        m = get_model(name)
        u = [1.0] * m.dim if m.dim == 1 else [1.0, 0.5]
        for n in range(max_sites + 1):
            window = [(k,) for k in range(n)] if m.dim == 1 else [(k % 3, k // 3) for k in range(n)]
            for q in (0.2, 0.5, 0.8):
                diff = abs(diffusion_coefficient(m, u, window, q, budget=1 << 22) - aux_diffusion_closed_form(m, q, u))
                worst = max(worst, diff)
                cases += 1
    elapsed = time.perf_counter() - t
    ok = worst < 1e-9 and elapsed < 60
    record("10", ok, "auxiliary closed form", f"{cases} window/q cases, max |QP - closed form| = {worst:.1e}", elapsed)
    assert ok


def test_11_diffusion_bracket():
    t = time.perf_counter()
    m = get_model("bt1d")
    ok_bracket, ok_mono, worst_empty = True, True, 0.0
    for q in (0.2, 0.5, 0.8):
        vals = [diffusion_coefficient(m, [1.0], [(k,) for k in range(n)], q) for n in range(7)]
        ok_bracket &= all(q - 1e-12 <= v <= 2 * q + 1e-12 for v in vals)
        ok_mono &= all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
        worst_empty = max(worst_empty, abs(vals[0] - (2 * q - q * q)))
    elapsed = time.perf_counter() - t
    ok = ok_bracket and ok_mono and worst_empty < 1e-9 and elapsed < 300
    record("11", ok, "diffusion bracket", f"q <= D <= 2q: {ok_bracket}; nonincreasing: {ok_mono}; "
           f"|D(empty) - (2q - q^2)| = {worst_empty:.1e}", elapsed)
    assert ok


REPLICAS_12 = 100_000


@pytest.fixture(scope="module")
def aux_msd():
    dyn = aux_tracer_dynamics(bt2d_certificate())
    t = time.perf_counter()
    res = tracer_run(dyn, 64, 0.5, 20.0, seed=12, replicas=REPLICAS_12, u=[1.0, 0.0])
    return dyn, res, time.perf_counter() - t


def test_12_aux_self_diffusion(aux_msd):
    dyn, res, elapsed = aux_msd
    target = aux_self_diffusion_closed_form(0.5, 5, [1.0, 0.0])
    est, se = res.diffusion_estimate()
    _, qp = solve_qp(self_diffusion_qp(dyn, [1.0, 0.0], [(1, 0), (0, 1)], 0.5))
    kmc_ok = abs(est - target) <= 0.1 * target
    qp_ok = abs(qp - target) <= 1e-9
    ok = kmc_ok and qp_ok and elapsed < 600
    record("12", ok, "auxiliary self-diffusion", f"target {target:.6f}; KMC {est:.6f} +- {se:.6f} "
           f"({REPLICAS_12} replicas, {res.moved} mobile); QP {qp:.6f}", elapsed)
    assert ok


def test_12_kmc_matches_qp(aux_msd):
    dyn, res, _ = aux_msd
    est, se = res.diffusion_estimate()
    _, qp = solve_qp(self_diffusion_qp(dyn, [1.0, 0.0], [(1, 0), (0, 1)], 0.5))
    ok = abs(est - qp) <= 0.1 * qp
    record("12.x", ok, "auxiliary self-diffusion, KMC vs QP (supplementary)",
           f"KMC {est:.6f} +- {se:.6f} vs QP {qp:.6f} = q^5", None)
    assert ok


def test_13_kmc_correctness():
    t = time.perf_counter()
    m = get_model("bt1d")
    R = build_torus_generator(m, 6, 2)
    sim = KMC(m, Configuration.from_vacancies(Domain.box(6, 1, "periodic"), [(1,), (2,)]), seed=13)
    stat, dof, p = chi_square_transitions(transition_counts(sim, 100_000), R)

    def series():
        s = KMC(m, Configuration.full(Domain.box(8, 1, "empty")), seed=5, reservoir_q=0.5)
        return run(s, 100.0, {"N": lambda b: b.sum()}, np.arange(1.0, 101.0))["N"].values
    same = np.array_equal(series(), series())
    elapsed = time.perf_counter() - t
    ok = p > 0.01 and same and elapsed < 60
    record("13", ok, "KMC correctness", f"chi^2 = {stat:.1f} on {dof} dof, p = {p:.3f}; same-seed identical {same}",
           elapsed)
    assert ok


def test_14_hop_move():
    t = time.perf_counter()
    cert = bt2d_certificate()
    rep = validate(hop_move(cert), MoveContext(cert.model, tracer=(0, 0)), "worstCase")
    sigma_h = cycle_from_sites([(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)])
    elapsed = time.perf_counter() - t
    ok = rep.valid and rep.tracer_ok and rep.permutation == sigma_h and elapsed < 30
    record("14", ok, "hop move", f"valid {rep.valid}, tracer only jumps to empty sites {rep.tracer_ok}, "
           f"permutation is the 5-cycle {rep.permutation == sigma_h}, T = {rep.T}", elapsed)
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
