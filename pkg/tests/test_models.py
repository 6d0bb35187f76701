import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kclg.lattice import Configuration, Direction, Domain, sample_equilibrium
from kclg.models import (BudgetExceeded, ModelSpecError, bond_table, get_model, loads_model, reservoir_rate,
                         verify_axioms)

BUILTINS = ["bt1d", "bt2d", "glt1d", "bt1d-aux", "bt2d-aux", "bt1d-aux-cluster"]


@pytest.mark.parametrize("name", BUILTINS)
def test_builtin_models_satisfy_axioms(name):
    assert verify_axioms(get_model(name)).passed


def test_sep_is_degenerate():
    rep = verify_axioms(get_model("sep1d"))
    assert not rep.passed
    assert not rep["nondegenerate"].passed


def test_bt1d_rates():
    m = get_model("bt1d")
    dom = Domain.box(6, 1)
    # a single vacancy at 3 enables (4,5) from the left and (1,2) from the right
    c = Configuration.from_vacancies(dom, [(3,)])
    assert m.edge_rate(c, (4,), Direction(1)) == 1.0
    assert m.edge_rate(c, (1,), Direction(1)) == 1.0
    assert m.edge_rate(c, (2,), Direction(1)) == 0.0
    assert m.edge_rate(c, (5,), Direction(1)) == 0.0
    # the rate is the same read from either end
    assert m.edge_rate(c, (3,), Direction(1, -1)) == m.edge_rate(c, (2,), Direction(1))


def test_model_roundtrip_and_digest():
    m = get_model("bt2d")
    m2 = loads_model(m.dumps())
    assert m2 == m and m2.digest() == m.digest()


def test_malformed_model_names_field():
    with pytest.raises(ModelSpecError, match="families"):
        loads_model(json.dumps({"dimension": 1}))
    bad = get_model("bt1d").to_dict()
    bad["range"] = 7
    with pytest.raises(ModelSpecError, match="range"):
        loads_model(json.dumps(bad))
    with pytest.raises(ModelSpecError):
        get_model("no-such-model")


def test_clause_touching_bond_is_rejected():
    d = get_model("bt1d").to_dict()
    d["families"][0]["clauses"].append({"offsets": [[1]], "weight": 1})
    with pytest.raises(ModelSpecError):
        loads_model(json.dumps(d))


def test_reservoir_rate():
    dom = Domain.box(4, 1, "empty")
    c = Configuration.from_vacancies(dom, [(1,)])
    assert reservoir_rate(c, (1,), 0.3) == pytest.approx(0.7)
    assert reservoir_rate(c, (4,), 0.3) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        reservoir_rate(c, (2,), 0.3)


def test_axiom_budget():
    with pytest.raises(BudgetExceeded):
        verify_axioms(get_model("bt2d-aux"), budget=1)


@pytest.mark.parametrize("name,d", [("bt1d", 1), ("bt2d", 2), ("glt1d", 1), ("bt2d-aux", 2)])
@given(seed=st.integers(0, 10 ** 6), q=st.floats(0.05, 0.95))
def test_bond_table_matches_direct_rates(name, d, seed, q):
    m = get_model(name)
    for boundary in ("occupied", "empty", "periodic"):
        dom = Domain.box(7, d, boundary)
        c = sample_equilibrium(dom, q, seed)
        table = bond_table(m, dom)
        vec = table.all_rates(c.bits)
        sites = list(dom.sites())
        for b in range(len(table)):
            direct = m.rate_from(c.read, sites[table.i[b]], int(table.axis[b]))
            assert table.rate(c.bits, b) == direct == vec[b]


@given(seed=st.integers(0, 10 ** 6))
def test_rates_do_not_depend_on_bond_occupancy(seed):
    m = get_model("bt2d")
    dom = Domain.box(6, 2, "periodic")
    c = sample_equilibrium(dom, 0.5, seed)
    table = bond_table(m, dom)
    for b in range(0, len(table), 7):
        i, j = table.i[b], table.j[b]
        for vi in (0, 1):
            for vj in (0, 1):
                bits = c.bits.copy()
                bits[i], bits[j] = vi, vj
                assert table.rate(bits, b) == table.rate(c.bits, b)


@given(seed=st.integers(0, 10 ** 6))
def test_rates_monotone_in_vacancies(seed):
    m = get_model("bt2d")
    dom = Domain.box(6, 2, "periodic")
    c = sample_equilibrium(dom, 0.4, seed)
    table = bond_table(m, dom)
    emptier = c.bits.copy()
    emptier[np.random.default_rng(seed).integers(0, dom.size)] = 0
    assert np.all(table.all_rates(emptier) >= table.all_rates(c.bits))
