import numpy as np
import pytest
from hypothesis import given, strategies as st

from kclg.lattice import (Configuration, Direction, Domain, DomainError, FinitePermutation, cycle_from_sites,
                          make_rng, sample_equilibrium, sample_fixed_vacancies)


def test_direction_roundtrip():
    for d in (1, 2, 3):
        for e in Direction.all(d):
            assert Direction.parse(str(e)) == e
            assert (-e).vector(d) == tuple(-c for c in e.vector(d))
    assert str(Direction(2, -1)) == "-2"


def test_domain_indexing_roundtrip():
    dom = Domain.box(4, 2, "occupied")
    for k, x in enumerate(dom.sites()):
        assert dom.index(x) == k
        assert dom.site(k) == x
    assert dom.resolve((0, 1)) is None
    with pytest.raises(DomainError):
        dom.index((5, 1))


def test_periodic_wrap_and_edges():
    dom = Domain.box(5, 1, "periodic")
    assert dom.wrap((0,)) == (5,)
    assert dom.resolve((6,)) == 0
    assert len(dom.edges()) == 5
    assert len(Domain.box(5, 1, "occupied").edges()) == 4


def test_boundary_reads():
    c = Configuration.full(Domain.box(3, 1, "empty"))
    assert c.read((0,)) == 0
    assert Configuration.full(Domain.box(3, 1, "occupied")).read((4,)) == 1


def test_boundary_sites_2d():
    dom = Domain.box(4, 2)
    assert len(dom.boundary_sites()) == 12
    assert not dom.is_boundary((2, 3))


def test_exchange_and_flip():
    dom = Domain.box(4, 1)
    c = Configuration.from_vacancies(dom, [(2,)])
    assert c.exchange((2,), (3,)).vacancies() == [(3,)]
    assert c.flip((2,)).vacancies() == []
    assert c.exchange((1,), (4,)) == c


def test_permutation_semantics():
    # the value at x moves to sigma(x)
    dom = Domain.box(3, 1)
    c = Configuration.from_vacancies(dom, [(1,)])
    sigma = cycle_from_sites([(1,), (2,), (3,)])
    assert c.apply_permutation(sigma).vacancies() == [(2,)]


def test_permutation_algebra():
    p = cycle_from_sites([(1,), (2,), (3,)])
    q = FinitePermutation.transposition((1,), (2,))
    pq = p.compose(q)
    assert pq((1,)) == p(q((1,)))
    assert p.compose(p.inverse()).is_identity()
    assert p.translate((2,))((3,)) == (4,)
    assert sorted(len(c) for c in p.cycles()) == [3]


sites1 = st.lists(st.integers(-5, 5), min_size=2, max_size=6, unique=True)


@given(sites1, sites1)
def test_compose_is_associative_with_inverse(a, b):
    p = cycle_from_sites([(x,) for x in a])
    q = cycle_from_sites([(x,) for x in b])
    assert p.compose(q).inverse() == q.inverse().compose(p.inverse())


@given(st.integers(0, 2 ** 12 - 1), sites1)
def test_permutation_preserves_particle_count(mask, cyc):
    dom = Domain.box(11, 1, "periodic")
    c = Configuration(dom, [(mask >> k) & 1 for k in range(11)])
    pts = [(x + 6,) for x in cyc]
    sigma = cycle_from_sites(pts)
    assert c.apply_permutation(sigma).bits.sum() == c.bits.sum()


def test_translate_on_torus():
    dom = Domain.box(4, 1, "periodic")
    c = Configuration.from_vacancies(dom, [(1,)])
    assert c.translate((1,)).vacancies() == [(2,)]
    with pytest.raises(DomainError):
        Configuration.full(Domain.box(4, 1)).translate((1,))


def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(3, 1).random(4)
    assert np.array_equal(a, make_rng(3, 1).random(4))
    assert not np.array_equal(a, make_rng(3, 2).random(4))


def test_samplers():
    dom = Domain.box(40, 2, "periodic")
    c = sample_equilibrium(dom, 0.3, 1)
    assert abs((c.bits == 0).mean() - 0.3) < 0.03
    c = sample_fixed_vacancies(Domain.box(10, 1), 4, 2)
    assert len(c.vacancies()) == 4
    with pytest.raises(ValueError):
        sample_equilibrium(dom, 1.5, 0)
