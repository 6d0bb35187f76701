"""Tagged-particle dynamics driven by permutations, and self-diffusion variational forms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .lattice import Configuration, Direction, FinitePermutation, Site, add, origin, sub, unit
from .models import ConstraintModel, RateMode
from .transport import VariationalProblem, _assemble, _basis, _enumerate, _mask, _product


@dataclass(frozen=True)
class TracerGenerator:
    """A permutation applied around the tracer, with a clause-based rate in the tracer frame.

    The rate reads ``zeta = tau_{-z} eta``, the configuration seen from the
    tracer.  After the move the tracer sits at ``z + sigma(0)``.
    """

    sigma: FinitePermutation
    clauses: tuple[tuple[frozenset, float], ...]
    indicator: bool = True
    name: str = ""

    def jump(self, d: int) -> Site:
        return self.sigma(origin(d))

    def rate(self, read) -> float:
        total = 0.0
        for sites, w in self.clauses:
            if all(read(s) == 0 for s in sites):
                if self.indicator:
                    return 1.0
                total += w
        return total

    def reverse(self, d: int) -> "TracerGenerator":
        """``tau_{-s} sigma^{-1} tau_{s}`` with ``s = sigma(0)``; the rate follows the frame."""
        s = self.jump(d)
        inv = self.sigma.inverse()
        mapping = {}
        for y in set(self.sigma.support) | {sub(self.sigma(x), s) for x in self.sigma.support}:
            img = sub(inv(add(y, s)), s)
            if img != y:
                mapping[y] = img
        rev = FinitePermutation(mapping)
        clauses = tuple((frozenset(sub(self.sigma(x), s) for x in sites), w) for sites, w in self.clauses)
        name = self.name[:-1] if self.name.endswith("'") else self.name + "'"
        return TracerGenerator(rev, clauses, self.indicator, name)

    def key(self):
        return self.sigma, frozenset(self.clauses), self.indicator


class PermutationDynamics:
    def __init__(self, dim: int, generators: Sequence[TracerGenerator], name: str = "dynamics"):
        self.dim = dim
        self.generators = list(generators)
        self.name = name

    def generators_for(self, window: Sequence[Site]) -> list[TracerGenerator]:
        return self.generators

    def reversal_closed(self) -> bool:
        keys = {g.key() for g in self.generators}
        return all(g.reverse(self.dim).key() in keys for g in self.generators)

    def max_rate(self) -> float:
        return max(sum(w for _, w in g.clauses) if not g.indicator else 1.0 for g in self.generators)

    def transitions(self, c: Configuration, z: Site):
        """``(rate, new_tracer, generator)`` for each generator with positive rate at tracer ``z``."""
        out = []
        for g in self.generators:
            r = g.rate(lambda s: c.read(add(z, s)))
            if r > 0:
                out.append((r, c.domain.wrap(add(z, g.jump(self.dim))), g))
        return out

    def apply(self, c: Configuration, z: Site, g: TracerGenerator) -> tuple[Configuration, Site]:
        shifted = g.sigma.translate(z)
        return c.apply_permutation(shifted), c.domain.wrap(add(z, g.jump(self.dim)))


def _bond_generator(m: ConstraintModel, x: Site, e: Direction, through_origin: bool) -> TracerGenerator:
    d = m.dim
    base, axis = m.bond(x, e)
    y = add(x, e.vector(d))
    extra = {y} if through_origin else set()
    clauses = tuple((frozenset(add(base, o) for o in cl.offsets) | extra, cl.weight) for cl in m.clauses(axis))
    return TracerGenerator(FinitePermutation.transposition(x, y), clauses,
                           m.rate_mode is RateMode.INDICATOR_ANY, f"({x},{y})")


class KCTracerDynamics(PermutationDynamics):
    """Nearest-neighbour exchanges; an exchange through the tracer needs the other site empty."""

    def __init__(self, m: ConstraintModel, radius: int = 2):
        self.model = m
        d = m.dim
        o = origin(d)
        gens = [_bond_generator(m, o, e, True) for e in Direction.all(d)]
        from itertools import product
        for x in product(range(-radius, radius + 1), repeat=d):
            for a in range(1, d + 1):
                y = add(x, unit(d, a))
                if o in (x, y) or max(abs(c) for c in y) > radius:
                    continue
                gens.append(_bond_generator(m, x, Direction(a), False))
        super().__init__(d, gens, f"kc-{m.name}")

    def generators_for(self, window: Sequence[Site]) -> list[TracerGenerator]:
        d = self.dim
        o = origin(d)
        out = [_bond_generator(self.model, o, e, True) for e in Direction.all(d)]
        bonds = set()
        for s in window:
            for e in Direction.all(d):
                t = add(s, e.vector(d))
                if o in (s, t):
                    continue
                base, axis = self.model.bond(s, e)
                bonds.add((base, axis))
        for base, axis in sorted(bonds):
            out.append(_bond_generator(self.model, base, Direction(axis), False))
        return out


def kc_tracer_dynamics(m: ConstraintModel, radius: int = 2) -> KCTracerDynamics:
    return KCTracerDynamics(m, radius)


def aux_tracer_dynamics(cert) -> PermutationDynamics:
    """Generators ``sigma_{+-alpha}`` carrying the tracer with its vacancy pattern.

    All rates are the indicator that the pattern is empty.
    """
    from .moves import hat_cluster, sigma_move

    d = cert.dim
    if d < 2:
        raise ValueError("auxiliary tracer dynamics need d >= 2")
    hat = hat_cluster(cert)
    gens = []
    for a in range(1, d + 1):
        sigma = sigma_move(cert, a).permutation()
        g = TracerGenerator(sigma, ((frozenset(hat), 1.0),), True, f"sigma{a}")
        gens.extend([g, g.reverse(d)])
    return PermutationDynamics(d, gens, "aux-tracer")


def self_diffusion_window(dyn: PermutationDynamics, window: Sequence[Site]) -> list[Site]:
    d = dyn.dim
    o = origin(d)
    sites = set(window)
    for g in dyn.generators_for(window):
        for cl, _ in g.clauses:
            sites |= cl
        s = g.jump(d)
        inv = g.sigma.inverse()
        sites |= {inv(add(y, s)) for y in window}
    sites.discard(o)
    return sorted(sites)


def self_diffusion_qp(dyn: PermutationDynamics, u: Sequence[float], window: Sequence[Site], q: float,
                      budget: int = 1 << 20) -> VariationalProblem:
    """``1/2 sum_sigma nu_0[c_sigma (u.sigma(0) + f(tau_{-sigma(0)} sigma zeta) - f(zeta))^2]``.

    ``nu_0`` is the product measure conditioned on an occupied origin; the
    origin is dropped from the enumeration and read as 1.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie strictly between 0 and 1")
    d = dyn.dim
    o = origin(d)
    u = np.asarray(u, float)
    window = sorted({tuple(s) for s in window} - {o})
    sites = self_diffusion_window(dyn, window)
    pos = {s: k for k, s in enumerate(sites)}
    states, probs = _enumerate(sites, q, budget)
    basis = _basis(window)
    terms = []
    for g in dyn.generators_for(window):
        jump = g.jump(d)
        inv = g.sigma.inverse()
        const_val = float(u @ np.asarray(jump, float))
        clause_masks = [(_mask(pos, cl - {o}), w, o in cl) for cl, w in g.clauses]

        def rate(st, clause_masks=clause_masks, ind=g.indicator):
            out = np.zeros(st.shape[0])
            for mk, w, hits_origin in clause_masks:
                if hits_origin:
                    continue
                sat = (st & mk) == 0
                out = np.maximum(out, sat) if ind else out + w * sat
            return out

        def grad(st, S, inv=inv, jump=jump):
            pulled = [inv(add(s, jump)) for s in S]
            after = _product(st, _mask(pos, [p for p in pulled if p != o]))
            return after - _product(st, _mask(pos, S))

        terms.append((rate, lambda st, c=const_val: np.full(st.shape[0], c), grad))
    A, b, c0 = _assemble(terms, basis, pos, states, probs)
    return VariationalProblem(A, b, c0, 0.5, basis, window,
                              {"estimator": "exact", "dynamics": dyn.name, "dependencyWindow": len(sites)})


def aux_self_diffusion_closed_form(q: float, cluster_size: int, u: Sequence[float]) -> float:
    """``1/2 q^n |u|^2``."""
    return 0.5 * q ** cluster_size * float(np.dot(u, u))


def f_zero_value(dyn: PermutationDynamics, u: Sequence[float], q: float) -> float:
    """The form at ``f = 0``: ``1/2 sum_sigma (u.sigma(0))^2 nu_0[c_sigma]``."""
    vp = self_diffusion_qp(dyn, u, [], q)
    return vp.value()
