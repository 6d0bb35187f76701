"""Bulk diffusion: restricted variational problems and zero-current auxiliary dynamics."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Iterable, Sequence

import numpy as np

from .lattice import Configuration, Site, add, origin, sub, unit
from .models import (BudgetExceeded, Clause, ConstraintModel, EnablingFamily, ModelSpecError, RateMode,
                     bond_table)


class NumericalError(ArithmeticError):
    """A quadratic form failed its symmetry or positivity checks."""


# ------------------------------------------------------------ auxiliary specs

@dataclass(frozen=True)
class AuxSpec:
    """Offset sets ``A^alpha``, one per axis, defining auxiliary dynamics."""

    dim: int
    sets: tuple[tuple[Site, ...], ...]

    def __post_init__(self):
        if len(self.sets) != self.dim:
            raise ModelSpecError("need one offset set per axis")
        ordered = []
        for a, A in enumerate(self.sets, start=1):
            pts = {tuple(int(c) for c in x) for x in A}
            if not pts:
                raise ModelSpecError(f"offset set for axis {a} is empty")
            if any(len(x) != self.dim for x in pts):
                raise ModelSpecError(f"offset set for axis {a} has wrong dimension")
            # decreasing alpha-coordinate, ties broken lexicographically
            ordered.append(tuple(sorted(pts, key=lambda x: (-x[a - 1], tuple(-c for c in x)))))
        object.__setattr__(self, "sets", tuple(ordered))

    def n(self, axis: int) -> int:
        return len(self.sets[axis - 1])

    def chain(self, axis: int) -> list[frozenset]:
        """``A_0, ..., A_n``: each step moves the next point one unit along ``axis``."""
        e = unit(self.dim, axis)
        pts = list(self.sets[axis - 1])
        cur = set(pts)
        out = [frozenset(cur)]
        for x in pts:
            cur.discard(x)
            cur.add(add(x, e))
            out.append(frozenset(cur))
        return out

    def clauses(self, axis: int) -> list[frozenset]:
        """Clause ``i``: ``(A_i - x_{i+1})`` without the origin."""
        o = origin(self.dim)
        chain = self.chain(axis)
        pts = self.sets[axis - 1]
        return [frozenset(sub(y, pts[i]) for y in chain[i]) - {o} for i in range(len(pts))]

    def to_dict(self) -> dict:
        return {"dimension": self.dim, "sets": [[list(x) for x in A] for A in self.sets]}

    @classmethod
    def from_dict(cls, d: dict) -> "AuxSpec":
        try:
            return cls(int(d["dimension"]), tuple(tuple(tuple(x) for x in A) for A in d["sets"]))
        except KeyError as exc:
            raise ModelSpecError(f"aux spec missing field {exc.args[0]!r}") from None


def build_aux_model(spec: AuxSpec, name: str = "aux") -> ConstraintModel:
    """Weighted-count model whose rate counts the empty clauses of the chain.

    A forward transition of clause ``i`` and the backward transition of
    clause ``i+1`` read the same sites, so each clause is counted once.
    """
    fams = []
    for a in range(1, spec.dim + 1):
        fams.append(EnablingFamily(a, tuple(Clause(tuple(sorted(c))) for c in spec.clauses(a))))
    try:
        return ConstraintModel(spec.dim, fams, RateMode.WEIGHTED_COUNT,
                               c_max=float(max(spec.n(a) for a in range(1, spec.dim + 1))),
                               name=name, aux=spec.to_dict())
    except ValueError as exc:
        raise ModelSpecError(f"aux spec: {exc}") from None


def bt1d_aux_spec() -> AuxSpec:
    return AuxSpec(1, (((1,), (2,)),))


def bt2d_aux_spec() -> AuxSpec:
    return AuxSpec(2, tuple((unit(2, a), tuple(2 * c for c in unit(2, a))) for a in (1, 2)))


def cluster_aux_spec(d: int, C: Iterable[Sequence[int]], l: int) -> AuxSpec:
    """``A^alpha = C u (l e_alpha + C)`` for a mobile cluster ``C``."""
    C = [tuple(c) for c in C]
    sets = []
    for a in range(1, d + 1):
        shift = tuple(l * c for c in unit(d, a))
        sets.append(tuple(set(C) | {add(c, shift) for c in C}))
    return AuxSpec(d, tuple(sets))


# ------------------------------------------------------------ state enumeration

def _enumerate(sites: Sequence[Site], q: float, budget: int):
    n = len(sites)
    if 2 ** n > budget:
        raise BudgetExceeded(f"dependency window of {n} sites exceeds budget {budget}")
    states = np.arange(2 ** n, dtype=np.int64)
    occ = np.zeros(states.shape, np.int64)
    for k in range(n):
        occ += (states >> k) & 1
    probs = (1.0 - q) ** occ * q ** (n - occ)
    return states, probs


def _sample(sites: Sequence[Site], q: float, samples: int, seed: int):
    rng = np.random.default_rng(seed)
    bits = rng.random((samples, len(sites))) >= q
    states = (bits.astype(np.int64) << np.arange(len(sites), dtype=np.int64)).sum(axis=1)
    return states, np.full(samples, 1.0 / samples)


def _mask(pos: dict, sites: Iterable[Site]) -> int | None:
    m = 0
    for s in sites:
        if s not in pos:
            return None
        m |= 1 << pos[s]
    return m


def _clause_rate(model: ConstraintModel, axis: int, base: Site, pos: dict, states: np.ndarray) -> np.ndarray:
    out = np.zeros(states.shape[0])
    for cl in model.clauses(axis):
        mask = _mask(pos, (add(base, o) for o in cl.offsets))
        sat = (states & mask) == 0
        if model.rate_mode is RateMode.INDICATOR_ANY:
            out = np.maximum(out, sat)
        else:
            out += cl.weight * sat
    return out


def _bit(states: np.ndarray, k: int) -> np.ndarray:
    return (states >> k) & 1


def _swap(states: np.ndarray, i: int, j: int) -> np.ndarray:
    d = _bit(states, i) ^ _bit(states, j)
    return states ^ ((d << i) | (d << j))


def mean_rate(m: ConstraintModel, axis: int, q: float) -> float:
    """``mu[c_{0,e_axis}]`` under the product measure with vacancy density ``q``."""
    sites = sorted({o for cl in m.clauses(axis) for o in cl.offsets})
    pos = {s: k for k, s in enumerate(sites)}
    states, probs = _enumerate(sites, q, 1 << 24)
    return float(probs @ _clause_rate(m, axis, origin(m.dim), pos, states))


# ------------------------------------------------------------ variational problems

@dataclass
class VariationalProblem:
    """``prefactor * (c.A.c + 2 b.c + c0)`` over coefficients ``c`` of a basis."""

    A: np.ndarray
    b: np.ndarray
    c0: float
    prefactor: float
    basis: list
    window: list
    provenance: dict = field(default_factory=dict)

    def value(self, coef: np.ndarray | None = None) -> float:
        if coef is None or len(coef) == 0:
            return self.prefactor * self.c0
        coef = np.asarray(coef, float)
        return self.prefactor * float(coef @ self.A @ coef + 2 * self.b @ coef + self.c0)

    def permuted(self, perm: Sequence[int]) -> "VariationalProblem":
        perm = np.asarray(perm)
        return VariationalProblem(self.A[np.ix_(perm, perm)], self.b[perm], self.c0, self.prefactor,
                                  [self.basis[i] for i in perm], self.window, dict(self.provenance))


def solve_qp(vp: VariationalProblem, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Minimise the form; null directions are handled with a pseudo-inverse."""
    n = len(vp.b)
    if n == 0:
        return np.zeros(0), vp.value()
    A = vp.A
    scale = max(1.0, float(np.abs(A).max()))
    if np.abs(A - A.T).max() > tol * scale:
        raise NumericalError(f"matrix not symmetric: max asymmetry {np.abs(A - A.T).max():.3e}")
    w, V = np.linalg.eigh((A + A.T) / 2)
    if w[0] < -1e-8 * scale:
        raise NumericalError(f"matrix not positive semidefinite: smallest eigenvalue {w[0]:.3e}")
    keep = w > 1e-11 * max(scale, abs(w[-1]))
    proj = V[:, keep].T @ vp.b
    coef = -V[:, keep] @ (proj / w[keep])
    return coef, vp.value(coef)


def _basis(window: Sequence[Site], max_order: int | None = None) -> list[tuple[Site, ...]]:
    window = sorted(set(tuple(s) for s in window))
    out = []
    top = len(window) if max_order is None else min(max_order, len(window))
    for r in range(1, top + 1):
        out.extend(combinations(window, r))
    return out


def _assemble(terms, basis, pos, states, probs, chunk: int = 1 << 13):
    """Accumulate ``A, b, c0`` from terms ``(rate(st), const(st), grad(st, S))``."""
    n = len(basis)
    A = np.zeros((n, n))
    b = np.zeros(n)
    c0 = 0.0
    for lo in range(0, len(states), chunk):
        st = states[lo:lo + chunk]
        pr = probs[lo:lo + chunk]
        for rate, const, grad in terms:
            w = pr * rate(st)
            live = w > 0
            if not live.any():
                continue
            stl, wl = st[live], w[live]
            a = const(stl)
            c0 += float(wl @ (a * a))
            if n:
                G = np.empty((len(stl), n))
                for k, S in enumerate(basis):
                    G[:, k] = grad(stl, S)
                Gw = G * wl[:, None]
                A += Gw.T @ G
                b += Gw.T @ a
    return A, b, c0


def _product(states: np.ndarray, mask: int) -> np.ndarray:
    return ((states & mask) == mask).astype(float)


def diffusion_window(m: ConstraintModel, window: Sequence[Site]) -> list[Site]:
    """Sites read by the restricted formula for the given function window."""
    d = m.dim
    window = [tuple(s) for s in window]
    o = origin(d)
    sites = set()
    for a in range(1, d + 1):
        e = unit(d, a)
        sites |= {o, e}
        sites |= {o_ for cl in m.clauses(a) for o_ in cl.offsets}
        for x in _translates(window, (o, e)):
            sites |= {add(s, x) for s in window}
    return sorted(sites)


def _translates(window, targets) -> set:
    """Shifts ``x`` with ``(window + x)`` meeting ``targets``."""
    return {sub(t, s) for s in window for t in targets}


def assemble_diffusion_qp(m: ConstraintModel, u: Sequence[float], window: Sequence[Site], q: float,
                          estimator: str = "exact", samples: int = 20000, seed: int = 0,
                          budget: int = 1 << 20, max_order: int | None = None) -> VariationalProblem:
    """Restricted variational problem for ``u.D u`` over functions of ``window``.

    For each axis the integrand is ``c_{0,e}(eta) (u_a (eta(0)-eta(e)) +
    sum_x grad_{0,e} tau_x f)^2``; only shifts ``x`` whose translated window
    meets ``{0, e}`` contribute.  Basis: products of occupations over
    non-empty subsets, so the constant direction is pinned out.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie strictly between 0 and 1")
    d = m.dim
    u = np.asarray(u, float)
    window = sorted({tuple(s) for s in window})
    sites = diffusion_window(m, window)
    pos = {s: k for k, s in enumerate(sites)}
    if estimator == "exact":
        states, probs = _enumerate(sites, q, budget)
    elif estimator in ("mc", "montecarlo", "MonteCarlo"):
        states, probs = _sample(sites, q, samples, seed)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    basis = _basis(window, max_order)
    o = origin(d)
    terms = []
    for a in range(1, d + 1):
        e = unit(d, a)
        k0, ke = pos[o], pos[e]
        shifts = sorted(_translates(window, (o, e)))
        rate = lambda st, a=a: _clause_rate(m, a, o, pos, st)
        const = lambda st, ua=u[a - 1], k0=k0, ke=ke: ua * (_bit(st, k0) - _bit(st, ke)).astype(float)

        def grad(st, S, k0=k0, ke=ke, shifts=shifts):
            sw = _swap(st, k0, ke)
            out = np.zeros(st.shape[0])
            for x in shifts:
                mask = _mask(pos, (add(s, x) for s in S))
                out += _product(sw, mask) - _product(st, mask)
            return out
        terms.append((rate, const, grad))
    A, b, c0 = _assemble(terms, basis, pos, states, probs)
    prov = {"estimator": "exact" if estimator == "exact" else "MonteCarlo", "window": [list(s) for s in window],
            "dependencyWindow": len(sites)}
    if estimator != "exact":
        prov.update(samples=samples, seed=seed)
    return VariationalProblem(A, b, c0, 1.0 / (2 * q * (1 - q)), basis, window, prov)


def diffusion_coefficient(m: ConstraintModel, u: Sequence[float], window: Sequence[Site], q: float,
                          **kw) -> float:
    """``u.D^(window) u``: the restricted minimum."""
    return solve_qp(assemble_diffusion_qp(m, u, window, q, **kw))[1]


def evaluate_direct(m: ConstraintModel, u: Sequence[float], window: Sequence[Site], q: float,
                    f: Callable[[dict], float]) -> float:
    """Brute-force evaluation of the integrand for an arbitrary local function.

    ``f`` receives a dict ``site -> occupation`` on ``window``.  Slow; an
    oracle for the assembled quadratic form.
    """
    d = m.dim
    window = sorted({tuple(s) for s in window})
    sites = diffusion_window(m, window)
    pos = {s: k for k, s in enumerate(sites)}
    states, probs = _enumerate(sites, q, 1 << 16)
    o = origin(d)
    total = 0.0
    for st, pr in zip(states.tolist(), probs.tolist()):
        read = lambda s, st=st: (st >> pos[s]) & 1
        for a in range(1, d + 1):
            e = unit(d, a)
            rate = m.rate_from(read, o, a)
            if rate == 0:
                continue
            swapped = st ^ (((read(o) ^ read(e)) << pos[o]) | ((read(o) ^ read(e)) << pos[e]))
            rs = lambda s: (swapped >> pos[s]) & 1
            g = u[a - 1] * (read(o) - read(e))
            for x in _translates(window, (o, e)) if window else ():
                g += f({s: rs(add(s, x)) for s in window}) - f({s: read(add(s, x)) for s in window})
            total += pr * rate * g * g
    return total / (2 * q * (1 - q))


def coefficients_for(vp: VariationalProblem, f: Callable[[dict], float]) -> np.ndarray:
    """Expand ``f`` (minus its constant part) in the product basis by Moebius inversion."""
    window = vp.window
    coef = np.zeros(len(vp.basis))
    for k, S in enumerate(vp.basis):
        total = 0.0
        for r in range(len(S) + 1):
            for T in combinations(S, r):
                val = f({s: (1 if s in T else 0) for s in window})
                total += (-1) ** (len(S) - r) * val
        coef[k] = total
    return coef


def monte_carlo_value(m: ConstraintModel, u, window, q, coef, samples: int = 20000, seed: int = 0):
    """Sample mean and standard error of the integrand for given coefficients."""
    vp = assemble_diffusion_qp(m, u, window, q)
    d = m.dim
    sites = diffusion_window(m, sorted({tuple(s) for s in window}))
    pos = {s: k for k, s in enumerate(sites)}
    states, _ = _sample(sites, q, samples, seed)
    o = origin(d)
    vals = np.zeros(samples)
    for a in range(1, d + 1):
        e = unit(d, a)
        k0, ke = pos[o], pos[e]
        g = u[a - 1] * (_bit(states, k0) - _bit(states, ke)).astype(float)
        sw = _swap(states, k0, ke)
        for c, S in zip(coef, vp.basis):
            if c == 0:
                continue
            for x in _translates(vp.window, (o, e)):
                mask = _mask(pos, (add(s, x) for s in S))
                g += c * (_product(sw, mask) - _product(states, mask))
        vals += _clause_rate(m, a, o, pos, states) * g * g
    vals *= vp.prefactor
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(samples))


# ------------------------------------------------------------ auxiliary dynamics

_TABLES: dict = {}


def total_current(c: Configuration, aux: ConstraintModel) -> np.ndarray:
    """``sum_{x~y} c_{x,y} (x-y)(eta(x)-eta(y))`` on a torus, in integers."""
    dom = c.domain
    if not dom.periodic:
        raise ValueError("total current is defined on a periodic domain")
    if aux.rate_mode is RateMode.WEIGHTED_COUNT and any(cl.weight != int(cl.weight)
                                                       for a in range(1, aux.dim + 1) for cl in aux.clauses(a)):
        raise ValueError("integer current needs integer clause weights")
    key = (aux.digest(), dom)
    table = _TABLES.get(key)
    if table is None:
        table = _TABLES[key] = bond_table(aux, dom)
    bits = c.bits.astype(np.int64)
    rates = np.rint(table.all_rates(bits)).astype(np.int64)
    diff = bits[table.i] - bits[table.j]
    J = np.zeros(dom.dim, np.int64)
    # x - y = -e_a for the bond (x, x + e_a)
    np.add.at(J, table.axis - 1, -rates * diff)
    return J


def aux_diffusion_closed_form(aux: ConstraintModel, q: float, u: Sequence[float]) -> float:
    """``sum_a (u.e_a)^2 mu[c_{0,e_a}]``: constants are optimal for zero-current rates."""
    return float(sum(u[a - 1] ** 2 * mean_rate(aux, a, q) for a in range(1, aux.dim + 1)))


def comparison_constant(reports: Sequence, d: int, c_max: float) -> float:
    """``d T^2 2^Loss c_max |Lambda|`` for validated auxiliary move reports.

    ``Lambda`` is the set of bonds (by lower endpoint) any of the moves use.
    """
    if not reports or not all(r.valid for r in reports):
        raise ValueError("comparison constant needs validated move reports")
    T = max(r.T for r in reports)
    loss = max(r.loss for r in reports)
    bases = frozenset().union(*(r.bases for r in reports))
    return d * T ** 2 * 2.0 ** loss * c_max * len(bases)
