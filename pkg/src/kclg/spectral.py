"""Exact finite-system analysis: generators, relaxation times, ergodic components."""
from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from math import comb
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.csgraph as csgraph
import scipy.sparse.linalg as spla

from .lattice import BoundaryMode, Configuration, Domain, Site, add
from .models import BondTable, BudgetExceeded, ConstraintModel, bond_table

DEFAULT_BUDGET = 1 << 22
DENSE_LIMIT = 2048


@dataclass
class StateSpace:
    """Configurations encoded as integers, bit ``k`` set when flat site ``k`` is occupied."""

    domain: Domain
    states: np.ndarray
    kind: str
    _sorted: np.ndarray = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._order = np.argsort(self.states, kind="stable")
        self._sorted = self.states[self._order]

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def full(cls, domain: Domain, budget: int = DEFAULT_BUDGET) -> "StateSpace":
        n = domain.size
        if 2 ** n > budget:
            raise BudgetExceeded(f"2^{n} states exceed budget {budget}")
        return cls(domain, np.arange(2 ** n, dtype=np.int64), "full")

    @classmethod
    def sector(cls, domain: Domain, k: int, budget: int = DEFAULT_BUDGET) -> "StateSpace":
        """All configurations with ``k`` vacancies, in colex order of vacancy positions."""
        n = domain.size
        if not 0 <= k <= n:
            raise ValueError(f"k={k} out of range for {n} sites")
        if comb(n, k) > budget:
            raise BudgetExceeded(f"C({n},{k}) states exceed budget {budget}")
        full = (1 << n) - 1
        vacs = sorted(combinations(range(n), k), key=lambda c: tuple(reversed(c)))
        states = np.array([full ^ sum(1 << v for v in c) for c in vacs], dtype=np.int64).reshape(-1)
        return cls(domain, states, "sector")

    def index(self, states: np.ndarray) -> np.ndarray:
        """Indices of encoded states; ``-1`` for states not in the space."""
        states = np.asarray(states, np.int64)
        pos = np.searchsorted(self._sorted, states)
        pos = np.clip(pos, 0, len(self._sorted) - 1)
        hit = self._sorted[pos] == states
        return np.where(hit, self._order[pos], -1)

    def encode(self, c: Configuration) -> int:
        return int(sum(int(b) << k for k, b in enumerate(c.bits)))

    def configuration(self, i: int) -> Configuration:
        s = int(self.states[i])
        return Configuration(self.domain, [(s >> k) & 1 for k in range(self.domain.size)])

    def vacancy_sites(self, i: int) -> list[Site]:
        s = int(self.states[i])
        return [self.domain.site(k) for k in range(self.domain.size) if not (s >> k) & 1]


@dataclass
class RateMatrix:
    space: StateSpace
    Q: sp.csr_matrix
    weights: np.ndarray
    setting: str
    params: dict = field(default_factory=dict)

    def detailed_balance_error(self) -> float:
        F = sp.diags(self.weights) @ self.Q
        F = F - sp.diags(F.diagonal())
        diff = abs(F - F.T)
        scale = max(float(abs(F).max()), 1e-300)
        return float(diff.max()) / scale if diff.nnz else 0.0

    def row_sum_error(self) -> float:
        return float(np.abs(np.asarray(self.Q.sum(axis=1))).max())

    def components(self) -> tuple[int, np.ndarray]:
        A = self.Q - sp.diags(self.Q.diagonal())
        return csgraph.connected_components(A, directed=True, connection="strong")

    def scaled(self, s: float) -> "RateMatrix":
        return RateMatrix(self.space, self.Q * s, self.weights, self.setting, dict(self.params, scale=s))

    def triplets(self) -> str:
        """Coordinate-format dump ``row col value`` of the off-diagonal rates."""
        coo = self.Q.tocoo()
        buf = io.StringIO()
        buf.write(f"# setting={self.setting} states={len(self.space)} {self.params}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            if i != j:
                buf.write(f"{i} {j} {v!r}\n")
        return buf.getvalue()


def _exchange_transitions(table: BondTable, states: np.ndarray):
    rows, targets, rates = [], [], []
    for b in range(len(table)):
        i, j = int(table.i[b]), int(table.j[b])
        diff = ((states >> i) ^ (states >> j)) & 1
        live = np.flatnonzero(diff)
        if not len(live):
            continue
        r = table.rates_for_states(states[live], b)
        ok = r > 0
        live, r = live[ok], r[ok]
        rows.append(live)
        targets.append(states[live] ^ ((1 << i) | (1 << j)))
        rates.append(r)
    return rows, targets, rates


def _assemble(space: StateSpace, rows, targets, rates) -> sp.csr_matrix:
    n = len(space)
    if rows:
        r = np.concatenate(rows)
        t = space.index(np.concatenate(targets))
        v = np.concatenate(rates)
        if (t < 0).any():
            raise RuntimeError("transition leaves the state space")
    else:
        r = t = np.zeros(0, np.int64)
        v = np.zeros(0)
    off = sp.csr_matrix((v, (r, t)), shape=(n, n))
    off.sum_duplicates()
    diag = -np.asarray(off.sum(axis=1)).ravel()
    return (off + sp.diags(diag)).tocsr()


def build_reservoir_generator(m: ConstraintModel, L: int, q: float, budget: int = DEFAULT_BUDGET) -> RateMatrix:
    """Exchanges with empty boundary conditions plus flips at boundary sites."""
    if not 0 < q < 1:
        raise ValueError("q must lie strictly between 0 and 1")
    dom = Domain.box(L, m.dim, BoundaryMode.EMPTY)
    space = StateSpace.full(dom, budget)
    states = space.states
    rows, targets, rates = _exchange_transitions(bond_table(m, dom), states)
    for x in dom.boundary_sites():
        k = dom.index(x)
        occ = (states >> k) & 1
        rows.append(np.arange(len(states)))
        targets.append(states ^ (1 << k))
        rates.append(np.where(occ == 1, q, 1 - q))
    Q = _assemble(space, rows, targets, rates)
    nvac = dom.size - np.array([bin(int(s)).count("1") for s in states])
    w = q ** nvac * (1 - q) ** (dom.size - nvac)
    return RateMatrix(space, Q, w / w.sum(), "reservoir", {"L": L, "q": q, "model": m.digest()})


def build_closed_generator(m: ConstraintModel, L: int, k: int, boundary: BoundaryMode | str = BoundaryMode.OCCUPIED,
                           budget: int = DEFAULT_BUDGET) -> RateMatrix:
    dom = Domain.box(L, m.dim, boundary)
    space = StateSpace.sector(dom, k, budget)
    Q = _assemble(space, *_exchange_transitions(bond_table(m, dom), space.states))
    w = np.full(len(space), 1.0 / len(space))
    return RateMatrix(space, Q, w, "closed" if not dom.periodic else "torus",
                      {"L": L, "k": k, "boundary": dom.boundary.value, "model": m.digest()})


def build_torus_generator(m: ConstraintModel, L: int, k: int, budget: int = DEFAULT_BUDGET) -> RateMatrix:
    return build_closed_generator(m, L, k, BoundaryMode.PERIODIC, budget)


def _symmetrized(R: RateMatrix, idx: np.ndarray) -> sp.csr_matrix:
    Q = R.Q[idx][:, idx]
    s = np.sqrt(R.weights[idx])
    S = sp.diags(s) @ (-Q) @ sp.diags(1.0 / s)
    return ((S + S.T) / 2).tocsr()


def spectral_gap(R: RateMatrix, restriction: np.ndarray | None = None, tol: float = 1e-10) -> float:
    """Smallest nonzero eigenvalue of ``-Q`` on a connected set of states."""
    idx = np.arange(len(R.space)) if restriction is None else np.asarray(restriction)
    if len(idx) <= 1:
        return float("inf")
    S = _symmetrized(R, idx)
    if len(idx) <= DENSE_LIMIT:
        w = scipy.linalg.eigh(S.toarray(), eigvals_only=True)
    else:
        scale = float(abs(S).max())
        w = spla.eigsh(S.tocsc(), k=3, sigma=-1e-3 * scale, which="LM", return_eigenvectors=False, tol=1e-13)
    w = np.sort(w)
    scale = max(abs(w).max(), 1.0)
    nonzero = w[w > tol * scale]
    return float(nonzero[0]) if len(nonzero) else float("inf")


def relaxation_time(R: RateMatrix, restriction: np.ndarray | None = None) -> float:
    """``1/gap``; infinite when the (restricted) state space is disconnected."""
    idx = np.arange(len(R.space)) if restriction is None else np.asarray(restriction)
    if len(idx) == 1:
        return 0.0
    sub = R.Q[idx][:, idx]
    ncomp, _ = csgraph.connected_components(sub - sp.diags(sub.diagonal()), directed=True, connection="strong")
    if ncomp > 1:
        return float("inf")
    return 1.0 / spectral_gap(R, idx)


@dataclass
class ComponentInfo:
    size: int
    members: np.ndarray
    has_cluster: bool
    relaxation_time: float | None = None


@dataclass
class ErgodicReport:
    space: StateSpace
    labels: np.ndarray
    components: list[ComponentInfo]
    ergodic: np.ndarray
    static: np.ndarray

    @property
    def match(self) -> bool:
        return bool(np.array_equal(self.ergodic, self.static))

    @property
    def sizes(self) -> list[int]:
        return sorted(c.size for c in self.components)

    def mismatches(self) -> list[list[Site]]:
        bad = np.flatnonzero(self.ergodic != self.static)
        return [self.space.vacancy_sites(i) for i in bad]

    def to_json(self) -> dict:
        return {"states": len(self.space), "components": len(self.components), "sizes": self.sizes,
                "ergodicCount": int(self.ergodic.sum()), "staticCount": int(self.static.sum()),
                "match": self.match}


def cluster_masks(domain: Domain, clusters: Iterable[Iterable[Sequence[int]]]) -> list[int]:
    """Bit masks of every translate of every cluster lying inside the box."""
    out = set()
    sites = list(domain.sites())
    for C in clusters:
        C = [tuple(c) for c in C]
        for x in sites:
            shift = tuple(a - b for a, b in zip(x, C[0]))
            idx = [domain.resolve(add(c, shift)) for c in C]
            if domain.periodic or all(domain.contains(add(c, shift)) for c in C):
                out.add(sum(1 << i for i in idx))
    return sorted(out)


def contains_empty_cluster(states: np.ndarray, masks: Sequence[int]) -> np.ndarray:
    out = np.zeros(len(states), bool)
    for mk in masks:
        out |= (states & mk) == 0
    return out


def ergodic_components(m: ConstraintModel, L: int, k: int, clusters, boundary=BoundaryMode.OCCUPIED,
                       budget: int = DEFAULT_BUDGET, with_times: bool = False) -> ErgodicReport:
    """Partition a vacancy sector into components and compare with the static test."""
    R = build_closed_generator(m, L, k, boundary, budget)
    ncomp, labels = R.components()
    static = contains_empty_cluster(R.space.states, cluster_masks(R.space.domain, clusters))
    comps = []
    ergodic = np.zeros(len(R.space), bool)
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        flag = bool(static[members].any())
        if flag:
            ergodic[members] = True
        tau = relaxation_time(R, members) if with_times else None
        comps.append(ComponentInfo(len(members), members, flag, tau))
    return ErgodicReport(R.space, labels, comps, ergodic, static)


def reaches_cluster(m: ConstraintModel, c: Configuration, clusters, budget: int = 1 << 21) -> tuple[bool | None, int]:
    """Breadth-first search from ``c`` for a configuration with an empty cluster translate.

    States are vacancy sets, so boxes of any size work.  Returns
    ``(found, explored)``; ``found`` is ``None`` when the budget ran out.
    """
    dom = c.domain
    table = bond_table(m, dom)
    targets = [frozenset(k for k in range(dom.size) if (mk >> k) & 1) for mk in cluster_masks(dom, clusters)]
    incident: dict[int, list[tuple[int, int]]] = {}
    for b in range(len(table)):
        i, j = int(table.i[b]), int(table.j[b])
        incident.setdefault(i, []).append((b, j))
        incident.setdefault(j, []).append((b, i))

    def rate(vac, b):
        for idx, _ in table.clauses[b]:
            if all(k in vac for k in idx):
                return True
        return False

    start = frozenset(int(k) for k in np.flatnonzero(c.bits == 0))
    seen = {start}
    queue = deque([start])
    while queue:
        vac = queue.popleft()
        if any(t <= vac for t in targets):
            return True, len(seen)
        for v in vac:
            for b, w in incident.get(v, ()):
                if w in vac or not rate(vac, b):
                    continue
                nxt = (vac - {v}) | {w}
                if nxt not in seen:
                    if len(seen) >= budget:
                        return None, len(seen)
                    seen.add(nxt)
                    queue.append(nxt)
    return False, len(seen)


def is_blocked(c: Configuration, m: ConstraintModel) -> bool:
    """True when every bond joining a particle and a vacancy has rate 0."""
    table = bond_table(m, c.domain)
    bits = c.bits
    for b in range(len(table)):
        if bits[table.i[b]] != bits[table.j[b]] and table.rate(bits, b) > 0:
            return False
    return True


def box_census(c: Configuration, clusters, lam: int) -> tuple[int, int]:
    """Counts of pregood boxes (at least ``|C|`` vacancies) and good boxes (an empty translate inside)."""
    dom = c.domain
    if any(n % lam for n in dom.extent):
        raise ValueError(f"box size {lam} must divide the extent {dom.extent}")
    clusters = [[tuple(x) for x in C] for C in clusters]
    N = min(len(C) for C in clusters)
    bits = c.bits.reshape(dom.extent)
    pregood = good = 0
    from itertools import product
    for corner in product(*(range(0, n, lam) for n in dom.extent)):
        sl = tuple(slice(a, a + lam) for a in corner)
        block = bits[sl]
        if int((block == 0).sum()) >= N:
            pregood += 1
        sub = Domain((lam,) * dom.dim, BoundaryMode.OCCUPIED)
        st = int(sum(int(b) << k for k, b in enumerate(block.reshape(-1))))
        if any(st & mk == 0 for mk in cluster_masks(sub, clusters)):
            good += 1
    return pregood, good


def gap_table(rows: Iterable[dict]) -> str:
    """CSV with columns ``L, q_or_k, component, size, gap, relaxationTime``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L", "q_or_k", "component", "size", "gap", "relaxationTime"])
    for r in rows:
        tau = r["relaxationTime"]
        gap = 0.0 if tau == float("inf") else (float("inf") if tau == 0 else 1.0 / tau)
        w.writerow([r["L"], r["q_or_k"], r.get("component", 0), r["size"], repr(gap), repr(tau)])
    return buf.getvalue()
