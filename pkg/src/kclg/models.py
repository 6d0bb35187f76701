"""Clause-based constraint models and their exhaustive axiom checker."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .lattice import Configuration, Direction, Domain, Site, add, origin, unit


class BudgetExceeded(RuntimeError):
    """An exhaustive enumeration would exceed its configured budget."""


class RateMode(str, Enum):
    INDICATOR_ANY = "indicatorAny"
    WEIGHTED_COUNT = "weightedCount"


@dataclass(frozen=True)
class Clause:
    offsets: tuple[Site, ...]
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(sorted({tuple(int(c) for c in o) for o in self.offsets})))
        if not self.weight > 0:
            raise ValueError(f"clause weight must be positive, got {self.weight}")


@dataclass(frozen=True)
class EnablingFamily:
    """Clauses for the bonds ``(x, x + e_axis)``, offsets relative to ``x``."""

    axis: int
    clauses: tuple[Clause, ...]

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(self.clauses))


class ConstraintModel:
    """Translation-invariant kinetic constraint.

    Parameters
    ----------
    dim : int
        Lattice dimension.
    families : sequence of EnablingFamily
        One per axis, in axis order.  The rate of bond ``(x, x+e_a)`` is read
        relative to ``x``; the bond ``(x, x-e_a)`` is the same bond seen from
        ``x - e_a``.
    rate_mode : RateMode
        ``indicatorAny``: 1 if some clause is fully empty.  ``weightedCount``:
        sum of the weights of fully empty clauses.
    c_max : float, optional
        Declared rate ceiling; defaults to the largest attainable rate.
    """

    def __init__(self, dim: int, families: Sequence[EnablingFamily], rate_mode: RateMode | str = RateMode.INDICATOR_ANY,
                 c_max: float | None = None, name: str = "model", aux: dict | None = None):
        self.dim = int(dim)
        self.aux = aux
        self.families = tuple(families)
        self.rate_mode = RateMode(rate_mode)
        self.name = name
        if [f.axis for f in self.families] != list(range(1, self.dim + 1)):
            raise ValueError("need exactly one enabling family per axis, in axis order")
        for fam in self.families:
            e = unit(self.dim, fam.axis)
            for cl in fam.clauses:
                for o in cl.offsets:
                    if len(o) != self.dim:
                        raise ValueError(f"offset {o} has wrong dimension")
                    if o == origin(self.dim) or o == e:
                        raise ValueError(f"clause offset {o} touches the bond itself (axis {fam.axis})")
        if c_max is None:
            c_max = max((self._max_rate(f) for f in self.families), default=1.0)
        self.c_max = float(c_max)

    def _max_rate(self, fam: EnablingFamily) -> float:
        if not fam.clauses:
            return 0.0
        if self.rate_mode is RateMode.INDICATOR_ANY:
            return 1.0
        return float(sum(c.weight for c in fam.clauses))

    @property
    def R(self) -> int:
        r = 1
        for fam in self.families:
            for cl in fam.clauses:
                for o in cl.offsets:
                    r = max(r, max(abs(c) for c in o))
        return r

    def clauses(self, axis: int) -> tuple[Clause, ...]:
        return self.families[axis - 1].clauses

    def bond(self, x: Sequence[int], direction: Direction) -> tuple[Site, int]:
        """Base site and axis of the bond ``(x, x + direction)``."""
        x = tuple(x)
        if direction.positive:
            return x, direction.axis
        return add(x, direction.vector(self.dim)), direction.axis

    def rate_from(self, read: Callable[[Site], int], x: Sequence[int], axis: int) -> float:
        """Rate of bond ``(x, x+e_axis)`` given an occupancy reader."""
        total = 0.0
        for cl in self.families[axis - 1].clauses:
            if all(read(add(x, o)) == 0 for o in cl.offsets):
                if self.rate_mode is RateMode.INDICATOR_ANY:
                    return 1.0
                total += cl.weight
        return total

    def edge_rate(self, c: Configuration, x: Sequence[int], direction: Direction) -> float:
        base, axis = self.bond(x, direction)
        return self.rate_from(c.read, base, axis)

    def to_dict(self) -> dict:
        return {
            "schema": "kclg-model/1",
            "name": self.name,
            "dimension": self.dim,
            "range": self.R,
            "cMax": self.c_max,
            "rateMode": self.rate_mode.value,
            "families": [
                {"axis": f.axis,
                 "clauses": [{"offsets": [list(o) for o in c.offsets], "weight": c.weight} for c in f.clauses]}
                for f in self.families
            ],
            **({"aux": self.aux} if self.aux is not None else {}),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintModel":
        try:
            if data.get("schema", "kclg-model/1") != "kclg-model/1":
                raise ModelSpecError(f"schema: unsupported {data['schema']!r}")
            dim = int(data["dimension"])
            fams = []
            for k, f in enumerate(data["families"]):
                clauses = tuple(Clause(tuple(tuple(o) for o in c["offsets"]), float(c.get("weight", 1.0)))
                                for c in f["clauses"])
                fams.append(EnablingFamily(int(f.get("axis", k + 1)), clauses))
            model = cls(dim, fams, data.get("rateMode", "indicatorAny"), data.get("cMax"), data.get("name", "model"),
                        data.get("aux"))
        except KeyError as exc:
            raise ModelSpecError(f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ModelSpecError):
                raise
            raise ModelSpecError(str(exc)) from None
        if "range" in data and int(data["range"]) != model.R:
            raise ModelSpecError(f"range: declared {data['range']} but clauses reach {model.R}")
        return model

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        body = self.to_dict()
        body.pop("name")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def __eq__(self, other) -> bool:
        return isinstance(other, ConstraintModel) and self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(self.digest())

    def __repr__(self) -> str:
        return f"ConstraintModel({self.name!r}, d={self.dim}, R={self.R}, mode={self.rate_mode.value})"


class ModelSpecError(ValueError):
    """Malformed model specification."""


def edge_rate(m: ConstraintModel, c: Configuration, x: Sequence[int], direction: Direction) -> float:
    return m.edge_rate(c, x, direction)


def reservoir_rate(c: Configuration, x: Sequence[int], q: float) -> float:
    """Flip rate ``q eta(x) + (1-q)(1-eta(x))`` at a boundary site."""
    if not c.domain.is_boundary(x):
        raise ValueError(f"site {tuple(x)} is not on the boundary of {c.domain.extent}")
    eta = c.read(x)
    return q * eta + (1.0 - q) * (1 - eta)


def loads_model(text: str) -> ConstraintModel:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSpecError(f"not valid JSON: {exc}") from None
    return ConstraintModel.from_dict(data)


def _simple_family(d: int, axis: int, clause_offsets: Iterable[Iterable[Site]], weight: float = 1.0):
    return EnablingFamily(axis, tuple(Clause(tuple(offs), weight) for offs in clause_offsets))


def bt1d() -> ConstraintModel:
    """Exchange across (x, x+1) allowed if site x-1 or site x+2 is empty."""
    return ConstraintModel(1, [_simple_family(1, 1, [[(-1,)], [(2,)]])], RateMode.INDICATOR_ANY, name="bt1d")


def bt2d() -> ConstraintModel:
    fams = []
    for a in (1, 2):
        fams.append(_simple_family(2, a, [[unit(2, a, -1)], [tuple(2 * c for c in unit(2, a))]]))
    return ConstraintModel(2, fams, RateMode.INDICATOR_ANY, name="bt2d")


def glt1d() -> ConstraintModel:
    """Like bt1d but the rate counts the empty neighbours, so it reaches 2."""
    return ConstraintModel(1, [_simple_family(1, 1, [[(-1,)], [(2,)]])], RateMode.WEIGHTED_COUNT, c_max=2.0,
                           name="glt1d")


def sep(d: int = 1) -> ConstraintModel:
    """Unconstrained exclusion: a single empty clause, rate 1 on every bond."""
    return ConstraintModel(d, [EnablingFamily(a, (Clause(()),)) for a in range(1, d + 1)], name=f"sep{d}d")


def get_model(name_or_path: str) -> ConstraintModel:
    """Look up a registered model by name, or load a model spec file."""
    from . import transport

    registry = {
        "bt1d": bt1d,
        "bt2d": bt2d,
        "glt1d": glt1d,
        "sep1d": lambda: sep(1),
        "sep2d": lambda: sep(2),
        "bt1d-aux": lambda: transport.build_aux_model(transport.bt1d_aux_spec()),
        "bt2d-aux": lambda: transport.build_aux_model(transport.bt2d_aux_spec()),
        "bt1d-aux-cluster": lambda: transport.build_aux_model(transport.cluster_aux_spec(1, [(1,), (2,)], 3)),
    }
    if name_or_path in registry:
        return registry[name_or_path]()
    path = Path(name_or_path)
    if not path.exists():
        raise ModelSpecError(f"unknown model {name_or_path!r} (neither a registered name nor a file)")
    return loads_model(path.read_text())


# ---------------------------------------------------------------- axioms

@dataclass
class AxiomResult:
    name: str
    passed: bool
    structural: bool = False
    witness: dict | None = None
    detail: str = ""


@dataclass
class AxiomReport:
    model: str
    results: list[AxiomResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def __getitem__(self, name: str) -> AxiomResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"model": self.model, "passed": self.passed,
                "axioms": [r.__dict__ for r in self.results]}


def _rates_over_window(m: ConstraintModel, axis: int, support: list[Site], states: np.ndarray) -> np.ndarray:
    """Rates of bond (0, e_axis) for every occupancy state on ``support`` (bit j = site j)."""
    pos = {s: j for j, s in enumerate(support)}
    rate = np.zeros(states.shape[0], dtype=float)
    for cl in m.clauses(axis):
        mask = 0
        for o in cl.offsets:
            mask |= 1 << pos[o]
        sat = (states & mask) == 0
        if m.rate_mode is RateMode.INDICATOR_ANY:
            rate = np.maximum(rate, sat.astype(float))
        else:
            rate = rate + cl.weight * sat
    return rate


def _clause_lattice_rates(m: ConstraintModel, axis: int, budget: int) -> np.ndarray:
    """Rates of every attainable set of satisfied clauses.

    The satisfied clauses of any window state are exactly those of the state
    whose vacancies are the union of them, so enumerating unions of clauses
    visits every attainable rate.
    """
    clauses = m.clauses(axis)
    if 2 ** len(clauses) > budget:
        raise BudgetExceeded(f"axis {axis}: {len(clauses)} clauses exceed budget {budget}")
    sets = [frozenset(c.offsets) for c in clauses]
    rates = []
    for mask in range(2 ** len(clauses)):
        vac = frozenset().union(*(sets[k] for k in range(len(sets)) if mask >> k & 1))
        sat = [k for k in range(len(sets)) if sets[k] <= vac]
        if m.rate_mode is RateMode.INDICATOR_ANY:
            rates.append(1.0 if sat else 0.0)
        else:
            rates.append(float(sum(clauses[k].weight for k in sat)))
    return np.array(rates)


def verify_axioms(m: ConstraintModel, budget: int = 1 << 22) -> AxiomReport:
    """Exhaustively check the rate axioms on each bond's dependency window.

    The window is the union of the clause offsets together with the two bond
    sites; sites further away cannot influence the rate.  When that window is
    too large, the attainable rates are enumerated over unions of clauses
    instead, and independence and monotonicity are taken from the clause
    structure (they hold for any clause model by construction).
    """
    report = AxiomReport(m.name)
    d = m.dim

    def witness(axis, support, state):
        return {"axis": axis, "occupancy": {str(s): int((int(state) >> j) & 1) for j, s in enumerate(support)}}

    checks = {"range": None, "exchange_independence": None, "nondegenerate": None, "monotone": None}
    methods = []
    for fam in m.families:
        axis = fam.axis
        e = unit(d, axis)
        sites = {origin(d), e}
        for cl in fam.clauses:
            sites.update(cl.offsets)
        support = sorted(sites)

        if 2 ** len(support) > budget:
            methods.append("clause-lattice")
            rates = _clause_lattice_rates(m, axis, budget)
            bad = ~((rates == 0) | ((rates >= 1 - 1e-12) & (rates <= m.c_max + 1e-12)))
            if bad.any() and checks["range"] is None:
                k = int(np.flatnonzero(bad)[0])
                checks["range"] = ({"axis": axis, "clause_mask": k}, f"rate {rates[k]} not in {{0}} u [1, {m.c_max}]")
            if not (rates.max() >= 1 and (rates == 0).any()) and checks["nondegenerate"] is None:
                checks["nondegenerate"] = ({"axis": axis}, f"rates on axis {axis} span [{rates.min()}, {rates.max()}]")
            continue

        methods.append("window")
        states = np.arange(2 ** len(support), dtype=np.int64)
        rates = _rates_over_window(m, axis, support, states)
        pos = {s: j for j, s in enumerate(support)}

        bad = ~((rates == 0) | ((rates >= 1 - 1e-12) & (rates <= m.c_max + 1e-12)))
        if bad.any() and checks["range"] is None:
            s = int(np.flatnonzero(bad)[0])
            checks["range"] = (witness(axis, support, s), f"rate {rates[s]} not in {{0}} u [1, {m.c_max}]")

        for endpoint in (origin(d), e):
            flipped = states ^ (1 << pos[endpoint])
            diff = rates != rates[flipped]
            if diff.any() and checks["exchange_independence"] is None:
                s = int(np.flatnonzero(diff)[0])
                checks["exchange_independence"] = (witness(axis, support, s), f"rate depends on site {endpoint}")

        if not (rates.max() >= 1 and (rates == 0).any()) and checks["nondegenerate"] is None:
            checks["nondegenerate"] = ({"axis": axis}, f"rates on axis {axis} span [{rates.min()}, {rates.max()}]")

        for j in range(len(support)):
            occupied = (states >> j) & 1 == 1
            emptied = states & ~(1 << j)
            drop = occupied & (rates[emptied] < rates - 1e-12)
            if drop.any() and checks["monotone"] is None:
                s = int(np.flatnonzero(drop)[0])
                checks["monotone"] = (witness(axis, support, s), f"emptying {support[j]} lowers the rate")

    method = "+".join(sorted(set(methods)))
    labels = [("range", "rates in {0} u [1, cMax]"), ("exchange_independence", "independent of the bond sites"),
              ("nondegenerate", "some window enables, some blocks"), ("monotone", "emptying never slows")]
    for key, detail in labels:
        failure = checks[key]
        structural = key in ("exchange_independence", "monotone") and method == "clause-lattice"
        if failure is None:
            report.results.append(AxiomResult(key, True, structural=structural, detail=f"{detail} [{method}]"))
        else:
            report.results.append(AxiomResult(key, False, witness=failure[0], detail=failure[1]))
    report.results.append(AxiomResult("homogeneous", True, structural=True,
                                      detail="clauses are offsets, hence translation invariant"))
    report.results.append(AxiomResult("finite_range", True, structural=True, detail=f"R = {m.R}"))
    return report


# ------------------------------------------------------------ compiled bonds

@dataclass
class BondTable:
    """Bonds of a finite domain with clauses resolved to flat site indices.

    Clauses reaching outside a non-periodic box are simplified with the
    boundary fill: dropped when the fill is occupied, shortened when empty.
    """

    domain: Domain
    i: np.ndarray
    j: np.ndarray
    axis: np.ndarray
    clauses: list[list[tuple[tuple[int, ...], float]]]
    indicator: bool

    def __len__(self) -> int:
        return len(self.i)

    def rate(self, bits: np.ndarray, b: int) -> float:
        total = 0.0
        for idx, w in self.clauses[b]:
            if all(bits[k] == 0 for k in idx):
                if self.indicator:
                    return 1.0
                total += w
        return total

    def rates_for_states(self, states: np.ndarray, b: int) -> np.ndarray:
        """Vectorised bond rate over integer-encoded states (bit k = site k)."""
        out = np.zeros(states.shape[0], float)
        for idx, w in self.clauses[b]:
            mask = 0
            for k in idx:
                mask |= 1 << k
            sat = (states & mask) == 0
            if self.indicator:
                out = np.maximum(out, sat)
            else:
                out += w * sat
        return out

    def all_rates(self, bits: np.ndarray) -> np.ndarray:
        """Rates of every bond in one configuration, vectorised over clauses."""
        groups = self.__dict__.get("_groups")
        if groups is None:
            by_len: dict[int, tuple[list, list, list]] = {}
            for b, cls_ in enumerate(self.clauses):
                for idx, w in cls_:
                    g = by_len.setdefault(len(idx), ([], [], []))
                    g[0].append(b)
                    g[1].append(idx)
                    g[2].append(w)
            groups = [(np.array(bs), np.array(ix, np.int64).reshape(len(bs), n), np.array(ws))
                      for n, (bs, ix, ws) in by_len.items()]
            self.__dict__["_groups"] = groups
        out = np.zeros(len(self.i))
        bits = np.asarray(bits)
        for bs, ix, ws in groups:
            sat = ~bits[ix].any(axis=1) if ix.shape[1] else np.ones(len(bs), bool)
            if self.indicator:
                np.maximum.at(out, bs, sat.astype(float))
            else:
                np.add.at(out, bs, ws * sat)
        return out

    def reading_sites(self, b: int) -> set[int]:
        s = {int(self.i[b]), int(self.j[b])}
        for idx, _ in self.clauses[b]:
            s.update(idx)
        return s


def bond_table(m: ConstraintModel, domain: Domain) -> BondTable:
    if m.dim != domain.dim:
        raise ValueError("model and domain dimensions differ")
    fill = domain.fill
    I, J, A, CL = [], [], [], []
    sites = list(domain.sites())
    for i, j, a in domain.edges():
        x = sites[i]
        resolved = []
        for cl in m.clauses(a):
            idx, dead = [], False
            for o in cl.offsets:
                k = domain.resolve(add(x, o))
                if k is None:
                    if fill == 1:
                        dead = True
                        break
                    continue
                idx.append(k)
            if not dead:
                resolved.append((tuple(sorted(set(idx))), cl.weight))
        I.append(i)
        J.append(j)
        A.append(a)
        CL.append(resolved)
    return BondTable(domain, np.array(I, np.int64), np.array(J, np.int64), np.array(A, np.int64), CL,
                     m.rate_mode is RateMode.INDICATOR_ANY)
