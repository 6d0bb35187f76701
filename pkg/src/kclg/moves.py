"""Multistep moves: programs of constrained exchanges and their validation.

A move is a list of exchanges (and, next to a reservoir, boundary flips)
applied to every configuration of its domain.  Deterministic moves have one
unguarded branch; guarded moves pick the first branch whose guard matches.

Permutations follow the composition convention ``p.compose(q) = p o q``; the
permutation of a step list ``s_0, ..., s_{T-1}`` is
``(s_{T-1}) ... (s_1)(s_0)``, the first step acting first.
"""
from __future__ import annotations

import json
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .lattice import Direction, FinitePermutation, Site, add, neg, origin, scale, sub, unit
from .models import BudgetExceeded, ConstraintModel, bt1d, bt2d


class MoveError(ValueError):
    """Invalid move construction or failed validation."""

    def __init__(self, message: str, witness=None):
        super().__init__(message)
        self.witness = witness


class StepKind(str, Enum):
    EXCHANGE = "exchange"
    FLIP = "boundaryFlip"


@dataclass(frozen=True)
class MoveStep:
    kind: StepKind
    x: Site
    e: Direction | None = None

    @classmethod
    def exchange(cls, x: Sequence[int], e: Direction) -> "MoveStep":
        return cls(StepKind.EXCHANGE, tuple(x), e)

    @classmethod
    def flip(cls, x: Sequence[int]) -> "MoveStep":
        return cls(StepKind.FLIP, tuple(x))

    @property
    def dim(self) -> int:
        return len(self.x)

    def sites(self) -> tuple[Site, ...]:
        if self.kind is StepKind.FLIP:
            return (self.x,)
        return self.x, add(self.x, self.e.vector(self.dim))

    def bond(self) -> tuple[Site, int]:
        """Normalised bond: lower endpoint and axis."""
        a, b = self.sites()
        return (a, self.e.axis) if self.e.positive else (b, self.e.axis)

    def transposition(self) -> FinitePermutation:
        if self.kind is StepKind.FLIP:
            return FinitePermutation.identity()
        return FinitePermutation.transposition(*self.sites())

    def translate(self, z: Sequence[int]) -> "MoveStep":
        return MoveStep(self.kind, add(self.x, z), self.e)

    def to_json(self) -> dict:
        if self.kind is StepKind.FLIP:
            return {"kind": self.kind.value, "x": list(self.x)}
        return {"kind": self.kind.value, "x": list(self.x), "e": str(self.e)}

    @classmethod
    def from_json(cls, d: dict) -> "MoveStep":
        kind = StepKind(d["kind"])
        if kind is StepKind.FLIP:
            return cls.flip(tuple(d["x"]))
        return cls.exchange(tuple(d["x"]), Direction.parse(d["e"]))


@dataclass(frozen=True)
class Guard:
    """Conjunction 'these sites empty, those occupied'."""

    empty: frozenset = frozenset()
    occupied: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "empty", frozenset(tuple(s) for s in self.empty))
        object.__setattr__(self, "occupied", frozenset(tuple(s) for s in self.occupied))
        clash = self.empty & self.occupied
        if clash:
            raise MoveError(f"guard requires {sorted(clash)} both empty and occupied")

    @property
    def sites(self) -> frozenset:
        return self.empty | self.occupied

    def matches(self, read: Callable[[Site], int]) -> bool:
        return all(read(s) == 0 for s in self.empty) and all(read(s) == 1 for s in self.occupied)

    def translate(self, z) -> "Guard":
        return Guard(frozenset(add(s, z) for s in self.empty), frozenset(add(s, z) for s in self.occupied))

    def pushforward(self, sigma: FinitePermutation) -> "Guard":
        return Guard(sigma.image(self.empty), sigma.image(self.occupied))

    def meet(self, other: "Guard") -> "Guard":
        return Guard(self.empty | other.empty, self.occupied | other.occupied)

    def to_json(self) -> dict:
        return {"empty": [list(s) for s in sorted(self.empty)], "occupied": [list(s) for s in sorted(self.occupied)]}

    @classmethod
    def from_json(cls, d: dict) -> "Guard":
        return cls(frozenset(tuple(s) for s in d.get("empty", [])),
                   frozenset(tuple(s) for s in d.get("occupied", [])))


@dataclass(frozen=True)
class Branch:
    guard: Guard
    steps: tuple[MoveStep, ...]


@dataclass(frozen=True)
class ReservoirLift:
    """How box configurations are extended to Z^d for a move built outside the box.

    Sites in ``ghost_empty`` are empty, each key of ``mirror`` carries the
    complement of the box site it maps to, and every other outside site is
    occupied.
    """

    extent: tuple[int, ...]
    ghost_empty: frozenset
    mirror: tuple[tuple[Site, Site], ...]

    def inside(self, x: Sequence[int]) -> bool:
        return all(1 <= c <= n for c, n in zip(x, self.extent))

    def box_sites(self) -> list[Site]:
        from itertools import product
        return list(product(*(range(1, n + 1) for n in self.extent)))

    def is_boundary(self, x) -> bool:
        return self.inside(x) and any(c == 1 or c == n for c, n in zip(x, self.extent))


@dataclass(frozen=True)
class MoveProgram:
    dim: int
    branches: tuple[Branch, ...]
    domain: Guard = Guard()
    name: str = ""
    lift: ReservoirLift | None = None
    domain_is_union: bool = False

    @classmethod
    def deterministic(cls, steps: Iterable[MoveStep], domain: Guard = Guard(), name: str = "",
                      dim: int | None = None) -> "MoveProgram":
        steps = tuple(steps)
        if dim is None:
            if not steps:
                raise MoveError("dimension needed for an empty step list")
            dim = steps[0].dim
        return cls(dim, (Branch(Guard(), steps),), domain, name)

    @classmethod
    def identity(cls, dim: int, domain: Guard = Guard()) -> "MoveProgram":
        return cls.deterministic((), domain, "id", dim)

    @property
    def is_deterministic(self) -> bool:
        return len(self.branches) == 1 and not self.branches[0].guard.sites

    @property
    def steps(self) -> tuple[MoveStep, ...]:
        if not self.is_deterministic:
            raise MoveError(f"move {self.name!r} is guarded; it has no single step list")
        return self.branches[0].steps

    @property
    def T(self) -> int:
        return max((len(b.steps) for b in self.branches), default=0)

    def permutation(self, branch: int = 0) -> FinitePermutation:
        sigma = FinitePermutation.identity()
        for s in self.branches[branch].steps:
            sigma = s.transposition().compose(sigma)
        return sigma

    def footprint(self) -> frozenset:
        out = set()
        for b in self.branches:
            for s in b.steps:
                out.update(s.sites())
        return frozenset(out)

    def bond_bases(self) -> frozenset:
        out = set()
        for b in self.branches:
            for s in b.steps:
                out.add(s.bond()[0] if s.kind is StepKind.EXCHANGE else s.x)
        return frozenset(out)

    def window(self) -> tuple[Site, Site]:
        pts = set(self.footprint()) | self.domain.sites
        for b in self.branches:
            pts |= b.guard.sites
        if not pts:
            return origin(self.dim), origin(self.dim)
        lo = tuple(min(p[k] for p in pts) for k in range(self.dim))
        hi = tuple(max(p[k] for p in pts) for k in range(self.dim))
        return lo, hi

    def translate(self, z: Sequence[int]) -> "MoveProgram":
        z = tuple(z)
        if self.lift is not None:
            raise MoveError("lifted reservoir moves are tied to their box")
        return MoveProgram(self.dim, tuple(Branch(b.guard.translate(z), tuple(s.translate(z) for s in b.steps))
                                           for b in self.branches),
                           self.domain.translate(z), self.name, None, self.domain_is_union)

    def renamed(self, name: str) -> "MoveProgram":
        return MoveProgram(self.dim, self.branches, self.domain, name, self.lift, self.domain_is_union)

    def to_json(self) -> dict:
        lo, hi = self.window()
        out = {"schema": "kclg-move/1", "name": self.name, "dimension": self.dim,
               "window": {"lo": list(lo), "hi": list(hi)},
               "domain": self.domain.to_json(), "domainIsUnion": self.domain_is_union,
               "branches": [{"guard": b.guard.to_json(), "steps": [s.to_json() for s in b.steps]}
                            for b in self.branches]}
        if self.lift is not None:
            out["lift"] = {"extent": list(self.lift.extent),
                           "ghostEmpty": [list(s) for s in sorted(self.lift.ghost_empty)],
                           "mirror": [[list(a), list(b)] for a, b in self.lift.mirror]}
        return out

    @classmethod
    def from_json(cls, d: dict) -> "MoveProgram":
        try:
            lift = None
            if "lift" in d:
                lift = ReservoirLift(tuple(d["lift"]["extent"]),
                                     frozenset(tuple(s) for s in d["lift"]["ghostEmpty"]),
                                     tuple((tuple(a), tuple(b)) for a, b in d["lift"]["mirror"]))
            branches = tuple(Branch(Guard.from_json(b["guard"]), tuple(MoveStep.from_json(s) for s in b["steps"]))
                             for b in d["branches"])
            return cls(int(d["dimension"]), branches, Guard.from_json(d.get("domain", {})), d.get("name", ""),
                       lift, bool(d.get("domainIsUnion", False)))
        except KeyError as exc:
            raise MoveError(f"move spec missing field {exc.args[0]!r}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MoveProgram":
        try:
            return cls.from_json(json.loads(text))
        except json.JSONDecodeError as exc:
            raise MoveError(f"move spec is not valid JSON: {exc}") from None


def compose(m1: MoveProgram, m2: MoveProgram, name: str | None = None) -> MoveProgram:
    """``m2 o m1``: run ``m1`` then ``m2``.

    The domain is that of ``m1`` intersected with the pull-back of ``m2``'s
    domain when ``m1`` is deterministic.
    """
    if m1.dim != m2.dim:
        raise MoveError("dimension mismatch")
    if m1.lift is not None or m2.lift is not None:
        raise MoveError("cannot compose lifted reservoir moves")
    name = name if name is not None else f"{m2.name}.{m1.name}"
    if m1.is_deterministic:
        sigma1 = m1.permutation()
        inv = sigma1.inverse()
        domain = m1.domain.meet(m2.domain.pushforward(inv))
        branches = tuple(Branch(b.guard.pushforward(inv), m1.steps + b.steps) for b in m2.branches)
        return MoveProgram(m1.dim, branches, domain, name, None, m2.domain_is_union)
    if not m2.is_deterministic:
        raise MoveError("composition of two guarded moves is not supported")
    branches = tuple(Branch(b.guard, b.steps + m2.steps) for b in m1.branches)
    return MoveProgram(m1.dim, branches, m1.domain, name, None, m1.domain_is_union)


def compose_all(moves: Sequence[MoveProgram], name: str = "") -> MoveProgram:
    """Run ``moves[0]`` first, then ``moves[1]``, and so on."""
    out = moves[0]
    for m in moves[1:]:
        out = compose(out, m)
    return out.renamed(name or out.name)


def inverse(m: MoveProgram) -> MoveProgram:
    if not m.is_deterministic:
        raise MoveError("only deterministic moves have an inverse")
    if m.lift is not None:
        raise MoveError("cannot invert a lifted reservoir move")
    sigma = m.permutation()
    name = m.name[:-3] if m.name.endswith("^-1") else m.name + "^-1"
    return MoveProgram(m.dim, (Branch(Guard(), tuple(reversed(m.steps))),), m.domain.pushforward(sigma), name)


# ------------------------------------------------------------------ validation

@dataclass
class MoveContext:
    model: ConstraintModel
    exterior_fill: int = 1
    reservoir: bool = False
    tracer: Site | None = None
    budget: int = 1 << 20


@dataclass
class MoveReport:
    valid: bool
    T: int
    loss: float
    energy_barrier: int
    permutation: FinitePermutation | None
    permutations: list[FinitePermutation]
    touch_count: int
    mode: str
    checked: int = 0
    witness: dict | None = None
    collisions: int = 1
    tracer_ok: bool | None = None
    bases: frozenset = frozenset()
    window_sites: list[Site] = field(default_factory=list)
    initial_states: np.ndarray | None = None
    final_states: np.ndarray | None = None
    lift_valid: bool | None = None

    def to_json(self) -> dict:
        def perm(p):
            return None if p is None else [[list(a), list(b)] for a, b in sorted(p.items())]
        return {"valid": self.valid, "T": self.T, "loss": self.loss, "energyBarrier": self.energy_barrier,
                "permutation": perm(self.permutation), "cycles": None if self.permutation is None
                else [[list(s) for s in c] for c in self.permutation.cycles()],
                "touchCount": self.touch_count, "mode": self.mode, "checked": self.checked,
                "witness": self.witness, "tracerOk": self.tracer_ok, "liftValid": self.lift_valid}


def _read_factory(vac: set, lo: Site, hi: Site, fill: int):
    if fill == 1:
        return lambda s: 0 if s in vac else 1

    def read(s):
        if s in vac:
            return 0
        return 1 if all(a <= c <= b for a, c, b in zip(lo, s, hi)) else 0
    return read


def _run_scalar(model: ConstraintModel, steps: Sequence[MoveStep], vac: set, lo: Site, hi: Site, fill: int,
                tracer: Site | None = None):
    """Run a step list on one configuration given by its vacancy set.

    Returns ``(ok, t_fail, final_vac, tracer_ok, tracer_pos)``.
    """
    vac = set(vac)
    read = _read_factory(vac, lo, hi, fill)
    tracer_ok = True
    for t, s in enumerate(steps):
        if s.kind is StepKind.FLIP:
            return False, t, vac, tracer_ok, tracer
        a, b = s.sites()
        base, axis = s.bond()
        if model.rate_from(read, base, axis) < 1:
            return False, t, vac, tracer_ok, tracer
        if tracer is not None and tracer in (a, b):
            other = b if tracer == a else a
            if other in vac:
                tracer = other
            else:
                tracer_ok = False
        ina, inb = a in vac, b in vac
        if ina != inb:
            if ina:
                vac.discard(a)
                vac.add(b)
            else:
                vac.discard(b)
                vac.add(a)
    return True, None, vac, tracer_ok, tracer


def _touch_count(steps: Sequence[MoveStep]) -> int:
    c = Counter()
    for s in steps:
        c.update(s.sites())
    return max(c.values(), default=0)


def validate(p: MoveProgram, ctx: MoveContext, mode: str = "worstCase", samples: int = 200,
             seed: int = 0) -> MoveReport:
    """Check that every step of ``p`` is allowed on its domain.

    ``worstCase`` runs the single configuration with the domain's required
    vacancies and everything else occupied; rates only grow when sites are
    emptied, so this covers the whole domain.  ``exhaustive`` enumerates the
    window; ``sampled`` draws random domain configurations.
    """
    if p.lift is not None:
        if mode == "exhaustive":
            return _validate_reservoir(p, ctx)
        lifted = MoveProgram(p.dim, p.branches, p.domain.meet(Guard(p.lift.ghost_empty)), p.name)
        rep = validate(lifted, MoveContext(ctx.model, 1, False, ctx.tracer, ctx.budget), mode, samples, seed)
        rep.lift_valid = rep.valid
        return rep
    if ctx.reservoir:
        raise MoveError("reservoir validation needs a lifted move")
    if mode == "worstCase":
        return _validate_worst(p, ctx)
    if mode == "exhaustive":
        return _validate_exhaustive(p, ctx)
    if mode == "sampled":
        return _validate_sampled(p, ctx, samples, seed)
    raise ValueError(f"unknown validation mode {mode!r}")


def _validate_worst(p: MoveProgram, ctx: MoveContext) -> MoveReport:
    if not p.is_deterministic:
        raise MoveError("worst-case validation needs a deterministic move")
    lo, hi = p.window()
    steps = p.steps
    vac0 = set(p.domain.empty)
    ok, t_fail, final, tracer_ok, _ = _run_scalar(ctx.model, steps, vac0, lo, hi, ctx.exterior_fill, ctx.tracer)
    sigma = p.permutation()
    witness = None
    if not ok:
        witness = {"t": t_fail, "step": steps[t_fail].to_json(), "vacancies": [list(v) for v in sorted(vac0)]}
    elif ctx.tracer is not None and not tracer_ok:
        witness = {"tracer": list(ctx.tracer), "reason": "tracer exchanged with a particle"}
    return MoveReport(ok and (tracer_ok or ctx.tracer is None), len(steps), 0.0, 0, sigma, [sigma],
                      _touch_count(steps), "worstCase", 1, witness, 1,
                      None if ctx.tracer is None else tracer_ok, p.bond_bases())


def _validate_sampled(p: MoveProgram, ctx: MoveContext, samples: int, seed: int) -> MoveReport:
    rng = np.random.default_rng(seed)
    lo, hi = p.window()
    from itertools import product
    box = list(product(*(range(a, b + 1) for a, b in zip(lo, hi))))
    free = [s for s in box if s not in p.domain.sites]
    worst = _validate_worst(p, ctx) if p.is_deterministic else None
    tracer_ok_all = True
    for k in range(samples):
        vac = set(p.domain.empty) | {s for s, u in zip(free, rng.random(len(free))) if u < 0.5}
        read = _read_factory(vac, lo, hi, ctx.exterior_fill)
        branch = next((b for b in p.branches if b.guard.matches(read)), None)
        if branch is None:
            continue
        ok, t_fail, _, tracer_ok, _ = _run_scalar(ctx.model, branch.steps, vac, lo, hi, ctx.exterior_fill,
                                                  ctx.tracer)
        tracer_ok_all &= tracer_ok
        if not ok or (ctx.tracer is not None and not tracer_ok):
            return MoveReport(False, p.T, float("nan"), 0, None, [], 0, "sampled", k + 1,
                              {"t": t_fail, "vacancies": [list(v) for v in sorted(vac)]},
                              tracer_ok=tracer_ok)
    sigma = p.permutation() if p.is_deterministic else None
    return MoveReport(True, p.T, 0.0 if p.is_deterministic else float("nan"), 0, sigma,
                      [p.permutation(i) for i in range(len(p.branches))],
                      worst.touch_count if worst else 0, "sampled", samples, None, 1,
                      None if ctx.tracer is None else tracer_ok_all, p.bond_bases())


def _popcount(a: np.ndarray) -> np.ndarray:
    a = a.astype(np.uint64)
    out = np.zeros(a.shape, np.int64)
    while True:
        nz = a != 0
        if not nz.any():
            return out
        out += (a & np.uint64(1)).astype(np.int64)
        a = a >> np.uint64(1)


class _Window:
    def __init__(self, sites: list[Site]):
        if len(sites) > 62:
            raise BudgetExceeded(f"window of {len(sites)} sites is too large for exhaustive validation")
        self.sites = sites
        self.pos = {s: k for k, s in enumerate(sites)}

    def bit(self, s) -> int:
        return 1 << self.pos[s]


def _box_sites(lo, hi) -> list[Site]:
    from itertools import product
    return [tuple(s) for s in product(*(range(a, b + 1) for a, b in zip(lo, hi)))]


def _clause_masks(model: ConstraintModel, win: _Window, base: Site, axis: int, fill: int,
                  inside: Callable[[Site], bool] | None = None):
    """Clause masks over window bits; ``inside`` restricts which sites are real."""
    out = []
    for cl in model.clauses(axis):
        mask, dead = 0, False
        for o in cl.offsets:
            s = add(base, o)
            real = s in win.pos and (inside is None or inside(s))
            if real:
                mask |= win.bit(s)
            elif fill == 1:
                dead = True
                break
        if not dead:
            out.append((mask, cl.weight))
    return out


def _rate_vec(model: ConstraintModel, masks, states: np.ndarray) -> np.ndarray:
    out = np.zeros(states.shape[0])
    for mask, w in masks:
        sat = (states & np.int64(mask)) == 0
        if model.rate_mode.value == "indicatorAny":
            out = np.maximum(out, sat)
        else:
            out = out + w * sat
    return out


def _swap_bits(states: np.ndarray, ia: int, ib: int) -> np.ndarray:
    ba = (states >> ia) & 1
    bb = (states >> ib) & 1
    diff = ba ^ bb
    return states ^ ((diff << ia) | (diff << ib))


def _validate_exhaustive(p: MoveProgram, ctx: MoveContext) -> MoveReport:
    lo, hi = p.window()
    win = _Window(_box_sites(lo, hi))
    n = len(win.sites)
    free = [k for k, s in enumerate(win.sites) if s not in p.domain.sites]
    if 2 ** len(free) > ctx.budget:
        raise BudgetExceeded(f"{2 ** len(free)} configurations exceed budget {ctx.budget}")
    base_state = sum(win.bit(s) for s in p.domain.occupied)
    idx = np.arange(2 ** len(free), dtype=np.int64)
    states0 = np.full(idx.shape, base_state, np.int64)
    for j, k in enumerate(free):
        states0 |= ((idx >> j) & 1) << k
    vac0 = n - _popcount(states0)

    remaining = np.ones(states0.shape[0], bool)
    key_counts: Counter = Counter()
    perms, valid, witness = [], True, None
    tracer_ok = True if ctx.tracer is not None else None
    final = states0.copy()
    eb = 0
    touches = 0
    for bi, br in enumerate(p.branches):
        g = br.guard
        sel = remaining.copy()
        for s in g.empty:
            sel &= ((states0 >> win.pos[s]) & 1) == 0 if s in win.pos else ctx.exterior_fill == 0
        for s in g.occupied:
            sel &= ((states0 >> win.pos[s]) & 1) == 1 if s in win.pos else ctx.exterior_fill == 1
        remaining &= ~sel
        if not sel.any():
            perms.append(p.permutation(bi))
            continue
        st = states0[sel]
        tr = None
        if ctx.tracer is not None:
            tr = np.full(st.shape, win.pos[ctx.tracer], np.int64)
        for t, step in enumerate(br.steps):
            if step.kind is StepKind.FLIP:
                valid = False
                witness = witness or {"t": t, "reason": "boundary flip outside a reservoir context"}
                break
            a, b = step.sites()
            base, axis = step.bond()
            rates = _rate_vec(ctx.model, _clause_masks(ctx.model, win, base, axis, ctx.exterior_fill), st)
            bad = rates < 1
            if bad.any():
                valid = False
                if witness is None:
                    s0 = int(states0[sel][np.flatnonzero(bad)[0]])
                    witness = {"branch": bi, "t": t, "step": step.to_json(),
                               "vacancies": [list(win.sites[k]) for k in range(n) if not (s0 >> k) & 1]}
            key_counts.update(((t, step.x, step.e, int(v)) for v in st))
            ia, ib = win.pos[a], win.pos[b]
            if tr is not None:
                for here, there in ((ia, ib), (ib, ia)):
                    at = tr == here
                    if at.any():
                        partner_empty = ((st[at] >> there) & 1) == 0
                        if not partner_empty.all():
                            tracer_ok = False
                        moved = np.flatnonzero(at)[partner_empty]
                        tr[moved] = there
            st = _swap_bits(st, ia, ib)
        final[sel] = st
        perms.append(p.permutation(bi))
        touches = max(touches, _touch_count(br.steps))
    if not p.domain_is_union and remaining.any():
        valid = False
        s0 = int(states0[np.flatnonzero(remaining)[0]])
        witness = witness or {"reason": "no branch applies",
                              "vacancies": [list(win.sites[k]) for k in range(n) if not (s0 >> k) & 1]}
    covered = ~remaining if p.domain_is_union else np.ones_like(remaining)
    eb = int(max(0, (0 if not covered.any() else (n - _popcount(final[covered]) - vac0[covered]).max())))
    collisions = max(key_counts.values(), default=1)
    sigma = perms[0] if perms and all(q == perms[0] for q in perms) else None
    if tracer_ok is False:
        witness = witness or {"reason": "tracer exchanged with a particle"}
    return MoveReport(valid and tracer_ok is not False, p.T, math.log2(collisions), eb, sigma, perms, touches,
                      "exhaustive", int(covered.sum()), witness, collisions, tracer_ok, p.bond_bases(),
                      win.sites, states0[covered], final[covered])


def _validate_reservoir(p: MoveProgram, ctx: MoveContext) -> MoveReport:
    """Exhaustive check of a lifted move restricted to its box.

    Exchanges inside the box must be allowed with empty boundary conditions,
    exchanges across the box boundary act as boundary flips, and exchanges
    outside the box do nothing to the box configuration.
    """
    lift = p.lift
    if not p.is_deterministic:
        raise MoveError("lifted moves must be deterministic")
    steps = p.steps
    box = lift.box_sites()
    lo, hi = p.window()
    extra = list(lift.ghost_empty) + [g for g, _ in lift.mirror]
    lo = tuple(min([a, 1] + [s[k] for s in extra]) for k, a in enumerate(lo))
    hi = tuple(max([b, n] + [s[k] for s in extra]) for k, (b, n) in enumerate(zip(hi, lift.extent)))
    win = _Window(_box_sites(lo, hi))
    if 2 ** len(box) > ctx.budget:
        raise BudgetExceeded(f"{2 ** len(box)} box configurations exceed budget {ctx.budget}")
    box_bits = np.array([win.pos[s] for s in box], np.int64)
    box_mask = sum(1 << int(k) for k in box_bits)
    idx = np.arange(2 ** len(box), dtype=np.int64)
    ext = np.zeros(idx.shape, np.int64)
    for j, k in enumerate(box_bits):
        ext |= ((idx >> j) & 1) << k
    for s in win.sites:
        if lift.inside(s) or s in lift.ghost_empty:
            continue
        ext |= np.int64(win.bit(s))
    for ghost, src in lift.mirror:
        gb = win.pos[ghost]
        srcbit = (ext >> win.pos[src]) & 1
        ext = (ext & ~np.int64(1 << gb)) | ((1 - srcbit) << gb)

    restricted0 = ext & box_mask
    nbox = len(box)
    vac0 = nbox - _popcount(restricted0)
    valid, lift_valid, witness = True, True, None
    key_counts: Counter = Counter()
    eb = 0
    st = ext.copy()
    for t, step in enumerate(steps):
        a, b = step.sites()
        base, axis = step.bond()
        ina, inb = lift.inside(a), lift.inside(b)
        ext_rates = _rate_vec(ctx.model, _clause_masks(ctx.model, win, base, axis, 1), st)
        if (ext_rates < 1).any():
            lift_valid = False
        if ina and inb:
            masks = _clause_masks(ctx.model, win, base, axis, 0, lift.inside)
            rates = _rate_vec(ctx.model, masks, st & box_mask)
            bad = rates < 1
            if bad.any():
                valid = False
                if witness is None:
                    s0 = int(restricted0[np.flatnonzero(bad)[0]])
                    witness = {"t": t, "step": step.to_json(),
                               "vacancies": [list(s) for s in box if not (s0 >> win.pos[s]) & 1]}
        elif ina or inb:
            inner = a if ina else b
            if not lift.is_boundary(inner):
                valid = False
                witness = witness or {"t": t, "reason": f"flip at non-boundary site {inner}"}
        key_counts.update(((t, int(v)) for v in (st & box_mask)))
        st = _swap_bits(st, win.pos[a], win.pos[b])
        eb = max(eb, int((nbox - _popcount(st & box_mask) - vac0).max()))
    collisions = max(key_counts.values(), default=1)
    final = st & box_mask

    def compress(arr):
        out = np.zeros(arr.shape, np.int64)
        for j, k in enumerate(box_bits):
            out |= ((arr >> k) & 1) << j
        return out

    return MoveReport(valid, len(steps), math.log2(collisions), eb, None, [], _touch_count(steps), "reservoir",
                      len(idx), witness, collisions, None, p.bond_bases(), box, compress(restricted0),
                      compress(final), lift_valid)


# -------------------------------------------------------------- certificates

@dataclass
class MobileClusterCertificate:
    model: ConstraintModel
    cluster: tuple[Site, ...]
    l: int
    translations: dict[Direction, MoveProgram]
    exchanges: dict[Direction, MoveProgram]

    @property
    def dim(self) -> int:
        return self.model.dim

    def tr(self, e: Direction, x: Sequence[int] | None = None) -> MoveProgram:
        m = self.translations[e]
        return m if x is None else m.translate(x)

    def ex(self, e: Direction, x: Sequence[int] | None = None) -> MoveProgram:
        m = self.exchanges[e]
        return m if x is None else m.translate(x)

    def cluster_at(self, x: Sequence[int]) -> frozenset:
        return frozenset(add(x, c) for c in self.cluster)

    def verify(self, strict: bool = False) -> dict[str, MoveReport]:
        """Validate all programs; raises :class:`MoveError` on the first failure."""
        ctx = MoveContext(self.model)
        reports = {}
        C = frozenset(self.cluster)
        d = self.dim
        for e in Direction.all(d):
            ev = e.vector(d)
            tr = self.translations[e]
            rep = validate(tr, ctx, "worstCase")
            if not rep.valid:
                raise MoveError(f"Tr{e} invalid", rep.witness)
            if tr.domain.empty != C:
                raise MoveError(f"Tr{e} domain is not the empty cluster")
            sigma = rep.permutation
            if sigma.image(C) != frozenset(add(c, ev) for c in C):
                raise MoveError(f"Tr{e} does not carry C onto C{e}")
            if strict and any(sigma(c) != add(c, ev) for c in C):
                raise MoveError(f"Tr{e} is not pointwise")
            window_ok = all(max(abs(c) for c in s) <= self.l for s in tr.footprint())
            if not window_ok:
                raise MoveError(f"Tr{e} leaves the window [-l,l]^d")
            reports[f"Tr{e}"] = rep

            ex = self.exchanges[e]
            rep = validate(ex, ctx, "worstCase")
            if not rep.valid:
                raise MoveError(f"Ex{e} invalid", rep.witness)
            target = FinitePermutation.transposition(scale(self.l, ev), scale(self.l + 1, ev))
            if rep.permutation != target:
                raise MoveError(f"Ex{e} has permutation {rep.permutation}, expected {target}")
            extra = scale(self.l + 1, ev)
            if not all(s == extra or max(abs(c) for c in s) <= self.l for s in ex.footprint()):
                raise MoveError(f"Ex{e} leaves the window")
            reports[f"Ex{e}"] = rep
        return reports

    def to_json(self) -> dict:
        return {"schema": "kclg-certificate/1", "model": self.model.to_dict(), "modelDigest": self.model.digest(),
                "cluster": [list(c) for c in self.cluster], "l": self.l,
                "translations": {str(e): m.to_json() for e, m in sorted(self.translations.items())},
                "exchanges": {str(e): m.to_json() for e, m in sorted(self.exchanges.items())}}

    @classmethod
    def from_json(cls, d: dict) -> "MobileClusterCertificate":
        model = ConstraintModel.from_dict(d["model"])
        if d.get("modelDigest") and d["modelDigest"] != model.digest():
            raise MoveError("certificate model digest mismatch")
        return cls(model, tuple(tuple(c) for c in d["cluster"]), int(d["l"]),
                   {Direction.parse(k): MoveProgram.from_json(v) for k, v in d["translations"].items()},
                   {Direction.parse(k): MoveProgram.from_json(v) for k, v in d["exchanges"].items()})

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MobileClusterCertificate":
        return cls.from_json(json.loads(text))


def translation_move(cert: MobileClusterCertificate, x: Sequence[int], e: Direction) -> MoveProgram:
    return cert.tr(e, x)


def exchange_move(cert: MobileClusterCertificate, x: Sequence[int], e: Direction) -> MoveProgram:
    return cert.ex(e, x)


@dataclass
class SearchResult:
    status: str  # "found", "exhausted" or "unknown"
    program: MoveProgram | None
    explored: int

    def __bool__(self) -> bool:
        return self.program is not None


def search_translation(m: ConstraintModel, C: Iterable[Sequence[int]], l: int, e: Direction,
                       budget: int = 1 << 20) -> SearchResult:
    """Breadth-first search for a translation move of cluster ``C`` by ``e``.

    States are vacancy sets inside ``[-l, l]^d``; everything outside is
    occupied.  A path found there works on every configuration with ``C``
    empty because emptying sites never lowers a rate.  ``exhausted`` means
    no path exists in this window; ``unknown`` means the budget ran out.
    """
    C = frozenset(tuple(c) for c in C)
    if not C:
        raise ValueError("the cluster must be non-empty")
    d = m.dim
    ev = e.vector(d)
    goal = frozenset(add(c, ev) for c in C)
    inside = lambda s: all(-l <= c <= l for c in s)
    if not all(inside(s) for s in C):
        raise ValueError("the cluster must lie in the window")
    if not all(inside(s) for s in goal):
        return SearchResult("exhausted", None, 0)
    dirs = Direction.all(d)
    parent: dict[frozenset, tuple[frozenset, MoveStep] | None] = {C: None}
    queue = deque([C])
    while queue:
        state = queue.popleft()
        if state == goal:
            steps = []
            while parent[state] is not None:
                state, step = parent[state]
                steps.append(step)
            prog = MoveProgram.deterministic(reversed(steps), Guard(C), f"Tr{e}", d)
            return SearchResult("found", prog, len(parent))
        read = lambda s, st=state: 0 if s in st else 1
        for v in sorted(state):
            for f in dirs:
                w = add(v, f.vector(d))
                if w in state or not inside(w):
                    continue
                step = MoveStep.exchange(v, f)
                base, axis = step.bond()
                if m.rate_from(read, base, axis) < 1:
                    continue
                nxt = (state - {v}) | {w}
                if nxt in parent:
                    continue
                if len(parent) >= budget:
                    return SearchResult("unknown", None, len(parent))
                parent[nxt] = (state, step)
                queue.append(nxt)
    return SearchResult("exhausted", None, len(parent))


def conjugated_exchange(m: ConstraintModel, translations: dict[Direction, MoveProgram], C: Iterable[Site],
                        home: Sequence[int], a: Sequence[int], b: Sequence[int],
                        extra_empty: Iterable[Site] = (), occupied: Iterable[Site] = (),
                        allowed: Callable[[Site], bool] | None = None, radius: int = 8,
                        tracer: Site | None = None, name: str = "", budget: int = 200000) -> MoveProgram | None:
    """Exchange ``a`` and ``b`` by routing the cluster, swapping, and routing back.

    The cluster starts empty at ``home + C``.  Breadth-first over cluster
    positions reached with translation moves, look for one where the sites
    now holding the contents of ``a`` and ``b`` are adjacent, outside the
    cluster, and their bond is enabled.  Conjugating the swap by the route
    makes the whole program compatible with the transposition ``(a b)``.
    """
    d = m.dim
    C = tuple(tuple(c) for c in C)
    home, a, b = tuple(home), tuple(a), tuple(b)
    start_vac = frozenset(add(home, c) for c in C) | frozenset(extra_empty)
    domain = Guard(start_vac, frozenset(occupied))
    ctx = MoveContext(m, tracer=tracer)
    dirs = Direction.all(d)
    # the route matters only through where it carries a and b
    seen = {(home, a, b)}
    queue = deque([(home, (), FinitePermutation.identity(), start_vac)])
    while queue:
        p, route, R, vac = queue.popleft()
        ra, rb = R(a), R(b)
        diff = sub(rb, ra)
        cluster = frozenset(add(p, c) for c in C)
        if sum(abs(c) for c in diff) == 1 and ra not in cluster and rb not in cluster:
            step = MoveStep.exchange(ra, Direction.from_vector(diff))
            read = lambda s: 0 if s in vac else 1
            base, axis = step.bond()
            if (allowed is None or (allowed(ra) and allowed(rb))) and m.rate_from(read, base, axis) >= 1:
                steps = route + (step,) + tuple(reversed(route))
                prog = MoveProgram.deterministic(steps, domain, name, d)
                if validate(prog, ctx, "worstCase").valid:
                    return prog
        for f in dirs:
            q = add(p, f.vector(d))
            if max(abs(x - y) for x, y in zip(q, home)) > radius:
                continue
            tr = translations[f].translate(p)
            if allowed is not None and not all(allowed(s) for s in tr.footprint()):
                continue
            R2 = tr.permutation().compose(R)
            key = (q, R2(a), R2(b))
            if key in seen:
                continue
            seen.add(key)
            if len(seen) > budget:
                return None
            ok, _, new_vac, _, _ = _run_scalar(m, tr.steps, vac, origin(d), origin(d), 1)
            if not ok:
                continue
            queue.append((q, route + tr.steps, R2, frozenset(new_vac)))
    return None


def exchange_from_translation(m: ConstraintModel, translations: dict[Direction, MoveProgram], C: Iterable[Site],
                              l: int, e: Direction) -> MoveProgram | None:
    """Exchange move ``Ex_e`` for cluster ``C`` built from translation moves."""
    d = m.dim
    ev = e.vector(d)
    extra = scale(l + 1, ev)
    allowed = lambda s: s == extra or max(abs(c) for c in s) <= l
    prog = conjugated_exchange(m, translations, C, origin(d), scale(l, ev), extra, allowed=allowed,
                               radius=2 * l, name=f"Ex{e}")
    if prog is None:
        return None
    return MoveProgram.deterministic(prog.steps, Guard(frozenset(tuple(c) for c in C)), f"Ex{e}", d)


def certify(m: ConstraintModel, C: Iterable[Sequence[int]], l: int, budget: int = 1 << 20) -> MobileClusterCertificate:
    """Search translations in every direction and derive exchange moves."""
    C = tuple(sorted(tuple(c) for c in C))
    trs = {}
    for e in Direction.all(m.dim):
        res = search_translation(m, C, l, e, budget)
        if res.program is None:
            if res.status == "unknown":
                raise BudgetExceeded(f"translation search in direction {e} exceeded the budget")
            raise MoveError(f"no translation move in direction {e} within [-{l},{l}]^d")
        trs[e] = res.program
    exs = {}
    for e in Direction.all(m.dim):
        prog = exchange_from_translation(m, trs, C, l, e)
        if prog is None:
            raise MoveError(f"exchange recipe failed in direction {e}")
        exs[e] = prog
    cert = MobileClusterCertificate(m, C, l, trs, exs)
    cert.verify()
    return cert


# ------------------------------------------------------------ hand-built library

def bt1d_tr_plus(x: Sequence[int] = (0,)) -> MoveProgram:
    """Move the empty pair {1,2} to {2,3}: swap (2,3), then (1,2)."""
    steps = (MoveStep.exchange((2,), Direction(1)), MoveStep.exchange((1,), Direction(1)))
    return MoveProgram.deterministic(steps, Guard({(1,), (2,)}), "Tr+1", 1).translate(x)


def bt1d_tr_minus(x: Sequence[int] = (0,)) -> MoveProgram:
    return inverse(bt1d_tr_plus((-1,))).renamed("Tr-1").translate(x)


def bt1d_ex_plus(x: Sequence[int] = (0,)) -> MoveProgram:
    return MoveProgram.deterministic((MoveStep.exchange((3,), Direction(1)),), Guard({(1,), (2,)}),
                                     "Ex+1", 1).translate(x)


def bt1d_ex_minus_composition() -> MoveProgram:
    """Walk the pair five sites left, swap (-2,-1) there, and walk back.

    The five inverse translations undo the five forward ones, so the net
    effect is the transposition (-3,-4).
    """
    route = [bt1d_tr_minus((-k,)) for k in range(5)]
    middle = bt1d_ex_plus((-5,))
    back = [inverse(r) for r in reversed(route)]
    prog = compose_all(route + [middle] + back)
    return MoveProgram.deterministic(prog.steps, Guard({(1,), (2,)}), "Ex-1", 1)


@lru_cache(maxsize=None)
def bt1d_certificate() -> MobileClusterCertificate:
    m = bt1d()
    trs = {Direction(1): bt1d_tr_plus(), Direction(1, -1): bt1d_tr_minus()}
    exs = {Direction(1): bt1d_ex_plus(), Direction(1, -1): bt1d_ex_minus_composition()}
    cert = MobileClusterCertificate(m, ((1,), (2,)), 3, trs, exs)
    cert.verify(strict=True)
    return cert


BT2D_SQUARE = ((1, 1), (1, 2), (2, 1), (2, 2))


def bt2d_tr_up() -> MoveProgram:
    """Column-wise upward shift of the empty 2x2 square (four exchanges)."""
    up = Direction(2)
    steps = (MoveStep.exchange((1, 2), up), MoveStep.exchange((1, 1), up),
             MoveStep.exchange((2, 2), up), MoveStep.exchange((2, 1), up))
    return MoveProgram.deterministic(steps, Guard(set(BT2D_SQUARE)), "Tr+2", 2)


@lru_cache(maxsize=None)
def bt2d_certificate() -> MobileClusterCertificate:
    cert = certify(bt2d(), BT2D_SQUARE, 3)
    cert.translations[Direction(2)] = bt2d_tr_up()
    cert.verify()
    return cert


# ------------------------------------------------------------ reservoir flips

def flip_move(m: ConstraintModel, cert: MobileClusterCertificate, z: Sequence[int], L: int) -> MoveProgram:
    """Move that flips site ``z`` of the box ``[L]^d`` using the reservoir.

    The configuration is extended outside the box with an empty cluster to
    the left of ``z`` and, on the site just outside the box in line with
    ``z``, the complement of ``eta(z)``; everything else outside is occupied.
    The cluster carries that outside value to ``z`` with alternating
    exchange and translation moves along the first axis, swaps it in, and
    winds everything back.  Restricted to the box this is a legal move
    whose last configuration is ``eta`` flipped at ``z``.
    """
    d = m.dim
    z = tuple(z)
    if not all(1 <= c <= L for c in z):
        raise MoveError(f"{z} is outside the box [1,{L}]^{d}")
    e1 = Direction(1)
    ev = e1.vector(d)
    zbar = (0,) + z[1:]
    y0 = sub(zbar, scale(cert.l, ev))
    parts = []
    for i in range(z[0] - 1):
        y = add(y0, scale(i, ev))
        parts.append(cert.ex(e1, y))
        parts.append(cert.tr(e1, y))
    middle = cert.ex(e1, add(y0, scale(z[0] - 1, ev)))
    forward = [s for p in parts for s in p.steps]
    back = [s for p in reversed(parts) for s in reversed(p.steps)]
    steps = tuple(forward) + middle.steps + tuple(back)
    ghost = cert.cluster_at(y0)
    lift = ReservoirLift((L,) * d, ghost, ((zbar, z),))
    prog = MoveProgram(d, (Branch(Guard(), steps),), Guard(), f"Flip{z}", lift)
    rep = validate(prog, MoveContext(m), "worstCase")
    if not rep.valid:
        raise MoveError(f"flip move at {z} fails on the extended lattice", rep.witness)
    return prog


# ------------------------------------------------------------ tracer moves

def hat_cluster(cert: MobileClusterCertificate) -> frozenset:
    """The vacancy set ``{-e_1} u ((l+2) e_1 + C)`` carried along by the tracer."""
    d = cert.dim
    e1 = unit(d, 1)
    return frozenset({neg(e1)}) | cert.cluster_at(scale(cert.l + 2, e1))


def _tracer_ce(cert, vac, a, b, tracer, name):
    d = cert.dim
    home = scale(cert.l + 2, unit(d, 1))
    extra = set(vac) - set(cert.cluster_at(home))
    prog = conjugated_exchange(cert.model, cert.translations, cert.cluster, home, a, b, extra, {tracer},
                               radius=3 * cert.l + 4, tracer=tracer, name=name)
    if prog is None:
        raise MoveError(f"could not route an exchange of {a} and {b}")
    return prog


def _vacancy_walk(cert, path, vac, tracer, name):
    """Moves carrying the vacancy at ``path[0]`` along ``path``."""
    out = []
    vac = set(vac)
    for k in range(len(path) - 1):
        a, b = path[k], path[k + 1]
        prog = _tracer_ce(cert, vac, a, b, tracer, f"{name}{k}")
        out.append(prog)
        vac = set(prog.permutation().image(vac))
    return out, vac


def hop_move(cert: MobileClusterCertificate) -> MoveProgram:
    """Carry the vacancy at ``-e_1`` over the tracer at 0 to ``e_1``.

    Compatible with the 5-cycle ``(e1, e1+e2, e2, -e1+e2, -e1)``.
    """
    d = cert.dim
    if d < 2:
        raise MoveError("the hop move needs d >= 2")
    e1, e2 = unit(d, 1), unit(d, 2)
    o = origin(d)
    hat = hat_cluster(cert)
    path = [neg(e1), add(neg(e1), e2), e2, add(e1, e2), e1]
    parts, _ = _vacancy_walk(cert, path, hat, o, "hop")
    steps = tuple(s for p in parts for s in p.steps)
    return MoveProgram.deterministic(steps, Guard(hat, {o}), "Hop", d)


def sigma_move(cert: MobileClusterCertificate, alpha: int) -> MoveProgram:
    """Move the tracer from 0 to ``e_alpha`` together with its vacancy pattern.

    The resulting permutation sends 0 to ``e_alpha`` and the pattern
    ``{-e_1} u ((l+2)e_1 + C)`` onto its translate by ``e_alpha``.
    """
    d = cert.dim
    if d < 2:
        raise MoveError("tracer moves need d >= 2")
    l = cert.l
    e1 = Direction(1)
    ev1 = e1.vector(d)
    o = origin(d)
    hat = hat_cluster(cert)
    if alpha == 1:
        hop = hop_move(cert)
        parts = [hop,
                 cert.tr(-e1, scale(l + 2, ev1)),
                 cert.ex(-e1, scale(l + 1, ev1)),
                 cert.tr(e1, scale(l + 1, ev1)),
                 cert.tr(e1, scale(l + 2, ev1))]
        steps = tuple(s for p in parts for s in p.steps)
    else:
        ea = unit(d, alpha)
        home = scale(l + 2, ev1)
        walk1, vac = _vacancy_walk(cert, [neg(ev1), add(neg(ev1), ea), ea], hat, o, "in")
        jump = _tracer_ce(cert, vac, o, ea, o, "jump")
        vac = set(jump.permutation().image(vac))
        walk2, vac = _vacancy_walk(cert, [o, neg(ev1), add(neg(ev1), ea)], vac, ea, "out")
        shift = cert.tr(Direction(alpha), home)
        parts = walk1 + [jump] + walk2 + [shift]
        steps = tuple(s for p in parts for s in p.steps)
    prog = MoveProgram.deterministic(steps, Guard(hat, {o}), f"sigma{alpha}", d)
    sigma = prog.permutation()
    ea = unit(d, alpha)
    if sigma(o) != ea or sigma.image(hat) != frozenset(add(h, ea) for h in hat):
        raise MoveError(f"sigma{alpha} does not carry the tracer pattern by e{alpha}")
    rep = validate(prog, MoveContext(cert.model, tracer=o), "worstCase")
    if not rep.valid:
        raise MoveError(f"sigma{alpha} invalid", rep.witness)
    return prog


# ------------------------------------------------------------ auxiliary moves

def aux_move(cert: MobileClusterCertificate, chain: Sequence[Sequence[Site]], alpha: int,
             i: int | None = None) -> MoveProgram:
    """Exchange 0 and ``e_alpha`` whenever one auxiliary clause is empty.

    ``chain[i]`` is the clause ``(A_i - x_{i+1}) minus {0}``.  With ``i``
    given, the single guarded branch for that clause is returned; otherwise
    the first-match union over all clauses.
    """
    d = cert.dim
    ea = unit(d, alpha)
    o = origin(d)
    idx = range(len(chain)) if i is None else [i]
    branches = []
    for k in idx:
        clause = frozenset(tuple(s) for s in chain[k])
        home = None
        for s in sorted(clause):
            p = sub(s, cert.cluster[0])
            cl = cert.cluster_at(p)
            if cl <= clause:
                home = p
                break
        read = lambda s: 0 if s in clause else 1
        direct = MoveStep.exchange(o, Direction(alpha))
        base, ax = direct.bond()
        if cert.model.rate_from(read, base, ax) >= 1:
            steps = (direct,)
        else:
            if home is None:
                raise MoveError(f"clause {k} contains no empty cluster translate")
            prog = conjugated_exchange(cert.model, cert.translations, cert.cluster, home, o, ea,
                                       clause - cert.cluster_at(home), radius=3 * cert.l + 4,
                                       name=f"Aux{alpha}.{k}")
            if prog is None:
                raise MoveError(f"could not route the auxiliary exchange for clause {k}")
            steps = prog.steps
        branches.append(Branch(Guard(clause), steps))
    name = f"Aux{alpha}" + ("" if i is None else f".{i}")
    return MoveProgram(d, tuple(branches), Guard(), name, None, True)
