"""Sites, finite boxes, occupancy configurations and finite permutations.

Sites are integer tuples.  A box of extent ``(L_1, ..., L_d)`` holds the
sites with ``1 <= x_a <= L_a``; bits are stored flat in row-major order
with 1 meaning occupied and 0 meaning empty.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from itertools import product
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

Site = tuple[int, ...]


class DomainError(ValueError):
    """A site could not be resolved inside a non-periodic box."""


class BoundaryMode(str, Enum):
    EMPTY = "empty"
    OCCUPIED = "occupied"
    PERIODIC = "periodic"


def add(x: Sequence[int], y: Sequence[int]) -> Site:
    return tuple(a + b for a, b in zip(x, y))


def sub(x: Sequence[int], y: Sequence[int]) -> Site:
    return tuple(a - b for a, b in zip(x, y))


def neg(x: Sequence[int]) -> Site:
    return tuple(-a for a in x)


def scale(k: int, x: Sequence[int]) -> Site:
    return tuple(k * a for a in x)


def origin(d: int) -> Site:
    return (0,) * d


def unit(d: int, axis: int, sign: int = 1) -> Site:
    """``sign * e_axis`` with a 1-based axis."""
    v = [0] * d
    v[axis - 1] = sign
    return tuple(v)


@dataclass(frozen=True, order=True)
class Direction:
    """One of the 2d lattice directions, ``sign * e_axis``."""

    axis: int
    sign: int = 1

    def __post_init__(self):
        if self.axis < 1 or self.sign not in (1, -1):
            raise ValueError(f"bad direction axis={self.axis} sign={self.sign}")

    def vector(self, d: int) -> Site:
        if self.axis > d:
            raise ValueError(f"axis {self.axis} exceeds dimension {d}")
        return unit(d, self.axis, self.sign)

    def __neg__(self) -> "Direction":
        return Direction(self.axis, -self.sign)

    @property
    def positive(self) -> bool:
        return self.sign > 0

    def __str__(self) -> str:
        return f"{'+' if self.sign > 0 else '-'}{self.axis}"

    @classmethod
    def parse(cls, text: str) -> "Direction":
        text = text.strip()
        if text[0] in "+-":
            return cls(int(text[1:]), 1 if text[0] == "+" else -1)
        return cls(int(text), 1)

    @classmethod
    def all(cls, d: int) -> list["Direction"]:
        return [cls(a, s) for a in range(1, d + 1) for s in (1, -1)]

    @classmethod
    def from_vector(cls, v: Sequence[int]) -> "Direction":
        nz = [(i, c) for i, c in enumerate(v) if c != 0]
        if len(nz) != 1 or abs(nz[0][1]) != 1:
            raise ValueError(f"{tuple(v)} is not a unit vector")
        return cls(nz[0][0] + 1, nz[0][1])


@dataclass(frozen=True)
class Domain:
    extent: tuple[int, ...]
    boundary: BoundaryMode = BoundaryMode.OCCUPIED

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(int(n) for n in self.extent))
        object.__setattr__(self, "boundary", BoundaryMode(self.boundary))
        if not self.extent or min(self.extent) < 1:
            raise ValueError(f"invalid extent {self.extent}")

    @classmethod
    def box(cls, L: int, d: int = 1, boundary: BoundaryMode | str = BoundaryMode.OCCUPIED) -> "Domain":
        return cls((L,) * d, BoundaryMode(boundary))

    @property
    def dim(self) -> int:
        return len(self.extent)

    @property
    def size(self) -> int:
        return int(np.prod(self.extent))

    @property
    def periodic(self) -> bool:
        return self.boundary is BoundaryMode.PERIODIC

    @property
    def fill(self) -> int | None:
        if self.boundary is BoundaryMode.EMPTY:
            return 0
        if self.boundary is BoundaryMode.OCCUPIED:
            return 1
        return None

    def with_boundary(self, boundary: BoundaryMode | str) -> "Domain":
        return Domain(self.extent, BoundaryMode(boundary))

    def sites(self) -> Iterator[Site]:
        return product(*(range(1, n + 1) for n in self.extent))

    def contains(self, x: Sequence[int]) -> bool:
        return all(1 <= c <= n for c, n in zip(x, self.extent))

    def wrap(self, x: Sequence[int]) -> Site:
        return tuple((c - 1) % n + 1 for c, n in zip(x, self.extent))

    def resolve(self, x: Sequence[int]) -> int | None:
        """Flat index of ``x``; ``None`` when it falls outside a non-periodic box."""
        if len(x) != self.dim:
            raise ValueError(f"site {tuple(x)} has wrong dimension for {self.extent}")
        idx = 0
        for c, n in zip(x, self.extent):
            if self.periodic:
                c = (c - 1) % n + 1
            elif not 1 <= c <= n:
                return None
            idx = idx * n + (c - 1)
        return idx

    def index(self, x: Sequence[int]) -> int:
        i = self.resolve(x)
        if i is None:
            raise DomainError(f"site {tuple(x)} outside box {self.extent}")
        return i

    def site(self, index: int) -> Site:
        coords = []
        for n in reversed(self.extent):
            index, r = divmod(index, n)
            coords.append(r + 1)
        return tuple(reversed(coords))

    def is_boundary(self, x: Sequence[int]) -> bool:
        """Membership in the inner boundary: some coordinate equals 1 or L."""
        return self.contains(x) and any(c == 1 or c == n for c, n in zip(x, self.extent))

    def boundary_sites(self) -> list[Site]:
        return [x for x in self.sites() if self.is_boundary(x)]

    def edges(self) -> list[tuple[int, int, int]]:
        """Nearest-neighbour bonds ``(i, j, axis)`` with ``j`` the ``+e_axis`` neighbour of ``i``."""
        out = []
        for i, x in enumerate(self.sites()):
            for a in range(1, self.dim + 1):
                y = add(x, unit(self.dim, a))
                j = self.resolve(y)
                if j is None or j == i:
                    continue
                out.append((i, j, a))
        return out


class Configuration:
    """Immutable occupancy vector on a :class:`Domain`."""

    __slots__ = ("domain", "_bits", "vacancy_count")

    def __init__(self, domain: Domain, bits: Iterable[int] | np.ndarray):
        arr = np.array(bits, dtype=np.uint8).reshape(-1)
        if arr.size != domain.size:
            raise ValueError(f"expected {domain.size} bits, got {arr.size}")
        if arr.size and arr.max() > 1:
            raise ValueError("occupancy bits must be 0 or 1")
        arr.setflags(write=False)
        self.domain = domain
        self._bits = arr
        self.vacancy_count = int(arr.size - int(arr.sum()))

    @classmethod
    def full(cls, domain: Domain) -> "Configuration":
        return cls(domain, np.ones(domain.size, np.uint8))

    @classmethod
    def empty(cls, domain: Domain) -> "Configuration":
        return cls(domain, np.zeros(domain.size, np.uint8))

    @classmethod
    def from_vacancies(cls, domain: Domain, vacancies: Iterable[Sequence[int]]) -> "Configuration":
        bits = np.ones(domain.size, np.uint8)
        for v in vacancies:
            bits[domain.index(tuple(v))] = 0
        return cls(domain, bits)

    @classmethod
    def from_string(cls, domain: Domain, text: str) -> "Configuration":
        return cls(domain, [int(ch) for ch in text if ch in "01"])

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    def read(self, x: Sequence[int]) -> int:
        i = self.domain.resolve(x)
        if i is None:
            return self.domain.fill
        return int(self._bits[i])

    __getitem__ = read

    def vacancies(self) -> list[Site]:
        return [self.domain.site(int(i)) for i in np.flatnonzero(self._bits == 0)]

    def exchange(self, x: Sequence[int], y: Sequence[int]) -> "Configuration":
        i, j = self.domain.index(x), self.domain.index(y)
        if i == j:
            raise ValueError("exchange needs two distinct sites")
        bits = self._bits.copy()
        bits[i], bits[j] = bits[j], bits[i]
        return Configuration(self.domain, bits)

    def flip(self, x: Sequence[int]) -> "Configuration":
        i = self.domain.index(x)
        bits = self._bits.copy()
        bits[i] ^= 1
        return Configuration(self.domain, bits)

    def apply_permutation(self, sigma: "FinitePermutation") -> "Configuration":
        """``(sigma eta)(y) = eta(sigma^{-1} y)``: the value at ``x`` moves to ``sigma(x)``."""
        bits = self._bits.copy()
        moves = [(self.domain.index(x), self.domain.index(y)) for x, y in sigma.items()]
        for i, j in moves:
            bits[j] = self._bits[i]
        return Configuration(self.domain, bits)

    def translate(self, z: Sequence[int]) -> "Configuration":
        """``tau_z eta`` on a torus, i.e. ``(tau_z eta)(y) = eta(y - z)``."""
        if not self.domain.periodic:
            raise DomainError("translation needs a periodic domain")
        grid = self._bits.reshape(self.domain.extent)
        return Configuration(self.domain, np.roll(grid, tuple(z), axis=tuple(range(self.domain.dim))))

    def __eq__(self, other) -> bool:
        return (isinstance(other, Configuration) and self.domain == other.domain
                and np.array_equal(self._bits, other._bits))

    def __hash__(self) -> int:
        return hash((self.domain, self._bits.tobytes()))

    def __repr__(self) -> str:
        if self.domain.dim == 1:
            return f"Configuration({''.join(map(str, self._bits))})"
        return f"Configuration(extent={self.domain.extent}, vacancies={self.vacancies()})"


def exchange(c: Configuration, x: Sequence[int], y: Sequence[int]) -> Configuration:
    return c.exchange(x, y)


def flip(c: Configuration, x: Sequence[int]) -> Configuration:
    return c.flip(x)


def apply_permutation(c: Configuration, sigma: "FinitePermutation") -> Configuration:
    return c.apply_permutation(sigma)


class FinitePermutation(Mapping):
    """Bijection of Z^d that moves only finitely many sites.

    Stored as the mapping restricted to its support (the moved sites).
    ``p.compose(q)`` is ``p o q``: apply ``q`` first.
    """

    __slots__ = ("_map", "_hash")

    def __init__(self, mapping: Mapping[Site, Site] | Iterable[tuple[Site, Site]] = ()):
        items = mapping.items() if isinstance(mapping, Mapping) else mapping
        m = {tuple(a): tuple(b) for a, b in items if tuple(a) != tuple(b)}
        if len(set(m.values())) != len(m) or set(m.values()) != set(m):
            raise ValueError("mapping is not a permutation of its support")
        self._map = m
        self._hash = None

    @classmethod
    def identity(cls) -> "FinitePermutation":
        return cls()

    @classmethod
    def transposition(cls, x: Sequence[int], y: Sequence[int]) -> "FinitePermutation":
        x, y = tuple(x), tuple(y)
        if x == y:
            raise ValueError("transposition needs two distinct sites")
        return cls({x: y, y: x})

    def __call__(self, x: Sequence[int]) -> Site:
        x = tuple(x)
        return self._map.get(x, x)

    def __getitem__(self, x) -> Site:
        return self._map[tuple(x)]

    def __iter__(self):
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    @property
    def support(self) -> frozenset[Site]:
        return frozenset(self._map)

    def is_identity(self) -> bool:
        return not self._map

    def compose(self, other: "FinitePermutation") -> "FinitePermutation":
        keys = set(self._map) | set(other._map)
        return FinitePermutation({x: self(other(x)) for x in keys})

    __matmul__ = compose

    def inverse(self) -> "FinitePermutation":
        return FinitePermutation({y: x for x, y in self._map.items()})

    def translate(self, z: Sequence[int]) -> "FinitePermutation":
        """Conjugate by the shift ``x -> x + z``."""
        return FinitePermutation({add(x, z): add(y, z) for x, y in self._map.items()})

    def image(self, sites: Iterable[Sequence[int]]) -> frozenset[Site]:
        return frozenset(self(x) for x in sites)

    def cycles(self) -> list[tuple[Site, ...]]:
        seen, out = set(), []
        for start in sorted(self._map):
            if start in seen:
                continue
            cyc = [start]
            seen.add(start)
            y = self._map[start]
            while y != start:
                cyc.append(y)
                seen.add(y)
                y = self._map[y]
            out.append(tuple(cyc))
        return out

    def __eq__(self, other) -> bool:
        if isinstance(other, FinitePermutation):
            return self._map == other._map
        return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self._map.items()))
        return self._hash

    def __repr__(self) -> str:
        if not self._map:
            return "FinitePermutation(id)"
        fmt = (lambda s: str(s[0])) if len(next(iter(self._map))) == 1 else str
        return "FinitePermutation(" + "".join(
            "(" + ",".join(fmt(s) for s in c) + ")" for c in self.cycles()) + ")"


def cycle_from_sites(sites: Sequence[Sequence[int]]) -> FinitePermutation:
    """The cycle ``x_1 -> x_2 -> ... -> x_n -> x_1``."""
    pts = [tuple(s) for s in sites]
    if len(pts) < 2:
        raise ValueError("a cycle needs at least two sites")
    if len(set(pts)) != len(pts):
        raise ValueError(f"duplicate sites in cycle {pts}")
    return FinitePermutation({pts[k]: pts[(k + 1) % len(pts)] for k in range(len(pts))})


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Generator for ``(seed, stream)``; distinct streams are independent."""
    if stream is None:
        return np.random.default_rng(np.random.SeedSequence(seed))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def sample_equilibrium(domain: Domain, q: float, seed: int | np.random.Generator) -> Configuration:
    """Product measure: each site empty with probability ``q``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q={q} outside [0,1]")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return Configuration(domain, (rng.random(domain.size) >= q).astype(np.uint8))


def sample_fixed_vacancies(domain: Domain, k: int, seed: int | np.random.Generator) -> Configuration:
    """Uniform configuration with exactly ``k`` vacancies."""
    if not 0 <= k <= domain.size:
        raise ValueError(f"k={k} outside [0, {domain.size}]")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    bits = np.ones(domain.size, np.uint8)
    bits[rng.choice(domain.size, size=k, replace=False)] = 0
    return Configuration(domain, bits)
