"""Rejection-free kinetic Monte Carlo with tracer tracking and time-series observables."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lattice import Configuration, Domain, Site, make_rng
from .models import ConstraintModel, bond_table


class Fenwick:
    """Binary indexed tree over nonnegative weights with prefix search."""

    def __init__(self, weights: np.ndarray):
        self.n = len(weights)
        self.w = np.zeros(self.n)
        self.tree = np.zeros(self.n + 1)
        self.w[:] = weights
        self.size_pow = 1 << max(0, (self.n).bit_length() - 1) if self.n else 0
        self.updates = 0
        self.rebuild()

    def rebuild(self):
        """Recompute the tree from the stored weights, clearing accumulated round-off."""
        self.tree[:] = 0.0
        self.tree[1:] = self.w
        for k in range(1, self.n + 1):
            parent = k + (k & -k)
            if parent <= self.n:
                self.tree[parent] += self.tree[k]

    def update(self, i: int, value: float):
        delta = value - self.w[i]
        if delta == 0:
            return
        self.w[i] = value
        k = i + 1
        while k <= self.n:
            self.tree[k] += delta
            k += k & -k
        self.updates += 1
        if self.updates % 65536 == 0:
            self.rebuild()

    @property
    def total(self) -> float:
        s, k = 0.0, self.n
        while k > 0:
            s += self.tree[k]
            k -= k & -k
        if s < 1e-9:
            return float(self.w.sum())
        return s

    def find(self, target: float) -> int:
        """Smallest index whose prefix sum exceeds ``target``."""
        pos, step = 0, self.size_pow
        while step:
            nxt = pos + step
            if nxt <= self.n and self.tree[nxt] <= target:
                pos = nxt
                target -= self.tree[nxt]
            step >>= 1
        return min(pos, self.n - 1)


@dataclass
class Event:
    kind: str  # "exchange" or "flip"
    sites: tuple[int, ...]
    time: float


class KMC:
    """Gillespie dynamics for a constraint model on a finite domain.

    Active events are bonds joining a particle and a vacancy with positive
    rate, plus boundary flips when ``reservoir_q`` is given.
    """

    def __init__(self, m: ConstraintModel, c: Configuration, seed: int = 0, reservoir_q: float | None = None,
                 tracer: Site | None = None, debug: bool = False, stream: int | None = None):
        self.model = m
        self.domain = c.domain
        self.table = bond_table(m, c.domain)
        self.bits = c.bits.copy()
        self.rng = make_rng(seed, stream)
        self.time = 0.0
        self.events = 0
        self.q = reservoir_q
        self.debug = debug
        self.flip_sites = [self.domain.index(x) for x in self.domain.boundary_sites()] if reservoir_q is not None else []
        if reservoir_q is not None and not 0 <= reservoir_q <= 1:
            raise ValueError("reservoir q must lie in [0,1]")
        if tracer is not None:
            if reservoir_q is not None:
                raise ValueError("tracers are tracked in closed or periodic systems only")
            k = self.domain.index(tracer)
            if self.bits[k] != 1:
                raise ValueError("the tracer must sit on an occupied site")
            self.tracer = k
            self.displacement = np.zeros(self.domain.dim, np.int64)
        else:
            self.tracer = None
            self.displacement = None
        nb = len(self.table)
        self.nb = nb
        affected: list[set] = [set() for _ in range(self.domain.size)]
        for b in range(nb):
            for k in self.table.reading_sites(b):
                affected[k].add(b)
        for f, k in enumerate(self.flip_sites):
            affected[k].add(nb + f)
        self.affected = [sorted(a) for a in affected]
        self.tree = Fenwick(self._all_rates())

    def _rate(self, ev: int) -> float:
        if ev < self.nb:
            i, j = self.table.i[ev], self.table.j[ev]
            if self.bits[i] == self.bits[j]:
                return 0.0
            return self.table.rate(self.bits, ev)
        k = self.flip_sites[ev - self.nb]
        return self.q if self.bits[k] else 1.0 - self.q

    def _all_rates(self) -> np.ndarray:
        ex = self.table.all_rates(self.bits) * (self.bits[self.table.i] != self.bits[self.table.j])
        occ = self.bits[np.asarray(self.flip_sites, np.int64)] if self.flip_sites else np.zeros(0)
        fl = np.where(occ == 1, self.q, 1.0 - self.q) if self.flip_sites else np.zeros(0)
        return np.concatenate([ex, fl])

    @property
    def total_rate(self) -> float:
        return self.tree.total

    @property
    def blocked(self) -> bool:
        return self.total_rate <= 1e-300

    def configuration(self) -> Configuration:
        return Configuration(self.domain, self.bits)

    def active_events(self) -> dict[tuple, float]:
        """Map from the resulting configuration change to its rate."""
        out = {}
        for e in range(self.nb + len(self.flip_sites)):
            r = self.tree.w[e]
            if r > 0:
                key = (int(self.table.i[e]), int(self.table.j[e])) if e < self.nb else (self.flip_sites[e - self.nb],)
                out[key] = out.get(key, 0.0) + r
        return out

    def check_rates(self) -> float:
        """Largest difference between the incremental rates and a full rebuild."""
        return float(np.abs(self._all_rates() - self.tree.w).max(initial=0.0))

    def step(self) -> Event | None:
        total = self.tree.total
        if total <= 1e-300:
            return None
        self.time += self.rng.exponential(1.0 / total)
        return self._fire(total)

    def advance_to(self, t: float, max_events: int | None = None) -> bool:
        """Run until time ``t``; returns False if blocked or the event cap was hit first.

        A waiting time that overshoots ``t`` is discarded, which is exact by
        memorylessness of the exponential clock.
        """
        while True:
            total = self.tree.total
            if total <= 1e-300:
                return False
            if max_events is not None and self.events >= max_events:
                return False
            dt = self.rng.exponential(1.0 / total)
            if self.time + dt > t:
                self.time = t
                return True
            self.time += dt
            self._fire(total)

    def _fire(self, total: float) -> Event:
        ev = self.tree.find(self.rng.random() * total)
        while self.tree.w[ev] <= 0:  # guard against round-off at the edges
            ev = self.tree.find(self.rng.random() * total)
        if ev < self.nb:
            i, j = int(self.table.i[ev]), int(self.table.j[ev])
            self.bits[i], self.bits[j] = self.bits[j], self.bits[i]
            changed = (i, j)
            if self.tracer is not None and self.tracer in changed:
                other = j if self.tracer == i else i
                self.displacement[int(self.table.axis[ev]) - 1] += 1 if other == j else -1
                self.tracer = other
            out = Event("exchange", changed, self.time)
        else:
            k = self.flip_sites[ev - self.nb]
            self.bits[k] ^= 1
            changed = (k,)
            out = Event("flip", changed, self.time)
        touched = set()
        for k in changed:
            touched.update(self.affected[k])
        for e in touched:
            self.tree.update(e, self._rate(e))
        self.events += 1
        if self.debug:
            err = self.check_rates()
            if err > 1e-12:
                raise AssertionError(f"incremental rates drifted by {err}")
        return out


@dataclass
class TimeSeries:
    name: str
    times: np.ndarray
    values: np.ndarray
    provenance: dict = field(default_factory=dict)
    truncated: bool = False
    stderr: np.ndarray | None = None


def run(sim: KMC, t_max: float, observables: dict[str, Callable[[np.ndarray], float]],
        schedule: Sequence[float], max_events: int | None = None) -> dict[str, TimeSeries]:
    """Advance ``sim`` and record observables of the occupation array at the schedule times.

    If the dynamics blocks, recording stops and the series is flagged as truncated.
    """
    schedule = np.asarray(schedule, float)
    if len(schedule) and (np.any(np.diff(schedule) <= 0) or schedule[-1] > t_max or schedule[0] < sim.time):
        raise ValueError("schedule must be strictly increasing within [now, t_max]")
    rec = {k: [] for k in observables}
    truncated = False
    for t in schedule:
        if not sim.advance_to(t, max_events):
            truncated = True
            break
        for k, f in observables.items():
            rec[k].append(f(sim.bits))
    n = len(next(iter(rec.values()))) if rec else 0
    prov = {"model": sim.model.digest(), "extent": list(sim.domain.extent), "boundary": sim.domain.boundary.value,
            "q": sim.q, "tMax": t_max, "events": sim.events}
    return {k: TimeSeries(k, schedule[:n].copy(), np.asarray(v, float), prov, truncated) for k, v in rec.items()}


def run_events(sim: KMC, n_events: int) -> int:
    """Perform up to ``n_events`` events; returns how many happened."""
    done = 0
    while done < n_events and sim.step() is not None:
        done += 1
    return done


# ------------------------------------------------------------ tracers

@dataclass
class MSDResult:
    times: np.ndarray
    msd_u: np.ndarray
    msd: np.ndarray
    stderr_u: np.ndarray
    replicas: int
    moved: int
    provenance: dict

    def diffusion_estimate(self) -> tuple[float, float]:
        """``MSD_u(t)/(2t)`` at the last time and its standard error."""
        t = self.times[-1]
        return float(self.msd_u[-1] / (2 * t)), float(self.stderr_u[-1] / (2 * t))


class _FastPermutationTracer:
    """Apply tracer-frame permutations in place on a torus occupation array."""

    def __init__(self, dyn, domain: Domain):
        self.dyn = dyn
        self.domain = domain
        self.shape = domain.extent
        d = domain.dim
        self.moves = []
        for g in dyn.generators:
            pairs = [(x, g.sigma(x)) for x in g.sigma.support]
            src = np.array([p[0] for p in pairs])
            dst = np.array([p[1] for p in pairs])
            clauses = [(np.array(sorted(cl)), w) for cl, w in g.clauses]
            self.moves.append((g, src, dst, np.asarray(g.jump(d)), clauses))

    def rates(self, grid: np.ndarray, z: np.ndarray) -> np.ndarray:
        out = np.zeros(len(self.moves))
        L = np.asarray(self.shape)
        for k, (g, _, _, _, clauses) in enumerate(self.moves):
            tot = 0.0
            for sites, w in clauses:
                idx = tuple(((sites + z) % L).T)
                if not grid[idx].any():
                    if g.indicator:
                        tot = 1.0
                        break
                    tot += w
            out[k] = tot
        return out

    def apply(self, grid: np.ndarray, z: np.ndarray, k: int) -> np.ndarray:
        _, src, dst, jump, _ = self.moves[k]
        L = np.asarray(self.shape)
        s = tuple(((src + z) % L).T)
        t = tuple(((dst + z) % L).T)
        vals = grid[s].copy()
        grid[t] = vals
        return jump


def tracer_run(dyn, L: int, q: float, t_max: float, seed: int = 0, replicas: int = 100,
               schedule: Sequence[float] | None = None, u: Sequence[float] | None = None,
               initial: Callable[[np.random.Generator], np.ndarray] | None = None) -> MSDResult:
    """Tracer mean-square displacement on an ``L^d`` torus, averaged over replicas.

    Each replica draws a product configuration with an occupied tracer site
    and simulates the tracer dynamics exactly (rejection-free).
    """
    from .selfdiff import KCTracerDynamics

    d = dyn.dim
    u = np.asarray(u if u is not None else np.eye(d)[0], float)
    schedule = np.asarray(schedule if schedule is not None else np.linspace(t_max / 10, t_max, 10), float)
    dom = Domain.box(L, d, "periodic")
    disp_u = np.zeros((replicas, len(schedule)))
    disp2 = np.zeros((replicas, len(schedule)))
    moved = 0
    fast = None if isinstance(dyn, KCTracerDynamics) else _FastPermutationTracer(dyn, dom)
    for r in range(replicas):
        rng = make_rng(seed, r)
        grid = (rng.random(dom.extent) >= q).astype(np.uint8) if initial is None else initial(rng)
        z0 = np.zeros(d, np.int64)
        grid[tuple(z0)] = 1
        if fast is None:
            traj = _kc_tracer_path(dyn.model, dom, grid, schedule, rng, seed, r)
        else:
            traj = _perm_tracer_path(fast, grid, schedule, rng)
        if np.any(traj != 0):
            moved += 1
        disp_u[r] = traj @ u
        disp2[r] = (traj ** 2).sum(axis=1)
    msd_u = (disp_u ** 2).mean(axis=0)
    se = (disp_u ** 2).std(axis=0, ddof=1) / np.sqrt(replicas) if replicas > 1 else np.zeros(len(schedule))
    prov = {"dynamics": dyn.name, "L": L, "q": q, "tMax": t_max, "seed": seed, "replicas": replicas}
    return MSDResult(schedule, msd_u, disp2.mean(axis=0), se, replicas, moved, prov)


def _perm_tracer_path(fast: _FastPermutationTracer, grid: np.ndarray, schedule, rng) -> np.ndarray:
    d = grid.ndim
    z = np.zeros(d, np.int64)
    disp = np.zeros(d, np.int64)
    out = np.zeros((len(schedule), d))
    t = 0.0
    si = 0
    rates = fast.rates(grid, z)
    while si < len(schedule):
        total = rates.sum()
        if total <= 0:
            out[si:] = disp
            break
        t += rng.exponential(1.0 / total)
        while si < len(schedule) and schedule[si] < t:
            out[si] = disp
            si += 1
        if si >= len(schedule):
            break
        k = int(np.searchsorted(np.cumsum(rates), rng.random() * total, side="right"))
        k = min(k, len(rates) - 1)
        jump = fast.apply(grid, z, k)
        disp += jump
        z = (z + jump) % np.asarray(grid.shape)
        rates = fast.rates(grid, z)
    return out


def _kc_tracer_path(m: ConstraintModel, dom: Domain, grid: np.ndarray, schedule, rng, seed, r) -> np.ndarray:
    sim = KMC(m, Configuration(dom, grid.reshape(-1)), seed=seed, stream=r, tracer=(1,) * dom.dim)
    sim.rng = rng
    out = np.zeros((len(schedule), dom.dim))
    for si, t in enumerate(schedule):
        sim.advance_to(t)
        out[si] = sim.displacement
    return out


# ------------------------------------------------------------ correlations

@dataclass
class AutocorrelationResult:
    lags: np.ndarray
    acf: np.ndarray
    rate: float
    tau: float
    band: tuple[float, float]
    degenerate: bool = False
    warning: str | None = None


def autocorrelation(values: Sequence[float], dt: float, max_lag: int | None = None,
                    floor: float = 0.05) -> AutocorrelationResult:
    """Empirical autocorrelation and a fitted exponential decay rate.

    The fit is a least-squares line through ``log acf`` over the lags before
    it first drops below ``floor``.
    """
    x = np.asarray(values, float)
    n = len(x)
    if n < 3:
        return AutocorrelationResult(np.zeros(0), np.zeros(0), float("nan"), float("nan"), (np.nan, np.nan),
                                     True, "too few samples")
    x = x - x.mean()
    var = float(x @ x) / n
    if var <= 1e-14 * max(1.0, float(np.abs(values).max())) ** 2:
        return AutocorrelationResult(np.zeros(0), np.zeros(0), float("nan"), float("nan"), (np.nan, np.nan),
                                     True, "constant observable")
    max_lag = max_lag or n // 4
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:max_lag + 1] / np.arange(n, n - max_lag - 1, -1)
    acf = acov / acov[0]
    lags = np.arange(max_lag + 1) * dt
    below = np.flatnonzero(acf < floor)
    cut = int(below[0]) if len(below) else len(acf)
    warning = None
    if cut < 2:
        rate = -np.log(max(acf[1], 1e-12)) / dt
        return AutocorrelationResult(lags, acf, float(rate), float(1 / rate), (0.0, float(dt)), False,
                                     "decorrelates within one sampling interval")
    yy = np.log(acf[:cut])
    xx = lags[:cut]
    A = np.vstack([xx, np.ones_like(xx)]).T
    coef, res, *_ = np.linalg.lstsq(A, yy, rcond=None)
    slope = -coef[0]
    if cut > 2:
        resid = yy - A @ coef
        s2 = float(resid @ resid) / (cut - 2)
        se = np.sqrt(s2 / float(((xx - xx.mean()) ** 2).sum()))
    else:
        se = abs(slope)
    if n * dt < 20 / max(slope, 1e-12):
        warning = "short series relative to the fitted time; wide band"
    lo, hi = slope - 2 * se, slope + 2 * se
    band = (1 / hi if hi > 0 else float("inf"), 1 / lo if lo > 0 else float("inf"))
    return AutocorrelationResult(lags, acf, float(slope), float(1 / slope), band, False, warning)


# ------------------------------------------------------------ output

def series_csv(series: dict[str, TimeSeries], provenance: dict) -> str:
    buf = io.StringIO()
    buf.write("# " + json.dumps(provenance, sort_keys=True, default=str) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    names = list(series)
    w.writerow(["t"] + names)
    if names:
        ts = series[names[0]].times
        for k, t in enumerate(ts):
            w.writerow([repr(float(t))] + [repr(float(series[n].values[k])) for n in names])
    return buf.getvalue()


def transition_counts(sim: KMC, n_events: int) -> dict[tuple[int, int], int]:
    """Counts of (state before, state after) over a run, states encoded as integers."""
    counts: dict[tuple[int, int], int] = {}
    weights = 1 << np.arange(len(sim.bits), dtype=np.int64)
    s = int(sim.bits.astype(np.int64) @ weights)
    for _ in range(n_events):
        if sim.step() is None:
            break
        t = int(sim.bits.astype(np.int64) @ weights)
        counts[(s, t)] = counts.get((s, t), 0) + 1
        s = t
    return counts


def chi_square_transitions(counts: dict[tuple[int, int], int], R, min_expected: float = 5.0) -> tuple[float, int, float]:
    """Pearson test of observed jump destinations against the embedded chain of ``R``.

    Cells with small expected counts are pooled per source state.
    Returns ``(statistic, degrees of freedom, p-value)``.
    """
    from scipy.stats import chi2

    Q = R.Q.tocsr()
    by_src: dict[int, dict[int, int]] = {}
    for (s, t), n in counts.items():
        by_src.setdefault(s, {})[t] = by_src.setdefault(s, {}).get(t, 0) + n
    stat, dof = 0.0, 0
    for s, row in by_src.items():
        i = int(R.space.index(np.array([s]))[0])
        if i < 0:
            raise ValueError(f"state {s} is not in the state space")
        lo, hi = Q.indptr[i], Q.indptr[i + 1]
        cols, vals = Q.indices[lo:hi], Q.data[lo:hi]
        keep = (cols != i) & (vals > 0)
        cols, vals = cols[keep], vals[keep]
        targets = R.space.states[cols]
        unknown = set(row) - set(int(t) for t in targets)
        if unknown:
            raise ValueError(f"observed transition {s} -> {min(unknown)} has zero rate")
        n = sum(row.values())
        exp = n * vals / vals.sum()
        obs = np.array([row.get(int(t), 0) for t in targets], float)
        big = exp >= min_expected
        cells_o = list(obs[big])
        cells_e = list(exp[big])
        if (~big).any():
            cells_o.append(obs[~big].sum())
            cells_e.append(exp[~big].sum())
        if len(cells_e) < 2:
            continue
        cells_o, cells_e = np.array(cells_o), np.array(cells_e)
        stat += float(((cells_o - cells_e) ** 2 / cells_e).sum())
        dof += len(cells_e) - 1
    p = float(chi2.sf(stat, dof)) if dof else 1.0
    return stat, dof, p
