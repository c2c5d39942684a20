"""Measure representations of evolving genealogies, their structural
checks, and MRCA / moment statistics."""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from typing import Iterable, Iterator, Sequence

import numba
import numpy as np

from .coalescent import from_event_log
from .moran import EventLog, ancestor_map
from .umm import NO_MARK, AtomicMeasure

MASS_TOL = 1e-12


def anchor_rng(seed: int, anchor: float) -> np.random.Generator:
    """Label stream for one anchor time; distinct anchors get distinct streams."""
    key = struct.unpack("<Q", struct.pack("<d", float(anchor)))[0]
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))


class AtomicMeasurePath:
    """Right-continuous path h -> X_h of atomic measures on [0,1] x G.

    Either explicit (a list of (h, measure) steps) or backed by an event
    log, in which case measures are materialized on demand from the
    time-anchor ancestor of every individual and its current site.
    """

    def __init__(self, anchor: float, labels: np.ndarray, steps: Sequence | None = None, *,
                 log: EventLog | None = None):
        self.anchor = float(anchor)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.labels.setflags(write=False)
        self.log = log
        if steps is not None:
            hs = np.array([float(h) for h, _ in steps])
            if hs.size == 0 or hs[0] != 0.0 or np.any(np.diff(hs) <= 0):
                raise ValueError("step times must start at 0 and increase")
            self._steps = [(float(h), m) for h, m in steps]
            self.times = hs
        else:
            if log is None:
                raise ValueError("need explicit steps or an event log")
            self._steps = None
            self._lo, self._hi = log.window(self.anchor, log.end_time)
            self._sites0 = log.sites_at(self.anchor)
            self.times = np.concatenate([[0.0], log.times[self._lo:self._hi] - self.anchor])
        self.times.setflags(write=False)

    def __len__(self):
        return self.times.size

    @property
    def horizon(self) -> float:
        if self.log is not None:
            return self.log.end_time - self.anchor
        return float(self.times[-1])

    def _measure(self, types, sites) -> AtomicMeasure:
        V = self.log.n_sites
        counts = np.bincount(sites, minlength=V)
        key, mult = np.unique(types * V + sites, return_counts=True)
        ty, g = key // V, key % V
        return AtomicMeasure(self.labels[ty], mult / counts[g], g)

    def _replay(self) -> Iterator[tuple[float, AtomicMeasure]]:
        log = self.log
        types = np.arange(log.n)
        sites = self._sites0.copy()
        yield 0.0, self._measure(types, sites)
        for k, e in enumerate(range(self._lo, self._hi)):
            if log.kinds[e] == 0:
                types[log.b[e]] = types[log.a[e]]
            else:
                sites[log.a[e]] = log.b[e]
            yield float(self.times[k + 1]), self._measure(types, sites)

    def __iter__(self) -> Iterator[tuple[float, AtomicMeasure]]:
        if self._steps is not None:
            return iter(self._steps)
        return self._replay()

    def at(self, h: float) -> AtomicMeasure:
        if h < 0:
            raise ValueError("h must be nonnegative")
        if self._steps is not None:
            k = int(np.searchsorted(self.times, h, side="right")) - 1
            return self._steps[k][1]
        log = self.log
        t = self.anchor + h
        log.check_time(t)
        types = ancestor_map(log, t, self.anchor)
        return self._measure(types, log.sites_at(t))

    def write_jsonl(self, path, seed=None):
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "anchor": self.anchor, "seed": seed}) + "\n")
            for h, m in self:
                fh.write(json.dumps({"h": h, "atoms": m.to_list()}) + "\n")


def build_measure_representation(log: EventLog, T: float, seed: int = 0) -> AtomicMeasurePath:
    """X_h(. x {g}) = sum_i mu_{T+h}(D_{T,T+h}(i) x {g}) delta_{V_i} with
    i.i.d. uniform labels V_i drawn once for the anchor T."""
    log.check_time(T)
    labels = anchor_rng(seed, T).random(log.n)
    if np.unique(labels).size != labels.size:
        raise RuntimeError("label collision; rerun with another seed")
    return AtomicMeasurePath(T, labels, log=log)


# --------------------------------------------------------------------------
# structural checks


@dataclasses.dataclass(frozen=True)
class SmrReport:
    passed: bool
    violation: str | None = None
    h: float | None = None
    detail: str = ""

    def __bool__(self):
        return self.passed


def check_smr(path: AtomicMeasurePath, log: EventLog | None = None) -> SmrReport:
    """Support nesting, pure atomicity and mass conservation along the
    path.  Mass is compared per mark slice: a slice keeps its mass while it
    is nonempty (unmarked paths have a single slice).  If the path comes
    from a log (or one is given), the atom count is also compared with the
    block count of the coalescent anchored at T + h, at every step."""
    log = log if log is not None else path.log
    prev_support = None
    slice_mass: dict[int, float] = {}
    own = log is not None and log is path.log
    for k, (h, m) in enumerate(path):
        if m.points.size == 0:
            return SmrReport(False, "pure-atomicity", h, "empty measure")
        if (np.any(~np.isfinite(m.masses)) or np.any(m.masses <= 0)
                or np.any((m.points < 0) | (m.points > 1))):
            return SmrReport(False, "pure-atomicity", h, "atoms must have positive mass on [0,1]")
        support = set(m.support().tolist())
        if prev_support is not None and not support <= prev_support:
            return SmrReport(False, "support-nesting", h,
                             f"new atoms {sorted(support - prev_support)[:3]}")
        prev_support = support
        for g, w in m.mark_totals().items():
            ref = slice_mass.setdefault(g, w)
            if abs(w - ref) > MASS_TOL * max(1.0, abs(ref)):
                return SmrReport(False, "mass-conservation", h,
                                 f"mark {g}: mass {w!r} != {ref!r}")
        if log is not None:
            # anchor + h can round below the event time that created step k
            t = float(log.times[path._lo + k - 1]) if own and k else path.anchor + h
            n_blocks = from_event_log(log, t).n_blocks_at(t - path.anchor)
            if n_blocks != len(support):
                return SmrReport(False, "atom-count", h, f"{len(support)} atoms vs {n_blocks} blocks")
    return SmrReport(True)


def push_forward(mu: AtomicMeasure, mapping: dict[float, float]) -> AtomicMeasure:
    """Image of mu under a map of atom labels (marks kept)."""
    return AtomicMeasure([mapping[x] for x in mu.points], mu.masses, mu.marks)


# --------------------------------------------------------------------------
# statistics


@numba.njit(cache=True)
def _anchored_scan(kinds, a, b, lo, hi, times, anchor, sites, n_sites, family, n_fam, grid):
    """Forward pass from the anchor: at each grid time record
    sum_f (sum over individuals of family f of 1/m_site)^2 and the
    number of atoms; also return the fixation time (h) or -1."""
    n = sites.shape[0]
    types = np.arange(n)
    tcount = np.ones(n, dtype=np.int64)
    n_types = n
    counts = np.zeros(n_sites, dtype=np.int64)
    for i in range(n):
        counts[sites[i]] += 1
    out_sq = np.zeros(grid.shape[0])
    out_atoms = np.zeros(grid.shape[0], dtype=np.int64)
    y = np.zeros(n_fam)
    fix = -1.0 if n > 1 else 0.0
    gk = 0
    e = lo
    while gk < grid.shape[0]:
        t_next = times[e] if e < hi else np.inf
        while gk < grid.shape[0] and anchor + grid[gk] < t_next:
            y[:] = 0.0
            for i in range(n):
                y[family[types[i]]] += 1.0 / counts[sites[i]]
            s = 0.0
            for f in range(n_fam):
                s += y[f] * y[f]
            out_sq[gk] = s
            out_atoms[gk] = n_types
            gk += 1
        if e >= hi:
            break
        if kinds[e] == 0:
            src = types[a[e]]
            dst = types[b[e]]
            if src != dst:
                tcount[dst] -= 1
                if tcount[dst] == 0:
                    n_types -= 1
                tcount[src] += 1
                types[b[e]] = src
                if n_types == 1 and fix < 0:
                    fix = times[e] - anchor
        else:
            counts[sites[a[e]]] -= 1
            sites[a[e]] = b[e]
            counts[b[e]] += 1
        e += 1
    # fixation after the last grid point
    while fix < 0 and e < hi:
        if kinds[e] == 0:
            src = types[a[e]]
            dst = types[b[e]]
            if src != dst:
                tcount[dst] -= 1
                if tcount[dst] == 0:
                    n_types -= 1
                tcount[src] += 1
                types[b[e]] = src
                if n_types == 1:
                    fix = times[e] - anchor
        e += 1
    return out_sq, out_atoms, fix


@dataclasses.dataclass(frozen=True)
class AnchoredStats:
    grid: np.ndarray
    square_sums: np.ndarray   # sum over atoms of theta(X_h)({x})^2
    atoms: np.ndarray         # number of atoms of X_h
    mrca: float | None


def anchored_stats(log: EventLog, T: float, grid, families=None) -> AnchoredStats:
    """Grid functionals of the representation anchored at T, in one
    forward pass.  ``families`` maps each time-T individual to a family
    index (default: every individual its own family).  Grid points beyond
    the end of the log raise."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size and (np.any(np.diff(grid) < 0) or grid[0] < 0):
        raise ValueError("grid must be nondecreasing and nonnegative")
    log.check_time(T)
    if grid.size:
        log.check_time(T + grid[-1])
    fam = np.arange(log.n) if families is None else np.asarray(families, dtype=np.int64)
    lo, hi = log.window(T, log.end_time)
    sq, atoms, fix = _anchored_scan(log.kinds, log.a, log.b, lo, hi, log.times, float(T),
                                    log.sites_at(T), log.n_sites, fam, int(fam.max()) + 1, grid)
    return AnchoredStats(grid, sq / log.n_sites ** 2, atoms, None if fix < 0 else float(fix))


def mrca_time(path: AtomicMeasurePath) -> float | None:
    """First h at which X_h (marks summed) is a single atom; None if the
    path ends first."""
    if path.log is not None:
        return anchored_stats(path.log, path.anchor, []).mrca
    for h, m in path:
        if m.support().size == 1:
            return h
    return None


def pair_distance_moment(paths: Iterable[AtomicMeasurePath], h: float, families=None) -> float:
    """Replicate mean of sum_x theta(X_h)({x})^2.  ``families`` optionally
    groups time-anchor individuals (log-backed paths) into families."""
    vals = []
    for p in paths:
        if p.log is not None:
            vals.append(anchored_stats(p.log, p.anchor, [h], families).square_sums[0])
        else:
            m = p.at(h).projected()
            n_sites = max(1, len(set(p.at(0.0).marks.tolist()) - {NO_MARK}))
            vals.append(math.fsum((m.masses / n_sites) ** 2))
    if not vals:
        raise ValueError("need at least one replicate")
    return float(np.mean(vals))


def wf_absorption_expectation(n: int) -> float:
    """-2 C(n, n-1) (n-1)/n log((n-1)/n), simplified to -2 (n-1) log(1 - 1/n)."""
    if n < 2:
        raise ValueError("n must be at least 2")
    return -2.0 * (n - 1) * math.log1p(-1.0 / n)
