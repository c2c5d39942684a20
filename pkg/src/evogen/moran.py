"""Forward simulation of the interacting Moran model through its graphical
construction, and genealogies read off the resulting event log."""
from __future__ import annotations

import dataclasses
import json
import math

import numba
import numpy as np

from .geo import GeoTorus, MigrationKernel, move_table, wrapped_row
from .umm import AtomicUMM

RES, MIG = 0, 1
NO_EVENT = -1
DEFAULT_EVENT_BUDGET = 10 ** 8

_UNIFORMS_PER_EVENT = 4
_CHUNK_EVENTS = 1 << 18

# kernel exit codes
_DONE, _NEED_UNIFORMS, _BUFFER_FULL, _FIXED = 0, 1, 2, 3


def replicate_rng(seed: int, replicate: int = 0) -> np.random.Generator:
    """Independent stream for one replicate, derived from (seed, replicate)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(replicate),))
    return np.random.Generator(np.random.PCG64(ss))


@dataclasses.dataclass(frozen=True)
class MoranConfig:
    torus: GeoTorus
    per_site_scale: int
    gamma: float
    kernel: MigrationKernel
    horizon: float
    seed: int = 0

    def __post_init__(self):
        if self.per_site_scale < 1:
            raise ValueError("per-site scale must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.kernel.d != self.torus.d:
            raise ValueError("kernel and torus dimensions differ")

    @property
    def n(self) -> int:
        return self.per_site_scale * self.torus.size

    def to_dict(self) -> dict:
        return {"torus": self.torus.to_json(), "per_site_scale": self.per_site_scale,
                "gamma": self.gamma, "kernel": self.kernel.to_dict(),
                "horizon": self.horizon, "seed": self.seed}

    @classmethod
    def from_dict(cls, obj: dict) -> "MoranConfig":
        torus = GeoTorus(**obj["torus"])
        kernel = (MigrationKernel.from_dict(obj["kernel"]) if "kernel" in obj
                  else MigrationKernel.simple(torus.d))
        return cls(torus, int(obj["per_site_scale"]), float(obj["gamma"]), kernel,
                   float(obj["horizon"]), int(obj.get("seed", 0)))


@dataclasses.dataclass(frozen=True, eq=False)
class EventLog:
    """All randomness of one forward run.

    Event ``e`` (its tick) happens at ``times[e]``.  For a resampling event
    ``a -> b`` individual ``b`` is replaced by an offspring of ``a`` at
    site ``c``; for a migration ``a`` jumps from site ``c`` to ``b``.
    Individuals' sites are right-continuous in time.
    """

    n: int
    n_sites: int
    initial_sites: np.ndarray
    times: np.ndarray
    kinds: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    end_time: float
    gamma: float = float("nan")
    seed: int | None = None
    truncated: bool = False
    fixation_time: float | None = None

    def __post_init__(self):
        for name in ("initial_sites", "times", "kinds", "a", "b", "c"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_events(self) -> int:
        return self.times.size

    @property
    def ticks(self) -> np.ndarray:
        return np.arange(self.n_events, dtype=np.int64)

    @property
    def resampling(self) -> np.ndarray:
        """Rows (tick, source, target) of the resampling events."""
        sel = self.kinds == RES
        return np.stack([self.ticks[sel], self.a[sel], self.b[sel]], axis=1)

    @property
    def migration(self) -> np.ndarray:
        """Rows (tick, individual, new site) of the migration events."""
        sel = self.kinds == MIG
        return np.stack([self.ticks[sel], self.a[sel], self.b[sel]], axis=1)

    def window(self, lo: float, hi: float) -> tuple[int, int]:
        """Tick range of events with lo < time <= hi."""
        return (int(np.searchsorted(self.times, lo, side="right")),
                int(np.searchsorted(self.times, hi, side="right")))

    def check_time(self, *ts: float):
        for t in ts:
            if not (0.0 <= t <= self.end_time):
                raise ValueError(f"time {t} outside [0, {self.end_time}]")

    def sites_at(self, t: float) -> np.ndarray:
        self.check_time(t)
        _, hi = self.window(0.0, t)
        return _replay_sites(self.initial_sites.copy(), self.kinds, self.a, self.b, hi)

    # -- serialization ------------------------------------------------------

    def header(self) -> dict:
        return {"kind": "header", "n": self.n, "n_sites": self.n_sites,
                "initial_sites": self.initial_sites.tolist(), "end_time": self.end_time,
                "gamma": self.gamma, "seed": self.seed, "truncated": self.truncated,
                "fixation_time": self.fixation_time}

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for e in range(self.n_events):
                t = float(self.times[e])
                if self.kinds[e] == RES:
                    rec = {"t": t, "tick": e, "kind": "res", "src": int(self.a[e]),
                           "dst": int(self.b[e]), "site": int(self.c[e])}
                else:
                    rec = {"t": t, "tick": e, "kind": "mig", "ind": int(self.a[e]),
                           "from": int(self.c[e]), "to": int(self.b[e])}
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "EventLog":
        with open(path) as fh:
            head = json.loads(fh.readline())
            rows = [json.loads(line) for line in fh if line.strip()]
        times = np.array([r["t"] for r in rows], dtype=np.float64)
        kinds = np.array([RES if r["kind"] == "res" else MIG for r in rows], dtype=np.int8)
        a = np.array([r["src"] if r["kind"] == "res" else r["ind"] for r in rows], dtype=np.int64)
        b = np.array([r["dst"] if r["kind"] == "res" else r["to"] for r in rows], dtype=np.int64)
        c = np.array([r["site"] if r["kind"] == "res" else r["from"] for r in rows], dtype=np.int64)
        if any(r["tick"] != e for e, r in enumerate(rows)):
            raise ValueError("ticks must enumerate the events in order")
        return cls(head["n"], head["n_sites"], np.array(head["initial_sites"], dtype=np.int64),
                   times, kinds, a, b, c, float(head["end_time"]), float(head["gamma"]),
                   head.get("seed"), bool(head.get("truncated", False)), head.get("fixation_time"))

    @classmethod
    def from_events(cls, n: int, events, end_time: float, initial_sites=None, n_sites: int = 1):
        """Hand-built log from ``(t, "res", src, dst)`` and
        ``(t, "mig", ind, new_site)`` tuples (sorted by time)."""
        sites = np.zeros(n, dtype=np.int64) if initial_sites is None else np.array(initial_sites, dtype=np.int64)
        init = sites.copy()
        times, kinds, a, b, c = [], [], [], [], []
        last = -math.inf
        for t, kind, x, y in events:
            if not t > last:
                raise ValueError("event times must increase strictly")
            last = t
            times.append(t)
            if kind == "res":
                if sites[x] != sites[y]:
                    raise ValueError("resampling between different sites")
                kinds.append(RES), a.append(x), b.append(y), c.append(sites[x])
            else:
                kinds.append(MIG), a.append(x), b.append(y), c.append(sites[x])
                sites[x] = y
        return cls(n, n_sites, init, np.array(times, dtype=np.float64), np.array(kinds, dtype=np.int8),
                   np.array(a, dtype=np.int64), np.array(b, dtype=np.int64),
                   np.array(c, dtype=np.int64), float(end_time))


# --------------------------------------------------------------------------
# simulation kernel


@numba.njit(cache=True)
def _moran_kernel(u, k_u, t, t_end, gamma, leave, dest, cum, sites, members, pos, counts,
                  W, types, type_count, n_types, track, out_t, out_k, out_a, out_b, out_c, n_out):
    """Advance the Gillespie loop; returns the state needed to resume."""
    n = sites.shape[0]
    V = counts.shape[0]
    ndest = cum.shape[0]
    while True:
        if track and n_types == 1:
            return _FIXED, k_u, t, W, n_types, n_out
        if k_u + 4 > u.shape[0]:
            return _NEED_UNIFORMS, k_u, t, W, n_types, n_out
        if n_out >= out_t.shape[0]:
            return _BUFFER_FULL, k_u, t, W, n_types, n_out
        res_rate = 0.5 * gamma * W
        mig_rate = n * leave
        R = res_rate + mig_rate
        if R <= 0.0:
            return _DONE, k_u, t_end, W, n_types, n_out
        dt = -math.log1p(-u[k_u]) / R
        if t + dt > t_end:
            return _DONE, k_u + 4, t_end, W, n_types, n_out
        t += dt
        if u[k_u + 1] * R < res_rate:
            # site with probability proportional to m(m-1), then an ordered pair
            y = int(u[k_u + 2] * W)
            if y >= W:
                y = W - 1
            g = 0
            acc = 0
            for g in range(V):
                m = counts[g]
                acc += m * (m - 1)
                if acc > y:
                    break
            m = counts[g]
            p = int(u[k_u + 3] * m * (m - 1))
            if p >= m * (m - 1):
                p = m * (m - 1) - 1
            ia = p // (m - 1)
            ib = p % (m - 1)
            if ib >= ia:
                ib += 1
            src = members[g, ia]
            dst = members[g, ib]
            out_k[n_out] = 0
            out_a[n_out] = src
            out_b[n_out] = dst
            out_c[n_out] = g
            if track and types[src] != types[dst]:
                type_count[types[dst]] -= 1
                if type_count[types[dst]] == 0:
                    n_types -= 1
                type_count[types[src]] += 1
                types[dst] = types[src]
        else:
            i = int(u[k_u + 2] * n)
            if i >= n:
                i = n - 1
            x = u[k_u + 3]
            k = 0
            while k < ndest - 1 and cum[k] <= x:
                k += 1
            g_old = sites[i]
            g_new = dest[g_old, k]
            # remove i from g_old (swap with last), append to g_new
            m = counts[g_old]
            last = members[g_old, m - 1]
            members[g_old, pos[i]] = last
            pos[last] = pos[i]
            counts[g_old] = m - 1
            W -= m * (m - 1) - (m - 1) * (m - 2)
            m2 = counts[g_new]
            members[g_new, m2] = i
            pos[i] = m2
            counts[g_new] = m2 + 1
            W += (m2 + 1) * m2 - m2 * (m2 - 1)
            sites[i] = g_new
            out_k[n_out] = 1
            out_a[n_out] = i
            out_b[n_out] = g_new
            out_c[n_out] = g_old
        out_t[n_out] = t
        n_out += 1
        k_u += 4


def simulate(config: MoranConfig, replicate: int = 0, *, stop_at_fixation: bool = False,
             initial_sites=None, max_events: int = DEFAULT_EVENT_BUDGET) -> EventLog:
    """Exact event-driven simulation of the graphical construction on
    [0, horizon].

    Co-located ordered pairs fire at rate gamma/2 each, which is simulated
    through the per-site aggregate rate gamma m(m-1)/2 with a uniform ordered
    pair.  Each individual jumps at rate 1 with the wrapped kernel; jumps
    onto the current site change nothing and are not recorded.  With
    ``stop_at_fixation`` the run ends at the first time when all
    individuals descend from a single time-0 individual.
    """
    rng = replicate_rng(config.seed, replicate)
    torus = config.torus
    V = torus.size
    n = config.n
    if initial_sites is None:
        sites = rng.integers(0, V, size=n).astype(np.int64)
    else:
        sites = np.array(initial_sites, dtype=np.int64)
        if sites.shape != (n,) or sites.min() < 0 or sites.max() >= V:
            raise ValueError("invalid initial sites")
    init = sites.copy()
    dest, cum = move_table(config.kernel, torus)
    leave = 1.0 - wrapped_row(config.kernel, torus)[0]
    if dest.shape[1] == 0:
        dest = np.zeros((V, 1), dtype=np.int64)
        cum = np.ones(1)
        leave = 0.0
    counts = np.bincount(sites, minlength=V).astype(np.int64)
    members = np.full((V, n), -1, dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)
    fill = np.zeros(V, dtype=np.int64)
    for i in range(n):
        g = sites[i]
        members[g, fill[g]] = i
        pos[i] = fill[g]
        fill[g] += 1
    W = int(np.sum(counts * (counts - 1)))
    types = np.arange(n, dtype=np.int64)
    type_count = np.ones(n, dtype=np.int64)
    n_types = n
    chunks = []
    t = 0.0
    u = np.empty(0)
    k_u = 0
    total = 0
    truncated = False
    fixation = 0.0 if (stop_at_fixation and n == 1) else None
    status = _DONE
    block = 256            # grows geometrically so short runs stay cheap
    while True:
        cap = min(block, max_events - total)
        if cap <= 0:
            truncated = True
            break
        buf = (np.empty(cap), np.empty(cap, np.int8), np.empty(cap, np.int64),
               np.empty(cap, np.int64), np.empty(cap, np.int64))
        n_out = 0
        while True:
            status, k_u, t, W, n_types, n_out = _moran_kernel(
                u, k_u, t, config.horizon, float(config.gamma), leave, dest, cum, sites, members,
                pos, counts, W, types, type_count, n_types, stop_at_fixation, *buf, n_out)
            if status == _NEED_UNIFORMS:
                u = np.concatenate([u[k_u:], rng.random(_UNIFORMS_PER_EVENT * block)])
                k_u = 0
                continue
            break
        block = min(2 * block, _CHUNK_EVENTS)
        chunks.append(tuple(x[:n_out] for x in buf))
        total += n_out
        if status == _FIXED:
            fixation = t
            break
        if status == _DONE:
            break
    cat = [np.concatenate([c[j] for c in chunks]) for j in range(5)]
    end = t if (truncated or status == _FIXED) else config.horizon
    if truncated:
        end = float(cat[0][-1]) if cat[0].size else 0.0
    return EventLog(n, V, init, cat[0], cat[1], cat[2], cat[3], cat[4], float(end),
                    float(config.gamma), config.seed, truncated, fixation)


# --------------------------------------------------------------------------
# backward queries


@numba.njit(cache=True)
def _replay_sites(sites, kinds, a, b, hi):
    for e in range(hi):
        if kinds[e] == 1:
            sites[a[e]] = b[e]
    return sites


@numba.njit(cache=True)
def _trace_back(kinds, a, b, i, lo, hi):
    cur = i
    for e in range(hi - 1, lo - 1, -1):
        if kinds[e] == 0 and b[e] == cur:
            cur = a[e]
    return cur


@numba.njit(cache=True)
def _forward_ancestors(kinds, a, b, n, lo, hi):
    anc = np.arange(n)
    for e in range(lo, hi):
        if kinds[e] == 0:
            anc[b[e]] = anc[a[e]]
    return anc


def ancestor(log: EventLog, i: int, t: float, h: float) -> int:
    """A_h(i, t): the individual at time h from which (i, t) descends."""
    if not 0.0 <= h <= t:
        raise ValueError("need 0 <= h <= t")
    log.check_time(t)
    if not 0 <= i < log.n:
        raise ValueError(f"unknown individual {i}")
    lo, hi = log.window(h, t)
    return int(_trace_back(log.kinds, log.a, log.b, i, lo, hi))


def ancestor_map(log: EventLog, t: float, h: float) -> np.ndarray:
    """Vector of A_h(i, t) over all individuals, by one forward replay."""
    if not 0.0 <= h <= t:
        raise ValueError("need 0 <= h <= t")
    log.check_time(t)
    lo, hi = log.window(h, t)
    return _forward_ancestors(log.kinds, log.a, log.b, log.n, lo, hi)


def descendants(log: EventLog, M, t: float, T: float) -> set[int]:
    """D_{t,T}(M) = {i : A_t(i, T) in M}."""
    anc = ancestor_map(log, T, t)
    return set(np.flatnonzero(np.isin(anc, np.fromiter(M, dtype=np.int64))).tolist())


@numba.njit(cache=True)
def _pair_ticks(kinds, a, b, n, hi):
    """Tick of the event after which i and j share their ancestry
    (-1 when they never coalesce after time 0)."""
    M = np.full((n, n), -1, dtype=np.int64)
    for e in range(hi):
        if kinds[e] == 0:
            i = a[e]
            j = b[e]
            for k in range(n):
                M[j, k] = M[i, k]
            for k in range(n):
                M[k, j] = M[k, i]
            M[i, j] = e
            M[j, i] = e
            M[j, j] = -1
    for k in range(n):
        M[k, k] = -1
    return M


def coalescence_ticks(log: EventLog, t: float) -> np.ndarray:
    """Matrix of coalescence ticks of the genealogy at time t, tracked
    forward in time (row j copies row i when j is replaced by i)."""
    log.check_time(t)
    _, hi = log.window(0.0, t)
    return _pair_ticks(log.kinds, log.a, log.b, log.n, hi)


def distances_from_ticks(log: EventLog, ticks: np.ndarray, t: float) -> np.ndarray:
    born = np.append(log.times, 0.0)
    D = t - born[np.where(ticks >= 0, ticks, log.n_events)]
    np.fill_diagonal(D, 0.0)
    return D


def genealogy_snapshot(log: EventLog, t: float) -> AtomicUMM:
    """The genealogy U_t: individuals at pairwise distance r_t with unit
    mass per occupied site, marks = current sites."""
    D = distances_from_ticks(log, coalescence_ticks(log, t), t)
    sites = log.sites_at(t)
    counts = np.bincount(sites, minlength=log.n_sites)
    masses = 1.0 / np.maximum(counts[sites], 1)
    return AtomicUMM.from_distance_matrix(D, masses, labels=range(log.n), marks=sites.tolist())
