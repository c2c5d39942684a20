"""Spatial Kingman coalescent: direct simulation and extraction from a
forward event log."""
from __future__ import annotations

import dataclasses
import json
import math

import numba
import numpy as np

from .geo import GeoTorus, MigrationKernel, move_table, wrapped_row
from .moran import RES, EventLog, replicate_rng

MERGE, RELABEL = 0, 1


@dataclasses.dataclass(frozen=True)
class LabeledPartition:
    """Blocks ordered by least element, each with a site label."""

    blocks: tuple[tuple[int, ...], ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        blocks = tuple(tuple(sorted(b)) for b in self.blocks)
        order = sorted(range(len(blocks)), key=lambda k: blocks[k][0])
        object.__setattr__(self, "blocks", tuple(blocks[k] for k in order))
        object.__setattr__(self, "labels", tuple(int(self.labels[k]) for k in order))
        seen = [x for b in self.blocks for x in b]
        if len(seen) != len(set(seen)):
            raise ValueError("blocks must be disjoint")

    def __len__(self):
        return len(self.blocks)

    def as_sets(self) -> list[frozenset]:
        return [frozenset(b) for b in self.blocks]


@dataclasses.dataclass(frozen=True, eq=False)
class CoalescentPath:
    """Initial singletons {i} with labels ``initial_labels[i]`` and the jump
    list.  Blocks are named by their least element: ``MERGE(x, y)`` joins
    the blocks named x < y (the result is named x), ``RELABEL(x, g)`` moves
    block x to site g.  ``ticks`` point into the source event log (or are
    -1 for directly simulated paths)."""

    n: int
    initial_labels: np.ndarray
    times: np.ndarray
    kinds: np.ndarray
    x: np.ndarray
    y: np.ndarray
    ticks: np.ndarray
    horizon: float

    def __post_init__(self):
        for name in ("initial_labels", "times", "kinds", "x", "y", "ticks"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def merge_times(self) -> np.ndarray:
        return self.times[self.kinds == MERGE]

    def block_counts(self) -> tuple[np.ndarray, np.ndarray]:
        """Step function #_h: values ``counts[k]`` on [h_k, h_{k+1})."""
        mt = self.merge_times
        return np.concatenate([[0.0], mt]), self.n - np.arange(mt.size + 1)

    def n_blocks_at(self, h: float) -> int:
        return self.n - int(np.searchsorted(self.merge_times, h, side="right"))

    def tau(self, k: int) -> float | None:
        """First time with exactly k blocks (None if never reached)."""
        if k > self.n or k < 1:
            raise ValueError("k out of range")
        mt = self.merge_times
        if k == self.n:
            return 0.0
        j = self.n - k - 1
        return float(mt[j]) if j < mt.size else None

    def partition_at(self, h: float) -> LabeledPartition:
        hi = int(np.searchsorted(self.times, h, side="right"))
        members = {i: [i] for i in range(self.n)}
        labels = {i: int(g) for i, g in enumerate(self.initial_labels)}
        for e in range(hi):
            if self.kinds[e] == MERGE:
                members[int(self.x[e])].extend(members.pop(int(self.y[e])))
                labels.pop(int(self.y[e]))
            else:
                labels[int(self.x[e])] = int(self.y[e])
        keys = sorted(members)
        return LabeledPartition(tuple(tuple(members[k]) for k in keys), tuple(labels[k] for k in keys))

    def block_sizes_at_tau(self, k: int) -> np.ndarray:
        """Sizes of the blocks in least-element order at time tau_k."""
        if self.tau(k) is None:
            raise ValueError(f"path never reaches {k} blocks")
        return _sizes_after_merges(self.kinds, self.x, self.y, self.n, self.n - k)

    def merge_tick_matrix(self) -> np.ndarray:
        """For each pair, the event tick of the merge that joins them."""
        return _pair_merges(self.kinds, self.x, self.y, self.ticks, self.n)

    def distance_matrix(self) -> np.ndarray:
        """r_hat(i, j) = inf{h : i ~_h j} (the horizon if never)."""
        idx = _pair_merges(self.kinds, self.x, self.y, np.arange(self.kinds.size), self.n)
        heights = np.append(self.times, self.horizon)
        D = heights[np.where(idx >= 0, idx, self.kinds.size)]
        np.fill_diagonal(D, 0.0)
        return D

    def restrict(self, subset) -> "CoalescentPath":
        """The path seen by the individuals in ``subset`` (relabelled
        0..m-1 in increasing order)."""
        sub = sorted(set(int(i) for i in subset))
        rank = {i: r for r, i in enumerate(sub)}
        members = {i: ([rank[i]] if i in rank else []) for i in range(self.n)}
        times, kinds, xs, ys, ticks = [], [], [], [], []
        for e in range(self.kinds.size):
            x, y = int(self.x[e]), int(self.y[e])
            if self.kinds[e] == MERGE:
                mx, my = members[x], members.pop(y)
                if mx and my:
                    a, b = sorted((min(mx), min(my)))
                    times.append(self.times[e]), kinds.append(MERGE), xs.append(a), ys.append(b)
                    ticks.append(self.ticks[e])
                mx.extend(my)
            elif members[x]:
                times.append(self.times[e]), kinds.append(RELABEL), xs.append(min(members[x]))
                ys.append(y), ticks.append(self.ticks[e])
        return CoalescentPath(len(sub), self.initial_labels[sub], np.array(times, dtype=np.float64),
                              np.array(kinds, dtype=np.int8), np.array(xs, dtype=np.int64),
                              np.array(ys, dtype=np.int64), np.array(ticks, dtype=np.int64),
                              self.horizon)

    def write_jsonl(self, path, seed=None):
        with open(path, "w") as fh:
            fh.write(json.dumps({"kind": "header", "n": self.n, "seed": seed,
                                 "initial_labels": self.initial_labels.tolist(),
                                 "horizon": self.horizon}) + "\n")
            for e in range(self.kinds.size):
                rec = {"h": float(self.times[e]), "tick": int(self.ticks[e])}
                if self.kinds[e] == MERGE:
                    rec.update(kind="merge", blocks=[int(self.x[e]), int(self.y[e])])
                else:
                    rec.update(kind="relabel", block=int(self.x[e]), label=int(self.y[e]))
                fh.write(json.dumps(rec) + "\n")


@numba.njit(cache=True)
def _sizes_after_merges(kinds, x, y, n, n_merges):
    size = np.ones(n, dtype=np.int64)
    done = 0
    for e in range(kinds.shape[0]):
        if done == n_merges:
            break
        if kinds[e] == 0:
            size[x[e]] += size[y[e]]
            size[y[e]] = 0
            done += 1
    return size[size > 0]


@numba.njit(cache=True)
def _pair_merges(kinds, x, y, ticks, n):
    M = np.full((n, n), -1, dtype=np.int64)
    block = np.arange(n)
    members = np.full((n, n), -1, dtype=np.int64)
    count = np.ones(n, dtype=np.int64)
    for i in range(n):
        members[i, 0] = i
    for e in range(kinds.shape[0]):
        if kinds[e] != 0:
            continue
        a = x[e]
        b = y[e]
        for p in range(count[a]):
            for q in range(count[b]):
                i = members[a, p]
                j = members[b, q]
                M[i, j] = ticks[e]
                M[j, i] = ticks[e]
        for q in range(count[b]):
            members[a, count[a] + q] = members[b, q]
            block[members[b, q]] = a
        count[a] += count[b]
        count[b] = 0
    return M


# --------------------------------------------------------------------------
# extraction from a forward log


@numba.njit(cache=True)
def _backward_blocks(kinds, a, b, c, lo, hi, n):
    holder = np.arange(n)          # holder[i]: block held by individual i (-1 none)
    out_e = np.empty(hi - lo, np.int64)
    out_k = np.empty(hi - lo, np.int8)
    out_x = np.empty(hi - lo, np.int64)
    out_y = np.empty(hi - lo, np.int64)
    m = 0
    for e in range(hi - 1, lo - 1, -1):
        if kinds[e] == 0:
            j = b[e]
            bj = holder[j]
            if bj < 0:
                continue
            holder[j] = -1
            i = a[e]
            bi = holder[i]
            if bi >= 0:
                lo_b = min(bi, bj)
                out_e[m] = e
                out_k[m] = 0
                out_x[m] = lo_b
                out_y[m] = max(bi, bj)
                holder[i] = lo_b
                m += 1
            else:
                holder[i] = bj
        else:
            blk = holder[a[e]]
            if blk >= 0:
                out_e[m] = e
                out_k[m] = 1
                out_x[m] = blk
                out_y[m] = c[e]
                m += 1
    return out_e[:m], out_k[:m], out_x[:m], out_y[:m]


def from_event_log(log: EventLog, T: float) -> CoalescentPath:
    """Backward partition process of the population at time T: i and j are
    in one block at h when A_{T-h}(i, T) = A_{T-h}(j, T); block labels are
    the ancestors' sites at time T - h."""
    log.check_time(T)
    lo, hi = log.window(0.0, T)
    e, k, x, y = _backward_blocks(log.kinds, log.a, log.b, log.c, lo, hi, log.n)
    return CoalescentPath(log.n, log.sites_at(T), T - log.times[e], k, x, y, e, float(T))


# --------------------------------------------------------------------------
# direct simulation


@numba.njit(cache=True)
def _kingman_kernel(u, k_u, t, t_max, gamma, leave, dest, cum, label, members, pos, counts,
                    W, alive, apos, n_alive, stop_at, out_t, out_k, out_x, out_y, n_out):
    V = counts.shape[0]
    ndest = cum.shape[0]
    while True:
        if n_alive <= stop_at:
            return 0, k_u, t, W, n_alive, n_out
        if k_u + 4 > u.shape[0]:
            return 1, k_u, t, W, n_alive, n_out
        if n_out >= out_t.shape[0]:
            return 2, k_u, t, W, n_alive, n_out
        merge_rate = gamma * 0.5 * W
        move_rate = n_alive * leave
        R = merge_rate + move_rate
        if R <= 0.0:
            return 0, k_u, t_max, W, n_alive, n_out
        t_new = t - math.log1p(-u[k_u]) / R
        if t_new > t_max:
            return 0, k_u + 4, t_max, W, n_alive, n_out
        t = t_new
        if u[k_u + 1] * R < merge_rate:
            y = int(u[k_u + 2] * W)
            if y >= W:
                y = W - 1
            acc = 0
            g = 0
            for g in range(V):
                m = counts[g]
                acc += m * (m - 1)
                if acc > y:
                    break
            m = counts[g]
            p = int(u[k_u + 3] * m * (m - 1) / 2)
            if p >= m * (m - 1) // 2:
                p = m * (m - 1) // 2 - 1
            # unordered pair number p -> (ia < ib)
            ia = 0
            while p >= m - 1 - ia:
                p -= m - 1 - ia
                ia += 1
            ib = ia + 1 + p
            b1 = members[g, ia]
            b2 = members[g, ib]
            keep = min(b1, b2)
            gone = max(b1, b2)
            # drop `gone` from site g and from the alive list
            last = members[g, m - 1]
            members[g, pos[gone]] = last
            pos[last] = pos[gone]
            counts[g] = m - 1
            W -= m * (m - 1) - (m - 1) * (m - 2)
            moved = alive[n_alive - 1]
            alive[apos[gone]] = moved
            apos[moved] = apos[gone]
            n_alive -= 1
            out_k[n_out] = 0
            out_x[n_out] = keep
            out_y[n_out] = gone
        else:
            q = int(u[k_u + 2] * n_alive)
            if q >= n_alive:
                q = n_alive - 1
            blk = alive[q]
            x = u[k_u + 3]
            k = 0
            while k < ndest - 1 and cum[k] <= x:
                k += 1
            g_old = label[blk]
            g_new = dest[g_old, k]
            m = counts[g_old]
            last = members[g_old, m - 1]
            members[g_old, pos[blk]] = last
            pos[last] = pos[blk]
            counts[g_old] = m - 1
            W -= m * (m - 1) - (m - 1) * (m - 2)
            m2 = counts[g_new]
            members[g_new, m2] = blk
            pos[blk] = m2
            counts[g_new] = m2 + 1
            W += (m2 + 1) * m2 - m2 * (m2 - 1)
            label[blk] = g_new
            out_k[n_out] = 1
            out_x[n_out] = blk
            out_y[n_out] = g_new
        out_t[n_out] = t
        n_out += 1
        k_u += 4


def simulate_spatial_kingman(n: int, torus: GeoTorus, gamma: float, kernel: MigrationKernel,
                             t_max: float = math.inf, seed: int = 0, replicate: int = 0,
                             initial_labels=None, stop_at: int = 1,
                             max_events: int = 10 ** 8) -> CoalescentPath:
    """Co-located pairs of blocks merge at rate gamma, every block jumps at
    rate 1 according to ``kernel`` (pass the reversed migration kernel to
    obtain the dual of a forward model).  Stops at ``t_max`` or when
    ``stop_at`` blocks remain."""
    if n < 1:
        raise ValueError("n must be positive")
    if kernel.d != torus.d:
        raise ValueError("kernel and torus dimensions differ")
    rng = replicate_rng(seed, replicate)
    V = torus.size
    if initial_labels is None:
        labels = rng.integers(0, V, size=n).astype(np.int64)
    else:
        labels = np.array(initial_labels, dtype=np.int64)
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= V:
            raise ValueError("invalid initial labels")
    init = labels.copy()
    dest, cum = move_table(kernel, torus)
    leave = 1.0 - wrapped_row(kernel, torus)[0]
    if dest.shape[1] == 0:
        dest, cum, leave = np.zeros((V, 1), dtype=np.int64), np.ones(1), 0.0
    counts = np.bincount(labels, minlength=V).astype(np.int64)
    members = np.full((V, n), -1, dtype=np.int64)
    pos = np.zeros(n, dtype=np.int64)
    fill = np.zeros(V, dtype=np.int64)
    for i in range(n):
        g = labels[i]
        members[g, fill[g]] = i
        pos[i] = fill[g]
        fill[g] += 1
    W = int(np.sum(counts * (counts - 1)))
    alive = np.arange(n, dtype=np.int64)
    apos = np.arange(n, dtype=np.int64)
    n_alive = n
    t = 0.0
    u = np.empty(0)
    k_u = 0
    chunks = []
    total = 0
    chunk = 256
    while total < max_events:
        chunk = min(chunk, max_events - total)
        buf = (np.empty(chunk), np.empty(chunk, np.int8), np.empty(chunk, np.int64),
               np.empty(chunk, np.int64))
        n_out = 0
        while True:
            status, k_u, t, W, n_alive, n_out = _kingman_kernel(
                u, k_u, t, float(t_max), float(gamma), leave, dest, cum, labels, members, pos,
                counts, W, alive, apos, n_alive, stop_at, *buf, n_out)
            if status == 1:
                u = np.concatenate([u[k_u:], rng.random(4 * chunk)])
                k_u = 0
                continue
            break
        chunks.append(tuple(x[:n_out] for x in buf))
        total += n_out
        if status == 0:
            break
        chunk = min(2 * chunk, 1 << 16)
    cat = [np.concatenate([c[j] for c in chunks]) for j in range(4)]
    horizon = float(t_max) if math.isfinite(t_max) else float(t)
    return CoalescentPath(n, init, cat[0], cat[1], cat[2], cat[3],
                          np.full(cat[0].size, -1, dtype=np.int64), horizon)


def block_frequencies_at(path: CoalescentPath, k: int, rng: np.random.Generator | int = 0) -> np.ndarray:
    """Block sizes at tau_k divided by n, in uniformly permuted order."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(int(rng)))
    sizes = path.block_sizes_at_tau(k)
    return rng.permutation(sizes) / path.n
