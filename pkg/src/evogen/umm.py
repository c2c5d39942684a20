"""Finite marked ultrametric measure spaces stored as merge dendrograms,
and the metric-measure functionals defined on them."""
from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
from typing import Hashable, Iterable, Mapping, Sequence

import networkx as nx
import numpy as np

# Height of the artificial root joining components that never merge.
SENTINEL_HEIGHT = float(2 ** 63 - 1)
NO_MARK = -1


def _as_mark(mark, mass: float) -> dict[int, float] | None:
    if mark is None:
        return None
    if isinstance(mark, Mapping):
        return {int(g): float(m) for g, m in mark.items() if m > 0}
    return {int(mark): float(mass)}


def _merge_marks(marks: Iterable[dict | None]) -> dict[int, float] | None:
    marks = list(marks)
    if all(m is None for m in marks):
        return None
    out: dict[int, float] = {}
    for m in marks:
        if m is None:
            raise ValueError("cannot aggregate marked and unmarked leaves")
        for g, w in m.items():
            out[g] = out.get(g, 0.0) + w
    return dict(sorted(out.items()))


class AtomicUMM:
    """A finite ultrametric measure space as a rooted merge dendrogram.

    Nodes ``0..n-1`` are the leaves (height 0), internal nodes follow with
    ids larger than those of their children.  ``parent[root] == -1``.
    Leaves carry a label, a positive mass and either no mark or a
    mark-mass vector ``{site: mass}`` summing to the leaf mass.
    """

    __slots__ = ("labels", "masses", "marks", "parent", "heights", "_index", "_dist")

    def __init__(self, labels, masses, marks, parent, heights):
        self.labels = tuple(labels)
        self.masses = np.asarray(masses, dtype=np.float64)
        self.masses.setflags(write=False)
        self.marks = tuple(marks)
        self.parent = np.asarray(parent, dtype=np.int64)
        self.heights = np.asarray(heights, dtype=np.float64)
        self.parent.setflags(write=False)
        self.heights.setflags(write=False)
        self._index = {lab: i for i, lab in enumerate(self.labels)}
        self._dist = None
        n = len(self.labels)
        if len(self._index) != n:
            raise ValueError("leaf labels must be distinct")
        if n == 0:
            raise ValueError("a space needs at least one leaf")
        if np.any(self.masses <= 0) or not np.all(np.isfinite(self.masses)):
            raise ValueError("leaf masses must be positive and finite")
        if np.any(self.heights[:n] != 0):
            raise ValueError("leaves have height 0")
        roots = np.flatnonzero(self.parent == -1)
        if roots.size != 1:
            raise ValueError("dendrogram must have exactly one root")
        for v, p in enumerate(self.parent):
            if p != -1 and not (p > v and self.heights[p] > self.heights[v]):
                raise ValueError("heights must strictly increase towards the root")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_merges(cls, leaves: Sequence[tuple], merges: Sequence[tuple[float, Sequence[int]]]):
        """Build from ``leaves = [(label, mass, mark), ...]`` and
        ``merges = [(height, children), ...]``.  Children refer to leaf
        positions ``0..n-1`` or to earlier merges as ``n + k``.  Components
        left unjoined are attached to a sentinel root."""
        n = len(leaves)
        labels = [lf[0] for lf in leaves]
        masses = [float(lf[1]) for lf in leaves]
        marks = [_as_mark(lf[2] if len(lf) > 2 else None, float(lf[1])) for lf in leaves]
        parent = [-1] * n
        heights = [0.0] * n
        for k, (h, children) in enumerate(merges):
            v = n + k
            parent.append(-1)
            heights.append(float(h))
            if len(children) < 2:
                raise ValueError("a merge joins at least two nodes")
            for c in children:
                if c >= v or parent[c] != -1:
                    raise ValueError(f"invalid child {c} in merge {k}")
                parent[c] = v
        roots = [v for v, p in enumerate(parent) if p == -1]
        if len(roots) > 1:
            v = len(parent)
            parent.append(-1)
            heights.append(SENTINEL_HEIGHT)
            for r in roots:
                parent[r] = v
        return cls(labels, masses, marks, parent, heights)

    @classmethod
    def from_distance_matrix(cls, D, masses, labels=None, marks=None):
        """Build from an ultrametric distance matrix.

        Points at distance 0 are identified into one leaf (masses and marks
        summed, the first label kept); equal merge heights are collapsed into
        one multifurcating node.  Raises if D is not ultrametric.
        """
        D = np.asarray(D, dtype=np.float64)
        n = D.shape[0]
        masses = np.asarray(masses, dtype=np.float64)
        labels = list(range(n)) if labels is None else list(labels)
        marks = [None] * n if marks is None else [_as_mark(m, w) for m, w in zip(marks, masses)]
        uf = list(range(n))

        def find(x):
            while uf[x] != x:
                uf[x] = uf[uf[x]]
                x = uf[x]
            return x

        iu, ju = np.triu_indices(n, 1)
        dv = D[iu, ju]
        order = np.argsort(dv, kind="stable")
        # zero-distance classes become leaves
        pos = 0
        while pos < order.size and dv[order[pos]] == 0.0:
            a, b = find(iu[order[pos]]), find(ju[order[pos]])
            if a != b:
                uf[max(a, b)] = min(a, b)
            pos += 1
        reps = sorted({find(i) for i in range(n)})
        leaf_of = {r: k for k, r in enumerate(reps)}
        idx = np.array([leaf_of[find(i)] for i in range(n)], dtype=np.int64)
        members: dict[int, list[int]] = {r: [] for r in reps}
        for i in range(n):
            members[find(i)].append(i)
        leaves = [(labels[r], float(math.fsum(masses[members[r]])),
                   _merge_marks(marks[i] for i in members[r])) for r in reps]
        node_of = {r: leaf_of[r] for r in reps}
        merges: list[tuple[float, list[int]]] = []
        m = len(reps)
        while pos < order.size:
            h = dv[order[pos]]
            groups: dict[int, set[int]] = {}
            while pos < order.size and dv[order[pos]] == h:
                a, b = find(iu[order[pos]]), find(ju[order[pos]])
                if a != b:
                    ga = groups.pop(a, {a})
                    gb = groups.pop(b, {b})
                    root = min(a, b)
                    uf[max(a, b)] = root
                    groups[root] = ga | gb
                pos += 1
            for root, comps in sorted(groups.items()):
                merges.append((float(h), sorted(node_of[c] for c in comps)))
                node_of[root] = m + len(merges) - 1
        u = cls.from_merges(leaves, merges)
        # ultrametric check: the dendrogram must reproduce D
        back = u.distance_matrix()
        if not np.array_equal(back[np.ix_(idx, idx)], np.where(np.eye(n, dtype=bool), 0.0, D)):
            raise ValueError("distance matrix is not an ultrametric")
        return u

    # -- basic queries ----------------------------------------------------

    @property
    def n_leaves(self) -> int:
        return len(self.labels)

    @property
    def n_nodes(self) -> int:
        return self.parent.size

    @property
    def total_mass(self) -> float:
        return math.fsum(self.masses)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent == -1)[0])

    @property
    def is_marked(self) -> bool:
        return any(m is not None for m in self.marks)

    def leaf_index(self, label) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"unknown leaf label {label!r}") from None

    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for v, p in enumerate(self.parent):
            if p != -1:
                ch[p].append(v)
        return ch

    def leaf_sets(self) -> list[list[int]]:
        sets: list[list[int]] = [[v] if v < self.n_leaves else [] for v in range(self.n_nodes)]
        for v in range(self.n_nodes):
            p = self.parent[v]
            if p != -1:
                sets[p].extend(sets[v])
        return sets

    def distance(self, x, y) -> float:
        """Height of the lowest common merge node of leaves x and y."""
        i, j = self.leaf_index(x), self.leaf_index(y)
        if i == j:
            return 0.0
        up = set()
        v = i
        while v != -1:
            up.add(v)
            v = self.parent[v]
        v = j
        while v not in up:
            v = self.parent[v]
        return float(self.heights[v])

    def distance_matrix(self) -> np.ndarray:
        if self._dist is None:
            n = self.n_leaves
            D = np.zeros((n, n))
            sets = self.leaf_sets()
            for v, ch in enumerate(self.children()):
                for a, b in itertools.combinations(ch, 2):
                    D[np.ix_(sets[a], sets[b])] = self.heights[v]
                    D[np.ix_(sets[b], sets[a])] = self.heights[v]
            D.setflags(write=False)
            self._dist = D
        return self._dist

    def mark_atoms(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Atoms of mu on X x G as (leaf index, mark or NO_MARK, mass)."""
        leaf, mark, mass = [], [], []
        for i, (w, mk) in enumerate(zip(self.masses, self.marks)):
            if mk is None:
                leaf.append(i), mark.append(NO_MARK), mass.append(w)
            else:
                for g, m in mk.items():
                    leaf.append(i), mark.append(g), mass.append(m)
        return np.array(leaf, dtype=np.int64), np.array(mark, dtype=np.int64), np.array(mass)

    def drop_marks(self) -> "AtomicUMM":
        return AtomicUMM(self.labels, self.masses, [None] * self.n_leaves, self.parent, self.heights)

    def scaled(self, distance_factor: float = 1.0, mass_factor: float = 1.0) -> "AtomicUMM":
        if distance_factor <= 0 or mass_factor <= 0:
            raise ValueError("scale factors must be positive")
        h = self.heights * distance_factor
        h[self.heights == SENTINEL_HEIGHT] = SENTINEL_HEIGHT
        marks = [None if m is None else {g: w * mass_factor for g, w in m.items()} for m in self.marks]
        return AtomicUMM(self.labels, self.masses * mass_factor, marks, self.parent, h)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        n = self.n_leaves
        leaves = []
        for lab, w, mk in zip(self.labels, self.masses, self.marks):
            mark = None if mk is None else {str(g): m for g, m in mk.items()}
            leaves.append({"id": lab, "mass": float(w), "mark": mark})
        merges = [{"height": float(self.heights[v]), "children": ch}
                  for v, ch in enumerate(self.children()) if v >= n]
        return {"leaves": leaves, "merges": merges}

    @classmethod
    def from_dict(cls, obj: dict) -> "AtomicUMM":
        leaves = []
        for lf in obj["leaves"]:
            mk = lf.get("mark")
            if isinstance(mk, Mapping):
                mk = {int(g): float(m) for g, m in mk.items()}
            lab = lf["id"]
            leaves.append((tuple(lab) if isinstance(lab, list) else lab, float(lf["mass"]), mk))
        n = len(leaves)
        merges = [(m["height"], m["children"]) for m in obj["merges"]]
        u = cls.from_merges(leaves, merges)
        if u.n_nodes != n + len(merges):
            raise ValueError("serialized dendrogram has several roots")
        return u

    def to_json(self, path, **kw):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, **kw)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def __repr__(self):
        return f"AtomicUMM(leaves={self.n_leaves}, mass={self.total_mass:g})"


def ultrametric_distance(u: AtomicUMM, x, y) -> float:
    return u.distance(x, y)


# --------------------------------------------------------------------------
# balls, trunks and family sizes


def _ball_tops(u: AtomicUMM, h: float, closed: bool) -> np.ndarray:
    inside = u.heights <= h if closed else u.heights < h
    top = np.arange(u.n_nodes)
    for v in range(u.n_nodes - 1, -1, -1):
        p = u.parent[v]
        if p != -1 and inside[p]:
            top[v] = top[p]
    return top


def _balls(u: AtomicUMM, h: float, closed: bool):
    if h <= 0:
        raise ValueError("ball radius must be positive")
    top = _ball_tops(u, h, closed)
    groups: dict[int, list[int]] = {}
    for i in range(u.n_leaves):
        groups.setdefault(int(top[i]), []).append(i)
    # ordered by representative (smallest leaf index in the ball)
    return sorted(groups.items(), key=lambda kv: kv[1][0])


def ball_decomposition(u: AtomicUMM, h: float, closed: bool = True) -> list[tuple[Hashable, float]]:
    """Partition of the leaves into balls of radius h (``<= h`` if closed,
    ``< h`` otherwise), as (representative label, ball mass)."""
    return [(u.labels[members[0]], math.fsum(u.masses[members]))
            for _, members in _balls(u, h, closed)]


def cut_trunk(u: AtomicUMM, h: float, subtract: bool = True, closed: bool = True) -> AtomicUMM:
    """The h-trunk: balls of radius h become leaves carrying the ball mass and
    the aggregated mark-mass vector.  With ``subtract`` the remaining merge
    heights are lowered by h, otherwise distances are kept."""
    balls = _balls(u, h, closed)
    n_new = len(balls)
    node_map = {top: k for k, (top, _) in enumerate(balls)}
    leaves = [(u.labels[members[0]], math.fsum(u.masses[members]),
               _merge_marks(u.marks[i] for i in members)) for _, members in balls]
    inside = u.heights <= h if closed else u.heights < h
    above = [v for v in range(u.n_leaves, u.n_nodes) if not inside[v]]
    for k, v in enumerate(above):
        node_map[v] = n_new + k
    parent = [-1] * (n_new + len(above))
    heights = [0.0] * n_new
    for v in above:
        hv = u.heights[v]
        if hv != SENTINEL_HEIGHT and subtract:
            hv = hv - h
        heights.append(float(hv))
    for v, k in node_map.items():
        p = u.parent[v]
        if p != -1:
            parent[k] = node_map[int(p)]
    labels = [lf[0] for lf in leaves]
    masses = [lf[1] for lf in leaves]
    marks = [lf[2] for lf in leaves]
    if subtract and not closed and any(x == 0.0 for x in heights[n_new:]):
        # open balls meeting at height exactly h end up at distance 0: identify them
        full = cut_trunk(u, h, subtract=False, closed=False)
        D = full.distance_matrix().copy()
        off = ~np.eye(D.shape[0], dtype=bool) & (D != SENTINEL_HEIGHT)
        D[off] -= h
        return AtomicUMM.from_distance_matrix(D, masses, labels, marks)
    return AtomicUMM(labels, masses, marks, parent, heights)


@dataclasses.dataclass(frozen=True)
class FamilyVector:
    """Nonincreasing masses; trailing zeros are implicit."""

    entries: tuple[float, ...]

    def __post_init__(self):
        e = tuple(float(x) for x in self.entries)
        if any(x < 0 for x in e):
            raise ValueError("family sizes are nonnegative")
        e = tuple(sorted(e, reverse=True))
        while e and e[-1] == 0.0:
            e = e[:-1]
        object.__setattr__(self, "entries", e)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i] if i < len(self.entries) else 0.0

    def array(self, length: int | None = None) -> np.ndarray:
        n = len(self.entries) if length is None else length
        out = np.zeros(n)
        out[:min(n, len(self.entries))] = self.entries[:n]
        return out

    @property
    def total(self) -> float:
        return math.fsum(self.entries)

    def squares(self) -> float:
        return math.fsum(x * x for x in self.entries)


def family_size_decomposition(u: AtomicUMM, h: float) -> FamilyVector:
    return FamilyVector(tuple(m for _, m in ball_decomposition(u, h, closed=True)))


def ord_measure(masses: Iterable[float]) -> FamilyVector:
    """ord: atom masses in nonincreasing order."""
    return FamilyVector(tuple(masses))


def dS(f1: FamilyVector, f2: FamilyVector) -> float:
    n = max(len(f1), len(f2))
    return float(math.fsum(abs(a - b) for a, b in zip(f1.array(n), f2.array(n))))


# --------------------------------------------------------------------------
# distance matrix distributions


@dataclasses.dataclass(frozen=True)
class DistanceMatrixDistribution:
    """Pushforward of mu^k under (x_1..x_k) -> (distances, marks).

    ``distances[m]`` lists r(x_a, x_b) for pairs a < b in lexicographic
    order; ``marks[m]`` the k marks (``NO_MARK`` if unmarked).
    """

    order: int
    distances: np.ndarray
    marks: np.ndarray
    masses: np.ndarray

    @property
    def total(self) -> float:
        return math.fsum(self.masses)

    def mass_where(self, predicate) -> float:
        sel = np.array([bool(predicate(row)) for row in self.distances], dtype=bool)
        return math.fsum(self.masses[sel]) if sel.size else 0.0


DEFAULT_NU_BUDGET = 10 ** 6


def nu_k(u: AtomicUMM, k: int, mode: str = "exact", n: int = 10000, seed: int = 0,
         budget: int = DEFAULT_NU_BUDGET) -> DistanceMatrixDistribution:
    if k < 2:
        raise ValueError("order k must be at least 2")
    leaf, mark, mass = u.mark_atoms()
    D = u.distance_matrix()
    pairs = list(itertools.combinations(range(k), 2))
    if mode == "exact":
        if mass.size ** k > budget:
            raise ValueError(f"{mass.size}^{k} tuples exceed the exact-mode budget {budget}")
        idx = np.indices((mass.size,) * k).reshape(k, -1).T
        w = np.prod(mass[idx], axis=1)
    elif mode == "sample":
        rng = np.random.Generator(np.random.PCG64(seed))
        p = mass / mass.sum()
        idx = rng.choice(mass.size, size=(n, k), p=p)
        w = np.full(n, mass.sum() ** k / n)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    L = leaf[idx]
    dist = np.stack([D[L[:, a], L[:, b]] for a, b in pairs], axis=1)
    mk = mark[idx]
    key = np.concatenate([dist, mk.astype(np.float64)], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    tot = np.zeros(uniq.shape[0])
    np.add.at(tot, inv.ravel(), w)
    npair = len(pairs)
    return DistanceMatrixDistribution(k, uniq[:, :npair], uniq[:, npair:].astype(np.int64), tot)


def nu2_law(u: AtomicUMM) -> tuple[np.ndarray, np.ndarray]:
    """Law of r(x, y) under mu x mu as (sorted distances, masses)."""
    D = u.distance_matrix()
    W = np.outer(u.masses, u.masses)
    values, inv = np.unique(D.ravel(), return_inverse=True)
    out = np.zeros(values.size)
    np.add.at(out, inv.ravel(), W.ravel())
    return values, out


def nu2_cdf(u: AtomicUMM, t: float) -> float:
    values, masses = nu2_law(u)
    return math.fsum(masses[values <= t])


# --------------------------------------------------------------------------
# Prohorov distance on an explicit finite metric space

PROHOROV_ATOM_BUDGET = 2 ** 16
# flow deficits below this fraction of the total mass are rounding noise
FLOW_TOL = 1e-12


def _max_flow(w1, w2, C, b) -> float:
    """Max flow source -> atoms of mu1 -> atoms of mu2 (edges C <= b) -> sink."""
    G = nx.DiGraph()
    for i, w in enumerate(w1):
        G.add_edge("s", ("a", i), capacity=float(w))
    for j, w in enumerate(w2):
        G.add_edge(("b", j), "t", capacity=float(w))
    ii, jj = np.nonzero(C <= b)
    for i, j in zip(ii.tolist(), jj.tolist()):
        G.add_edge(("a", i), ("b", j))
    if not ii.size:
        return 0.0
    return float(nx.maximum_flow_value(G, "s", "t"))


def _prohorov_support(m1, m2, dist):
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    if m1.shape != m2.shape or dist.shape != (m1.size, m1.size):
        raise ValueError("measures must live on the same explicit space")
    if np.any(m1 < 0) or np.any(m2 < 0):
        raise ValueError("measures must be nonnegative")
    s1, s2 = np.flatnonzero(m1 > 0), np.flatnonzero(m2 > 0)
    return m1[s1], m2[s2], dist[np.ix_(s1, s2)]


def _breakpoints(C: np.ndarray) -> np.ndarray:
    return np.unique(np.concatenate([[0.0], C.ravel()]))


def prohorov(m1, m2, dist, budget: int = PROHOROV_ATOM_BUDGET) -> float:
    """Exact Prohorov distance between two finite measures on {0..p-1}.

    With breakpoints b_0 = 0 < b_1 < ... (the distinct pairwise distances)
    and F(b) the max flow using edges of length <= b, the distance equals
    min_i max(b_i, M - F(b_i)) where M is the larger total mass.  The first
    term increases and the second decreases in i, so the minimum is located
    by bisection with one max-flow per probe.
    """
    w1, w2, C = _prohorov_support(m1, m2, dist)
    if w1.size + w2.size > budget:
        raise ValueError(f"{w1.size + w2.size} atoms exceed the Prohorov budget {budget}")
    M = max(math.fsum(w1), math.fsum(w2))
    if w1.size == 0 or w2.size == 0:
        return M
    b = _breakpoints(C)
    deficit = {}

    def excess(i):
        if i not in deficit:
            e = M - _max_flow(w1, w2, C, b[i])
            deficit[i] = e if e > FLOW_TOL * M else 0.0
        return deficit[i]

    # smallest i with b_i >= excess(i)
    lo, hi = 0, b.size
    while lo < hi:
        mid = (lo + hi) // 2
        if b[mid] >= excess(mid):
            hi = mid
        else:
            lo = mid + 1
    candidates = []
    if lo < b.size:
        candidates.append(b[lo])
    if lo > 0:
        candidates.append(excess(lo - 1))
    return float(min(candidates))


_SUBSET_CACHE: dict[int, np.ndarray] = {}


def _subsets(a: int) -> np.ndarray:
    if a not in _SUBSET_CACHE:
        _SUBSET_CACHE[a] = ((np.arange(2 ** a)[:, None] >> np.arange(a)) & 1).astype(np.float64)
    return _SUBSET_CACHE[a]


def _prohorov_small(w1, w2, C) -> float:
    """Same value as :func:`prohorov` for at most 12 atoms on one side,
    evaluating the flow deficit at every breakpoint through Hall's
    condition (max over subsets A of mu1(A) - mu2(N(A)))."""
    M = max(math.fsum(w1), math.fsum(w2))
    if w1.size == 0 or w2.size == 0:
        return M
    if w1.size > w2.size:
        w1, w2, C = w2, w1, C.T
    b = _breakpoints(C)
    S = _subsets(w1.size)
    adj = (C[None, :, :] <= b[:, None, None]).astype(np.float64)
    reach = np.einsum("sa,tab->tsb", S, adj) > 0
    hall = (S @ w1)[None, :] - reach @ w2
    flow = w1.sum() - hall.max(axis=1)
    excess = M - flow
    excess[excess <= FLOW_TOL * M] = 0.0
    return float(np.min(np.maximum(b, excess)))


def prohorov_measures(mu: Mapping[Hashable, float], nu: Mapping[Hashable, float], metric) -> float:
    """Prohorov distance for measures given as {point: mass} and a metric
    callable on points."""
    pts = sorted(set(mu) | set(nu), key=repr)
    m1 = np.array([mu.get(p, 0.0) for p in pts])
    m2 = np.array([nu.get(p, 0.0) for p in pts])
    D = np.array([[metric(p, q) for q in pts] for p in pts])
    return prohorov(m1, m2, D)


# --------------------------------------------------------------------------
# bounds on the marked Gromov-Prohorov distance

EXHAUSTIVE_LEAVES = 7


def _mark_cost(ma: np.ndarray, mb: np.ndarray) -> np.ndarray:
    # discrete metric on the finite mark space, unmarked atoms share a mark
    return (ma[:, None] != mb[None, :]).astype(np.float64)


class _Embedding:
    """Cross distances of atoms of u and v under gluing along a relation."""

    def __init__(self, u: AtomicUMM, v: AtomicUMM):
        self.Du, self.Dv = u.distance_matrix(), v.distance_matrix()
        self.lu, mu_mark, self.wu = u.mark_atoms()
        self.lv, mv_mark, self.wv = v.mark_atoms()
        self.K = _mark_cost(mu_mark, mv_mark)
        self.M = max(math.fsum(self.wu), math.fsum(self.wv))

    def distortion(self, pairs) -> float:
        if len(pairs) < 2:
            return 0.0
        x = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        return float(np.max(np.abs(self.Du[np.ix_(x, x)] - self.Dv[np.ix_(y, y)])))

    def value(self, pairs) -> float:
        if not pairs:
            return self.M
        x = np.array([p[0] for p in pairs])
        y = np.array([p[1] for p in pairs])
        c = self.distortion(pairs) / 2.0
        # d(x,y) = min over glued pairs of r_u(x,x') + c + r_v(y',y)
        cross = np.min(self.Du[:, x][:, :, None] + self.Dv[y, :][None, :, :], axis=1) + c
        C = cross[np.ix_(self.lu, self.lv)] + self.K
        if min(self.wu.size, self.wv.size) <= 12:
            return _prohorov_small(self.wu, self.wv, C)
        return prohorov(np.concatenate([self.wu, np.zeros(self.wv.size)]),
                        np.concatenate([np.zeros(self.wu.size), self.wv]),
                        _block_metric(self.Du[np.ix_(self.lu, self.lu)], self.Dv[np.ix_(self.lv, self.lv)], C))


def _block_metric(A, B, C):
    return np.block([[A, C], [C.T, B]])


def _search_matchings(emb: _Embedding, nu: int, nv: int, best: float) -> float:
    """Branch and bound over partial injective leaf correspondences.

    A correspondence of distortion delta glues at cost delta/2, and every
    cross distance is then at least delta/2, so branches with
    delta/2 >= best cannot improve.  A correspondence is evaluated only
    when no free pair can be added without increasing its distortion,
    since adding such a pair only shortens cross distances.
    """
    Du, Dv = emb.Du, emb.Dv

    def extend(i, pairs, used, dis):
        nonlocal best
        if i == nu:
            for x in range(nu):
                if any(p[0] == x for p in pairs):
                    continue
                for y in range(nv):
                    if y in used:
                        continue
                    if all(abs(Du[x, a] - Dv[y, b]) <= dis for a, b in pairs):
                        return
            best = min(best, emb.value(pairs))
            return
        for y in range(nv):
            if y in used:
                continue
            nd = max([dis] + [abs(Du[i, a] - Dv[y, b]) for a, b in pairs])
            if nd / 2.0 >= best:
                continue
            extend(i + 1, pairs + [(i, y)], used | {y}, nd)
        extend(i + 1, pairs, used, dis)

    extend(0, [], frozenset(), 0.0)
    return best


def gp_upper_bound(u: AtomicUMM, v: AtomicUMM) -> float:
    emb = _Embedding(u, v)
    best = emb.M
    # candidate correspondences: shared labels, and leaves matched by mass rank
    shared = [(u.leaf_index(lab), v.leaf_index(lab)) for lab in u.labels if lab in v._index]
    ou, ov = np.argsort(-u.masses, kind="stable"), np.argsort(-v.masses, kind="stable")
    for pairs in (shared, list(zip(ou.tolist(), ov.tolist())), [(int(ou[0]), int(ov[0]))]):
        best = min(best, emb.value(pairs))
    if max(u.n_leaves, v.n_leaves) <= EXHAUSTIVE_LEAVES:
        best = _search_matchings(emb, u.n_leaves, v.n_leaves, best)
    return float(best)


def gp_lower_bound(u: AtomicUMM, v: AtomicUMM) -> float:
    """Lower bound from the laws of one sampled pairwise distance.

    If some embedding has Prohorov distance < eps then a sub-coupling of
    the sampling measures of mass >= M - eps moves points by < eps; its
    square moves pairwise distances by < 2 eps and misses mass at most
    2 eps M, hence d_Pr(nu2_u, nu2_v) <= 2 eps max(1, M).
    """
    xu, wu = nu2_law(u)
    xv, wv = nu2_law(v)
    pts = np.union1d(xu, xv)
    m1 = np.zeros(pts.size)
    m2 = np.zeros(pts.size)
    m1[np.searchsorted(pts, xu)] = wu
    m2[np.searchsorted(pts, xv)] = wv
    D = np.abs(pts[:, None] - pts[None, :])
    M = max(u.total_mass, v.total_mass, 1.0)
    return prohorov(m1, m2, D) / (2.0 * M)


def gp_bounds(u: AtomicUMM, v: AtomicUMM) -> tuple[float, float]:
    return gp_lower_bound(u, v), gp_upper_bound(u, v)


# --------------------------------------------------------------------------
# atomic measures on [0,1] x G


@dataclasses.dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Finite atomic measure on [0,1] x G in canonical form: atoms sorted
    by (point, mark), no duplicates, positive masses."""

    points: np.ndarray
    masses: np.ndarray
    marks: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).ravel()
        w = np.asarray(self.masses, dtype=np.float64).ravel()
        mk = (np.full(pts.size, NO_MARK, dtype=np.int64) if self.marks is None
              else np.asarray(self.marks, dtype=np.int64).ravel())
        if not (pts.size == w.size == mk.size):
            raise ValueError("points, masses and marks differ in length")
        if np.any(w < 0):
            raise ValueError("masses must be nonnegative")
        keep = w > 0
        pts, w, mk = pts[keep], w[keep], mk[keep]
        order = np.lexsort((mk, pts))
        pts, w, mk = pts[order], w[order], mk[order]
        if pts.size > 1:
            new = np.concatenate([[True], (np.diff(pts) != 0) | (np.diff(mk) != 0)])
            if not new.all():
                grp = np.cumsum(new) - 1
                w = np.bincount(grp, weights=w)
                pts, mk = pts[new], mk[new]
        for a in (pts, w, mk):
            a.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "masses", w)
        object.__setattr__(self, "marks", mk)

    def __eq__(self, other):
        if not isinstance(other, AtomicMeasure):
            return NotImplemented
        return (np.array_equal(self.points, other.points) and np.array_equal(self.masses, other.masses)
                and np.array_equal(self.marks, other.marks))

    __hash__ = None

    @classmethod
    def from_dict(cls, atoms: Mapping[float, float]) -> "AtomicMeasure":
        return cls(list(atoms.keys()), list(atoms.values()))

    @property
    def total(self) -> float:
        return math.fsum(self.masses)

    def __len__(self):
        return self.points.size

    def projected(self) -> "AtomicMeasure":
        """Sum over marks: the measure mu(. x G) on [0,1]."""
        return AtomicMeasure(self.points, self.masses)

    def support(self) -> np.ndarray:
        return np.unique(self.points)

    def mark_totals(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for g in np.unique(self.marks):
            out[int(g)] = math.fsum(self.masses[self.marks == g])
        return out

    def ord(self) -> FamilyVector:
        return ord_measure(self.masses)

    def to_list(self) -> list[dict]:
        return [{"label": float(x), "mass": float(w), "mark": None if g == NO_MARK else int(g)}
                for x, w, g in zip(self.points, self.masses, self.marks)]


def atom_square_measure(mu: AtomicMeasure) -> AtomicMeasure:
    """sum_x mu({x})^2 delta_x over the atoms of mu."""
    return AtomicMeasure(mu.points, mu.masses ** 2, mu.marks)


def psi(r):
    return np.maximum(0.0, 1.0 - np.asarray(r, dtype=np.float64))


def atomicity_functional(mu: AtomicMeasure, eps: float) -> float:
    """int int (psi(|x - y| / eps) - 1{x = y}) mu(dx) mu(dy) on [0,1]."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    m = mu.projected()
    R = np.abs(m.points[:, None] - m.points[None, :]) / eps
    K = psi(R) - np.eye(m.points.size)
    return float(max(m.masses @ K @ m.masses, 0.0))


# --------------------------------------------------------------------------
# random instances and tables


def random_dendrogram(rng: np.random.Generator, n_leaves: int, *, mass_denominator: int = 1024,
                      height_denominator: int = 16, max_height: int = 64,
                      n_sites: int = 0) -> AtomicUMM:
    """Random dendrogram with dyadic masses and heights, so that sums and
    height differences are exact in floating point."""
    masses = rng.integers(1, mass_denominator, size=n_leaves) / mass_denominator
    leaves = []
    for i in range(n_leaves):
        mark = None
        if n_sites:
            k = int(rng.integers(1, min(3, n_sites) + 1))
            sites = rng.choice(n_sites, size=k, replace=False)
            parts = rng.integers(1, 8, size=k).astype(float)
            parts = parts / parts.sum() * masses[i]
            parts[-1] = masses[i] - math.fsum(parts[:-1])
            mark = {int(g): float(p) for g, p in zip(sites, parts) if p > 0}
        leaves.append((i, float(masses[i]), mark))
    active = list(range(n_leaves))
    active_h = {i: 0 for i in range(n_leaves)}
    merges = []
    while len(active) > 1:
        k = int(rng.integers(2, min(4, len(active)) + 1))
        pick = sorted(rng.choice(len(active), size=k, replace=False).tolist())
        nodes = [active[p] for p in pick]
        floor = max(active_h[v] for v in nodes)
        h = int(floor + rng.integers(1, max_height // 4 + 2))
        merges.append((h / height_denominator, nodes))
        new = n_leaves + len(merges) - 1
        active = [v for j, v in enumerate(active) if j not in pick] + [new]
        active_h[new] = h
    return AtomicUMM.from_merges(leaves, merges)


def write_family_csv(path, rows: Iterable[tuple[float, FamilyVector]], seed=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "h", "index", "mass"])
        for h, f in rows:
            for i, m in enumerate(f.entries):
                w.writerow([seed, repr(float(h)), i, repr(m)])


def write_nu2_csv(path, u: AtomicUMM, seed=None):
    values, masses = nu2_law(u)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "distance", "mass"])
        for x, m in zip(values, masses):
            w.writerow([seed, repr(float(x)), repr(float(m))])
