"""Finite tori, random-walk kernels and the diffusion constant of the
finite system scheme."""
from __future__ import annotations

import dataclasses
import json
import math
import warnings

import numba
import numpy as np
import scipy.sparse

ROW_SUM_TOL = 1e-12


@dataclasses.dataclass(frozen=True)
class GeoTorus:
    """The group (-N, N]^d with coordinatewise addition mod 2N.

    Elements are addressed by a flat index in ``range(size)``; ``coords``
    converts back to the centred representative.  ``d == 0`` is the trivial
    one-site geography used for non-spatial runs.
    """

    d: int
    N: int = 1

    def __post_init__(self):
        if self.d < 0 or self.N < 1:
            raise ValueError(f"invalid torus d={self.d}, N={self.N}")

    @classmethod
    def single_site(cls) -> "GeoTorus":
        return cls(d=0, N=1)

    @property
    def side(self) -> int:
        return 2 * self.N

    @property
    def size(self) -> int:
        return self.side ** self.d

    def _weights(self) -> np.ndarray:
        return self.side ** np.arange(self.d, dtype=np.int64)

    def index(self, coords) -> np.ndarray | int:
        c = np.asarray(coords, dtype=np.int64)
        if self.d == 0:
            return 0 if c.ndim <= 1 else np.zeros(c.shape[0], dtype=np.int64)
        r = np.mod(c, self.side) @ self._weights()
        return int(r) if np.ndim(r) == 0 else r

    def coords(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        digits = (idx[..., None] // self._weights()) % self.side
        return np.where(digits > self.N, digits - self.side, digits)

    def elements(self) -> np.ndarray:
        return self.coords(np.arange(self.size))

    @property
    def identity(self) -> int:
        return 0

    def add(self, x, y):
        return self.index(self.coords(x) + self.coords(y))

    def neg(self, x):
        return self.index(-self.coords(x))

    def to_json(self) -> dict:
        return {"d": self.d, "N": self.N}


@dataclasses.dataclass(frozen=True)
class MigrationKernel:
    """Homogeneous kernel a(x, y) = a(0, y - x) with finite support on Z^d."""

    offsets: np.ndarray
    probs: np.ndarray
    homogeneous: bool = True

    def __post_init__(self):
        offsets = np.atleast_2d(np.asarray(self.offsets, dtype=np.int64))
        probs = np.asarray(self.probs, dtype=np.float64).ravel()
        if offsets.shape[0] != probs.shape[0]:
            raise ValueError("offsets and probs differ in length")
        if np.any(probs < 0) or np.any(probs > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if abs(probs.sum() - 1.0) > ROW_SUM_TOL:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        # canonical form: merged duplicates, zero entries dropped, sorted offsets
        merged: dict[tuple, float] = {}
        for o, p in zip(map(tuple, offsets), probs):
            merged[o] = merged.get(o, 0.0) + float(p)
        keys = sorted(k for k, p in merged.items() if p > 0)
        d = offsets.shape[1]
        object.__setattr__(self, "offsets", np.array(keys, dtype=np.int64).reshape(len(keys), d))
        object.__setattr__(self, "probs", np.array([merged[k] for k in keys]))
        self.offsets.setflags(write=False)
        self.probs.setflags(write=False)

    @property
    def d(self) -> int:
        return self.offsets.shape[1]

    @property
    def reach(self) -> int:
        return int(np.abs(self.offsets).max()) if self.offsets.size else 0

    @classmethod
    def simple(cls, d: int) -> "MigrationKernel":
        """Nearest-neighbour walk on Z^d (the trivial kernel when d == 0)."""
        if d == 0:
            return cls(np.zeros((1, 0), dtype=np.int64), [1.0])
        eye = np.eye(d, dtype=np.int64)
        return cls(np.vstack([eye, -eye]), np.full(2 * d, 1.0 / (2 * d)))

    @classmethod
    def from_dict(cls, obj: dict) -> "MigrationKernel":
        d = int(obj["d"])
        offsets = np.asarray(obj["offsets"], dtype=np.int64).reshape(-1, d)
        return cls(offsets, obj["probs"])

    @classmethod
    def from_json(cls, path) -> "MigrationKernel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"d": self.d, "offsets": self.offsets.tolist(), "probs": self.probs.tolist()}

    def reversed(self) -> "MigrationKernel":
        """The time-reversed kernel a_bar(x, y) = a(y, x)."""
        return MigrationKernel(-self.offsets, self.probs)

    def __eq__(self, other):
        if not isinstance(other, MigrationKernel):
            return NotImplemented
        return (np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.probs, other.probs))

    def __hash__(self):
        return hash((self.offsets.tobytes(), self.probs.tobytes()))


def _check_dims(a: MigrationKernel, torus: GeoTorus):
    if a.d != torus.d:
        raise ValueError(f"kernel dimension {a.d} does not match torus dimension {torus.d}")


def wrapped_row(a: MigrationKernel, torus: GeoTorus) -> np.ndarray:
    """a^N(0, .) as a dense vector over the torus elements."""
    _check_dims(a, torus)
    row = np.zeros(torus.size)
    np.add.at(row, np.atleast_1d(torus.index(a.offsets)), a.probs)
    return row


def wrap_kernel(a: MigrationKernel, torus: GeoTorus) -> scipy.sparse.csr_matrix:
    """Row-stochastic a^N(i, j) = sum_k a(i, j + 2Nk) on the torus."""
    row = wrapped_row(a, torus)
    targets = np.flatnonzero(row)
    V = torus.size
    src = np.repeat(np.arange(V), targets.size)
    if torus.d == 0:
        dst = np.zeros_like(src)
    else:
        dst = torus.index(torus.coords(src) + np.tile(torus.coords(targets), (V, 1)))
    vals = np.tile(row[targets], V)
    return scipy.sparse.csr_matrix((vals, (src, dst)), shape=(V, V))


def symmetrize(a: MigrationKernel) -> MigrationKernel:
    """a_hat(0, x) = (a(0, x) + a(0, -x)) / 2."""
    return MigrationKernel(np.vstack([a.offsets, -a.offsets]),
                           np.concatenate([a.probs, a.probs]) / 2.0)


def move_table(a: MigrationKernel, torus: GeoTorus) -> tuple[np.ndarray, np.ndarray]:
    """Lookup tables for simulators.

    Returns ``(dest, cum)`` where ``dest[x, k]`` is the k-th possible
    non-trivial destination from site x and ``cum`` the cumulative jump law
    conditioned on leaving (rows of ``dest`` share ``cum``).  Self-jumps are
    invisible to every observable and are dropped; the leaving rate is
    ``1 - a^N(0, 0)``, returned implicitly as ``cum`` being normalized and
    ``stay = a^N(0,0)`` available from :func:`wrapped_row`.
    """
    row = wrapped_row(a, torus)
    row[0] = 0.0
    targets = np.flatnonzero(row)
    V = torus.size
    if targets.size == 0:
        return np.zeros((V, 0), dtype=np.int64), np.zeros(0)
    src = np.repeat(np.arange(V), targets.size)
    dst = torus.index(torus.coords(src) + np.tile(torus.coords(targets), (V, 1)))
    cum = np.cumsum(row[targets]) / row[targets].sum()
    cum[-1] = 1.0
    return np.asarray(dst, dtype=np.int64).reshape(V, targets.size), cum


def check_irreducible(a: MigrationKernel, steps: int = 64) -> bool:
    """Finite-horizon check that the symmetrized walk can reach each unit
    vector.  Only a truncated search, so failures are warned about."""
    if a.d == 0:
        return True
    reached = {tuple([0] * a.d)}
    sym = np.vstack([a.offsets, -a.offsets])
    frontier = set(reached)
    for _ in range(steps):
        frontier = {tuple(np.add(x, o)) for x in frontier for o in sym
                    if max(abs(c) for c in np.add(x, o)) <= steps} - reached
        if not frontier:
            break
        reached |= frontier
    units = [tuple(int(i == k) for i in range(a.d)) for k in range(a.d)]
    ok = all(u in reached for u in units)
    if not ok:
        warnings.warn("kernel does not appear irreducible within the search horizon")
    return ok


# --------------------------------------------------------------------------
# Green function at the origin


class DivergentGreenError(ValueError):
    """Raised when a diffusion constant is requested from a divergent g."""


@dataclasses.dataclass(frozen=True)
class GreenEstimate:
    value: float            # estimate of g = int_0^inf a_hat_2s(0,0) ds
    partial: float          # (1/2) * sum_{k <= truncation} a_hat^(k)(0,0)
    tail: float             # extrapolated (1/2) * sum_{k > truncation}
    truncation: int
    divergent: bool
    method: str
    stderr: float = 0.0

    def __float__(self):
        if self.divergent:
            raise DivergentGreenError("green integral is divergent")
        return self.value


@numba.njit(cache=True)
def _box_return_probs(shifts, probs, steps, box_shape, pad):
    """p_k(0), k = 0..steps, for the walk killed on leaving a padded box.

    The box is stored flat; ``shifts`` are the flat-index displacements of
    the kernel offsets.  Cells in the padding layer are zeroed after each
    step, which kills mass leaving the interior (flat wrap-around only ever
    lands in the padding).
    """
    d = box_shape.shape[0]
    size = 1
    for s in box_shape:
        size *= s
    strides = np.empty(d, np.int64)
    acc = 1
    for k in range(d - 1, -1, -1):
        strides[k] = acc
        acc *= box_shape[k]
    centre = 0
    for k in range(d):
        centre += (box_shape[k] // 2) * strides[k]
    interior = np.ones(size, np.bool_)
    for idx in range(size):
        rem = idx
        for k in range(d):
            c = rem // strides[k]
            rem -= c * strides[k]
            if c < pad or c >= box_shape[k] - pad:
                interior[idx] = False
                break
    cur = np.zeros(size)
    nxt = np.zeros(size)
    cur[centre] = 1.0
    out = np.zeros(steps + 1)
    out[0] = 1.0
    lo = centre
    hi = centre + 1
    max_shift = 0
    for s in shifts:
        if abs(s) > max_shift:
            max_shift = abs(s)
    for step in range(1, steps + 1):
        nlo = max(lo - max_shift, 0)
        nhi = min(hi + max_shift, size)
        for idx in range(nlo, nhi):
            nxt[idx] = 0.0
        for idx in range(lo, hi):
            m = cur[idx]
            if m != 0.0:
                for k in range(shifts.shape[0]):
                    nxt[idx + shifts[k]] += m * probs[k]
        for idx in range(nlo, nhi):
            if not interior[idx]:
                nxt[idx] = 0.0
        out[step] = nxt[centre]
        cur, nxt = nxt, cur
        lo, hi = nlo, nhi
    return out


def return_probabilities(a_hat: MigrationKernel, steps: int) -> np.ndarray:
    """Return probabilities a_hat^(k)(0,0) for k = 0..steps on Z^d.

    Uses a box wide enough that the mass lost through its faces is far below
    the precision of the partial sums (radius of five standard deviations of
    the walk after ``steps`` steps, never more than the exact reach).
    """
    d = a_hat.d
    if d == 0:
        return np.ones(steps + 1)
    reach = max(a_hat.reach, 1)
    var = float(np.max((a_hat.offsets.astype(float) ** 2).T @ a_hat.probs))
    radius = min(steps * reach, reach + int(math.ceil(5.0 * math.sqrt(steps * max(var, 1e-300)))))
    radius = max(radius, reach)
    pad = reach
    side = 2 * (radius + pad) + 1
    box_shape = np.full(d, side, dtype=np.int64)
    strides = side ** np.arange(d - 1, -1, -1, dtype=np.int64)
    shifts = a_hat.offsets @ strides
    return _box_return_probs(shifts.astype(np.int64), a_hat.probs.copy(), steps, box_shape, pad)


def _tail_from_sums(S: np.ndarray, K: int) -> tuple[bool, float]:
    """Divergence test and tail extrapolation from partial sums S[0..K].

    For a transient walk the increments of the Green partial sums decay like
    k^(-d_eff/2) with d_eff > 2.  Comparing the last-quarter increment at K
    with the one at K/2 estimates d_eff without any scale threshold; the
    same power law then extrapolates the tail.
    """
    q1 = S[K] - S[(3 * K) // 4]
    half = K // 2
    q0 = S[half] - S[(3 * half) // 4]
    if q1 <= 0.0:
        return False, 0.0
    if q0 <= 0.0:
        return True, math.inf
    ratio = q1 / q0
    # ratio = 2^(1 - d_eff/2); d_eff <= 2 means ratio >= 1 (recurrent)
    d_eff = 2.0 * (1.0 - math.log2(ratio))
    if d_eff <= 2.25:
        return True, math.inf
    beta = d_eff / 2.0 - 1.0
    return False, q1 / ((4.0 / 3.0) ** beta - 1.0)


def green_integral(a_hat: MigrationKernel, truncation: int = 256, method: str = "power-sum",
                   seed: int = 0, walkers: int = 20000) -> GreenEstimate:
    """Estimate g = int_0^inf a_hat_{2s}(0,0) ds = (1/2) sum_k a_hat^(k)(0,0).

    The identity follows from mixing the discrete-time powers with a rate-2
    Poisson clock: int_0^inf e^{-2s} (2s)^k / k! ds = 1/2 for every k.
    """
    if truncation < 8:
        raise ValueError("truncation must be at least 8")
    if not is_symmetric(a_hat):
        raise ValueError("green_integral expects a symmetric kernel")
    if method == "power-sum":
        p = return_probabilities(a_hat, truncation)
        S = np.cumsum(p)
        divergent, tail = _tail_from_sums(S, truncation)
        partial = 0.5 * S[truncation]
        value = math.inf if divergent else partial + 0.5 * tail
        return GreenEstimate(value, partial, 0.5 * tail, truncation, divergent, method)
    if method == "monte-carlo":
        visits, se = _mc_visits(a_hat, truncation, walkers, seed)
        partial = 0.5 * visits
        return GreenEstimate(partial, partial, 0.0, truncation, False, method, 0.5 * se)
    raise ValueError(f"unknown method {method!r}")


def is_symmetric(a: MigrationKernel, tol: float = 1e-15) -> bool:
    law = {tuple(o): p for o, p in zip(a.offsets.tolist(), a.probs)}
    return all(abs(p - law.get(tuple(-x for x in o), 0.0)) <= tol for o, p in law.items())


def _mc_visits(a_hat: MigrationKernel, steps: int, walkers: int, seed: int):
    """Mean number of visits to the origin in steps 0..steps and its SE."""
    rng = np.random.Generator(np.random.PCG64(seed))
    pos = np.zeros((walkers, a_hat.d), dtype=np.int64)
    visits = np.ones(walkers)
    cum = np.cumsum(a_hat.probs)
    cum[-1] = 1.0
    for _ in range(steps):
        k = np.searchsorted(cum, rng.random(walkers), side="right")
        pos += a_hat.offsets[k]
        visits += ~pos.any(axis=1)
    return visits.mean(), visits.std(ddof=1) / math.sqrt(walkers)


def diffusion_constant(gamma: float, g) -> float:
    """D = gamma / (1 + gamma g)."""
    if isinstance(g, GreenEstimate):
        if g.divergent:
            raise DivergentGreenError("cannot form D from a divergent green integral")
        g = g.value
    if not math.isfinite(g) or g < 0:
        raise DivergentGreenError(f"invalid green integral {g!r}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return gamma / (1.0 + gamma * g)
