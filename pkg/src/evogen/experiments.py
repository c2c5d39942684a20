"""Finite-system-scheme experiments: rescaled genealogies on growing tori
compared with the rate-D Kingman reference."""
from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np
from scipy import stats

from .coalescent import from_event_log, simulate_spatial_kingman
from .geo import (GeoTorus, MigrationKernel, diffusion_constant, green_integral,
                  symmetrize)
from .measrep import anchored_stats, build_measure_representation, check_smr
from .moran import (DEFAULT_EVENT_BUDGET, MoranConfig, coalescence_ticks, distances_from_ticks,
                    simulate)
from .umm import (AtomicMeasure, AtomicUMM, cut_trunk, family_size_decomposition, gp_upper_bound,
                  nu2_cdf, random_dendrogram)


def rescale_genealogy(u: AtomicUMM, volume: int) -> AtomicUMM:
    """Distances and masses divided by |G|, marks discarded."""
    return u.scaled(1.0 / volume, 1.0 / volume).drop_marks()


def theta(mu: AtomicMeasure, volume: int) -> AtomicMeasure:
    """Marks summed out and mass divided by |G|."""
    return AtomicMeasure(mu.points, mu.masses / volume)


def fss_diffusion_constant(kernel: MigrationKernel, gamma: float, truncation: int = 256) -> float:
    """D for the symmetrized kernel; the trivial geography has D = gamma."""
    if kernel.d == 0:
        return float(gamma)
    return diffusion_constant(gamma, green_integral(symmetrize(kernel), truncation=truncation))


@dataclasses.dataclass(frozen=True)
class FssConfig:
    d: int = 3
    sizes: tuple = (1, 2, 3)
    gamma: float = 1.0
    per_site_scale: int = 1
    kernel: MigrationKernel | None = None    # default: simple walk
    replicates: int = 200
    reference_replicates: int | None = None  # default: 4 * replicates
    grid: tuple = (1.0, 2.0, 3.0)            # rescaled heights, away from 0
    horizon: float = 40.0                    # rescaled time
    burn_in: float = 10.0                    # rescaled time of the equilibrium snapshot
    pair_replicates: int = 50
    seed: int = 0
    max_events: int = DEFAULT_EVENT_BUDGET   # per replicate

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if not self.grid or min(self.grid) < 0 or list(self.grid) != sorted(self.grid):
            raise ValueError("grid must be nonempty, nonnegative and sorted")
        if self.horizon < self.grid[-1]:
            raise ValueError("horizon must cover the grid")
        if self.burn_in <= 0 or self.pair_replicates < 0:
            raise ValueError("burn_in must be positive and pair_replicates nonnegative")

    def resolved_kernel(self) -> MigrationKernel:
        k = self.kernel if self.kernel is not None else MigrationKernel.simple(self.d)
        if k.d != self.d:
            raise ValueError("kernel dimension does not match d")
        return k

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["kernel"] = self.resolved_kernel().to_dict()
        out["sizes"], out["grid"] = list(self.sizes), list(self.grid)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "FssConfig":
        obj = dict(obj)
        if obj.get("kernel") is not None:
            obj["kernel"] = MigrationKernel.from_dict(obj["kernel"])
        for key in ("sizes", "grid"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _torus(d: int, N: int) -> GeoTorus:
    return GeoTorus.single_site() if d == 0 else GeoTorus(d, N)


def kingman_reference(n: int, rate: float, grid, replicates: int, seed: int):
    """Block counts of the rate-`rate` Kingman coalescent from n lineages at
    each grid height, and its time to one block, per replicate."""
    grid = np.asarray(grid, dtype=np.float64)
    site = GeoTorus.single_site()
    k0 = MigrationKernel.simple(0)
    counts = np.zeros((replicates, grid.size), dtype=np.int64)
    mrca = np.zeros(replicates)
    for r in range(replicates):
        p = simulate_spatial_kingman(n, site, rate, k0, seed=seed, replicate=r, stop_at=1)
        counts[r] = [p.n_blocks_at(h) for h in grid]
        mrca[r] = p.tau(1) if n > 1 else 0.0
    return counts, mrca


def equilibrium_pair_law(mc: MoranConfig, burn_in: float, grid, replicates: int,
                         max_events: int = DEFAULT_EVENT_BUDGET) -> dict:
    """Mean CDF on the grid of the pair-distance law of h_N(U_T) at the
    rescaled time T = burn_in.  The mass is renormalized to total one
    (empty sites leave the h_N-image with total mass below one)."""
    V = mc.torus.size
    T = burn_in * V
    run = dataclasses.replace(mc, horizon=T, seed=mc.seed + 1)
    grid = np.asarray(grid, dtype=np.float64)
    cdfs, truncated, events = [], 0, 0
    for r in range(replicates):
        log = simulate(run, replicate=r, max_events=max_events)
        events += log.n_events
        if log.truncated:
            truncated += 1
            continue
        D = distances_from_ticks(log, coalescence_ticks(log, T), T) / V
        sites = log.sites_at(T)
        w = 1.0 / np.bincount(sites, minlength=log.n_sites)[sites]
        w /= w.sum()
        ww = np.outer(w, w).ravel()
        order = np.argsort(D.ravel(), kind="stable")
        cum = np.cumsum(ww[order])
        idx = np.searchsorted(D.ravel()[order], grid, side="right")
        cdfs.append(np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0))
    cdf = np.mean(cdfs, axis=0) if cdfs else np.full(grid.size, np.nan)
    return {"cdf": cdf, "truncated": truncated, "events": events}


def fss_experiment(cfg: FssConfig) -> dict:
    """Simulate the Moran model on tori of side 2N for N in cfg.sizes and
    return, per size, the MRCA time and block-count / pair-moment
    comparisons against Kingman(D), all in time rescaled by |G|."""
    if 0 < cfg.d < 3:
        warnings.warn("FSS behaviour is only expected for d >= 3", stacklevel=2)
    kernel = cfg.resolved_kernel()
    D = fss_diffusion_constant(kernel, cfg.gamma)
    n_ref = cfg.reference_replicates or 4 * cfg.replicates
    grid = np.asarray(cfg.grid, dtype=np.float64)
    rows = []
    for k, N in enumerate(cfg.sizes):
        torus = _torus(cfg.d, N)
        V = torus.size
        mc = MoranConfig(torus, cfg.per_site_scale, cfg.gamma, kernel, cfg.horizon * V, seed=cfg.seed)
        n = mc.n
        mrca, atoms = [], []
        truncated = unresolved = events = 0
        for r in range(cfg.replicates):
            log = simulate(mc, replicate=r, stop_at_fixation=True, max_events=cfg.max_events)
            events += log.n_events
            if log.truncated:
                truncated += 1
                continue
            # grid points past fixation carry a single atom forever
            inside = grid * V <= log.end_time
            st = anchored_stats(log, 0.0, grid[inside] * V)
            atoms.append(np.concatenate([st.atoms, np.ones(int((~inside).sum()), dtype=np.int64)]))
            if log.fixation_time is None:
                unresolved += 1
            else:
                mrca.append(log.fixation_time / V)
        pair = equilibrium_pair_law(mc, cfg.burn_in, grid, cfg.pair_replicates, cfg.max_events)
        ref_counts, ref_mrca = kingman_reference(n, D, grid, n_ref, cfg.seed + 7919 * (k + 1))
        atoms = np.array(atoms).reshape(-1, grid.size)
        mrca = np.array(mrca)
        ks = [float(stats.ks_2samp(atoms[:, j], ref_counts[:, j]).statistic) if len(atoms) else math.nan
              for j in range(grid.size)]
        se = float(mrca.std(ddof=1) / math.sqrt(mrca.size)) if mrca.size > 1 else math.nan
        exp_cdf = 1.0 - np.exp(-D * grid)
        rows.append({
            "N": N, "volume": V, "n": n, "replicates": cfg.replicates,
            "completed": int(len(atoms)), "truncated": truncated + pair["truncated"],
            "unresolved": unresolved, "events": events + pair["events"],
            "mrca_mean": float(mrca.mean()) if mrca.size else math.nan, "mrca_se": se,
            "mrca_gap": float(abs(mrca.mean() - 2.0 / D)) if mrca.size else math.nan,
            "mrca_reference": float(ref_mrca.mean()),
            "ks": ks, "ks_mean": float(np.mean(ks)),
            "pair_cdf": pair["cdf"].tolist(), "pair_target": exp_cdf.tolist(),
            "pair_gap": float(np.max(np.abs(pair["cdf"] - exp_cdf))),
        })
    return {"config": cfg.to_dict(), "D": D, "mrca_target": 2.0 / D, "sizes": rows}


# --------------------------------------------------------------------------
# quick invariant suite (the `check` subcommand)


def _check_duality(rng) -> bool:
    V = [GeoTorus.single_site(), GeoTorus(1, 2), GeoTorus(3, 1)][int(rng.integers(3))]
    kernel = MigrationKernel.simple(V.d)
    mc = MoranConfig(V, int(rng.integers(1, 6)), float(rng.choice([0.5, 1.0, 2.0])), kernel,
                     float(rng.uniform(0.5, 4.0)), seed=int(rng.integers(2 ** 32)))
    log = simulate(mc)
    T = float(rng.uniform(0, mc.horizon))
    ticks = coalescence_ticks(log, T)
    path = from_event_log(log, T)
    return (np.array_equal(ticks, path.merge_tick_matrix())
            and np.array_equal(distances_from_ticks(log, ticks, T), path.distance_matrix()))


def _check_trunk(rng) -> bool:
    u = random_dendrogram(rng, int(rng.integers(2, 33)))
    h1 = float(rng.integers(1, 32)) / 16
    h2 = float(rng.integers(1, 32)) / 16
    cut = cut_trunk(u, h1)
    ok = family_size_decomposition(u, h1 + h2) == family_size_decomposition(cut, h2)
    f = family_size_decomposition(u, h1 + h2)
    ok &= nu2_cdf(u, h1 + h2) == math.fsum(m * m for m in f.entries)
    twice = cut_trunk(cut, h2)
    once = cut_trunk(u, h1 + h2)
    ok &= twice.total_mass == once.total_mass == u.total_mass
    ok &= all(family_size_decomposition(twice, h) == family_size_decomposition(once, h)
              for h in (0.25, 0.5, 1.0, 4.0))
    return bool(ok)


def _check_smr(rng) -> bool:
    V = [GeoTorus.single_site(), GeoTorus(1, 2)][int(rng.integers(2))]
    mc = MoranConfig(V, int(rng.integers(1, 5)), 1.0, MigrationKernel.simple(V.d), 3.0,
                     seed=int(rng.integers(2 ** 32)))
    log = simulate(mc)
    path = build_measure_representation(log, float(rng.uniform(0, 2.0)), seed=int(rng.integers(2 ** 32)))
    return check_smr(path).passed


def _check_gp(rng) -> bool:
    u = random_dendrogram(rng, int(rng.integers(2, 6)))
    h = float(rng.integers(1, 32)) / 16
    top = cut_trunk(u, h, subtract=False)
    return gp_upper_bound(u, top) <= h + 1e-9


INVARIANTS = {"duality": _check_duality, "trunk-identities": _check_trunk,
              "smr": _check_smr, "gp-trunk-bound": _check_gp}


def invariant_suite(seed: int = 0, replicates: int = 20) -> list[dict]:
    """Run each structural invariant on `replicates` random instances."""
    out = []
    for k, (name, check) in enumerate(INVARIANTS.items()):
        rng = np.random.default_rng([seed, k])
        failures = [r for r in range(replicates) if not check(rng)]
        out.append({"check": name, "instances": replicates, "failures": len(failures),
                    "first_failure": failures[0] if failures else -1})
    return out
