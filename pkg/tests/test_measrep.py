import json
import math

import numpy as np
import pytest
import sympy
from hypothesis import given, settings, strategies as st

from evogen.coalescent import from_event_log
from evogen.geo import GeoTorus, MigrationKernel
from evogen.measrep import (AtomicMeasurePath, anchor_rng, anchored_stats,
                            build_measure_representation, check_smr, mrca_time,
                            pair_distance_moment, push_forward, wf_absorption_expectation)
from evogen.moran import EventLog, MoranConfig, ancestor_map, genealogy_snapshot, simulate
from evogen.umm import AtomicMeasure, family_size_decomposition

FIG1 = EventLog.from_events(4, [(4.0, "res", 3, 0), (7.0, "res", 0, 2), (10.0, "res", 0, 1)], 12.0)


def moran(d=1, N=2, M=3, gamma=1.0, horizon=6.0, seed=0):
    torus = GeoTorus.single_site() if d == 0 else GeoTorus(d, N)
    return simulate(MoranConfig(torus, M, gamma, MigrationKernel.simple(torus.d), horizon, seed))


# -- construction ----------------------------------------------------------------

def test_figure1_anchor_masses():
    path = build_measure_representation(FIG1, 5.0, seed=1)
    steps = [(h, sorted(m.masses.tolist(), reverse=True)) for h, m in path]
    assert steps == [(0.0, [0.25] * 4), (2.0, [0.5, 0.25, 0.25]), (5.0, [0.75, 0.25])]
    assert path.horizon == 7.0
    assert sorted(path.at(3.0).masses.tolist()) == [0.25, 0.25, 0.5]
    # the atom of individual 0 absorbs those of 2 and then 1
    lab = path.labels
    assert path.at(6.0).points.tolist() == sorted([lab[0], lab[3]])
    assert check_smr(path)


def test_labels_reproducible_and_anchor_specific():
    assert anchor_rng(3, 1.5).random() == anchor_rng(3, 1.5).random()
    assert anchor_rng(3, 1.5).random() != anchor_rng(3, 2.5).random()
    log = moran(seed=4)
    a = build_measure_representation(log, 1.0, seed=7)
    b = build_measure_representation(log, 2.0, seed=7)
    assert not set(a.labels.tolist()) & set(b.labels.tolist())
    assert np.array_equal(a.labels, build_measure_representation(log, 1.0, seed=7).labels)
    assert np.all((a.labels >= 0) & (a.labels < 1))
    with pytest.raises(ValueError):
        build_measure_representation(log, 7.0)


def test_explicit_path_validation():
    mu = AtomicMeasure([0.5], [1.0])
    with pytest.raises(ValueError):
        AtomicMeasurePath(0.0, [0.5], [(0.5, mu)])
    with pytest.raises(ValueError):
        AtomicMeasurePath(0.0, [0.5], [(0.0, mu), (0.0, mu)])
    with pytest.raises(ValueError):
        AtomicMeasurePath(0.0, [0.5])
    p = AtomicMeasurePath(0.0, [0.5], [(0.0, mu), (1.0, mu)])
    with pytest.raises(ValueError):
        p.at(-1.0)


# -- structural checks --------------------------------------------------------------

def explicit(*measures):
    return AtomicMeasurePath(0.0, [], [(float(k), m) for k, m in enumerate(measures)])


def test_check_smr_detects_violations():
    start = AtomicMeasure([0.1, 0.2, 0.3], [0.5, 0.25, 0.25])
    good = explicit(start, AtomicMeasure([0.1, 0.3], [0.75, 0.25]), AtomicMeasure([0.1], [1.0]))
    assert check_smr(good).passed
    new_atom = explicit(start, AtomicMeasure([0.1, 0.4], [0.75, 0.25]))
    r = check_smr(new_atom)
    assert not r and r.violation == "support-nesting" and r.h == 1.0
    leak = explicit(start, AtomicMeasure([0.1, 0.3], [0.7, 0.25]))
    assert check_smr(leak).violation == "mass-conservation"
    empty = explicit(start, AtomicMeasure([], []))
    assert check_smr(empty).violation == "pure-atomicity"
    outside = explicit(AtomicMeasure([1.5], [1.0]))
    assert check_smr(outside).violation == "pure-atomicity"


def test_check_smr_mark_slices():
    # mass may move between atoms inside a slice but not between slices
    a = AtomicMeasure([0.1, 0.2], [0.5, 0.5], [0, 1])
    b = AtomicMeasure([0.1, 0.2], [1.0, 0.5], [0, 1])
    assert check_smr(explicit(a, AtomicMeasure([0.1, 0.1], [0.5, 0.5], [0, 1]))).passed
    assert check_smr(explicit(a, b)).violation == "mass-conservation"


def test_check_smr_atom_count_against_other_log():
    path = build_measure_representation(FIG1, 5.0)
    other = EventLog.from_events(4, [(6.0, "res", 1, 2)], 12.0)
    r = check_smr(path, log=other)
    assert not r and r.violation == "atom-count"


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([(0, 1), (1, 2), (3, 1)]), st.floats(0.0, 5.0))
def test_simulated_paths_pass_smr(seed, geo, T):
    d, N = geo
    log = moran(d=d, N=N, M=2, seed=seed)
    assert check_smr(build_measure_representation(log, T, seed=seed)).passed


# -- compatibility with genealogies and other anchors ----------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 3.0), st.floats(0.01, 1.0))
def test_ord_equals_family_sizes_single_site(seed, T, x):
    # n = 16 makes every mass dyadic, so equality is exact; T > 0 keeps
    # never-coalesced pairs (distance T + h) outside the closed h-balls
    log = moran(d=0, M=16, seed=seed)
    h = x * (6.0 - T)
    path = build_measure_representation(log, T, seed=seed)
    f = family_size_decomposition(genealogy_snapshot(log, T + h), h)
    assert path.at(h).ord() == f


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 3.0), st.floats(0.01, 1.0))
def test_ord_matches_family_sizes_spatial(seed, T, x):
    log = moran(d=1, N=2, M=3, seed=seed)
    h = x * (6.0 - T)
    mu = build_measure_representation(log, T).at(h)
    f = family_size_decomposition(genealogy_snapshot(log, T + h), h)
    # ball masses of the genealogy sum over sites; atoms of X_h are per site
    per_type = {}
    for p, w in zip(mu.points, mu.masses):
        per_type[p] = per_type.get(p, 0.0) + w
    got = sorted(per_type.values(), reverse=True)
    assert len(got) == len(f) and np.allclose(got, f.entries, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
def test_anchored_paths_compatible_by_push_forward(seed, T, delta, h):
    log = moran(seed=seed)
    T2 = T + delta
    early = build_measure_representation(log, T, seed=1)
    late = build_measure_representation(log, T2, seed=1)
    anc = ancestor_map(log, T2, T)
    mapping = {late.labels[j]: early.labels[anc[j]] for j in range(log.n)}
    lhs = early.at(h + delta)
    rhs = push_forward(late.at(h), mapping)
    assert np.array_equal(lhs.points, rhs.points) and np.array_equal(lhs.marks, rhs.marks)
    assert np.allclose(lhs.masses, rhs.masses, atol=1e-12, rtol=0)


# -- statistics -------------------------------------------------------------------------

def test_mrca_duality_with_block_count():
    log = simulate(MoranConfig(GeoTorus(1, 2), 3, 1.0, MigrationKernel.simple(1), 200.0, 5))
    T = 2.0
    h = mrca_time(build_measure_representation(log, T))
    assert h is not None and h > 0
    assert from_event_log(log, T + h).n_blocks_at(h) == 1
    h_before = np.nextafter(h, 0.0)
    assert from_event_log(log, T + h_before).n_blocks_at(h_before) > 1
    assert anchored_stats(log, T, []).mrca == h
    # explicit path agrees
    steps = list(build_measure_representation(log, T))
    assert mrca_time(AtomicMeasurePath(T, [], steps)) == h


def test_mrca_none_without_fixation():
    path = build_measure_representation(moran(gamma=0.0), 0.0)
    assert mrca_time(path) is None


def test_anchored_stats_match_materialized_path():
    log = moran(d=1, N=2, M=3, seed=11)
    grid = [0.0, 0.5, 1.0, 2.5, 4.0]
    st_ = anchored_stats(log, 1.0, grid)
    path = build_measure_representation(log, 1.0)
    for k, h in enumerate(grid):
        m = path.at(h)
        proj = m.projected()
        assert st_.atoms[k] == proj.points.size
        assert st_.square_sums[k] == pytest.approx(math.fsum((proj.masses / 4) ** 2), abs=1e-14)
    with pytest.raises(ValueError):
        anchored_stats(log, 1.0, [1.0, 0.5])
    with pytest.raises(ValueError):
        anchored_stats(log, 1.0, [10.0])


def test_anchored_stats_families():
    log = moran(d=0, M=8, seed=2)
    fam = [0] * 8
    assert anchored_stats(log, 0.0, [0.0, 3.0], fam).square_sums.tolist() == [1.0, 1.0]
    fam = [0, 0, 0, 0, 1, 1, 1, 1]
    assert anchored_stats(log, 0.0, [0.0], fam).square_sums[0] == 0.5


def test_pair_moment_at_zero_is_one_over_n():
    logs = [moran(d=0, M=8, seed=s) for s in range(3)]
    paths = [build_measure_representation(lg, 1.0) for lg in logs]
    assert pair_distance_moment(paths, 0.0) == 1 / 8
    explicit_paths = [AtomicMeasurePath(1.0, p.labels, list(p)) for p in paths]
    assert pair_distance_moment(explicit_paths, 0.0) == pytest.approx(1 / 8)
    with pytest.raises(ValueError):
        pair_distance_moment([], 1.0)


def test_martingale_mean_of_fixed_atom_set():
    cfg = MoranConfig(GeoTorus.single_site(), 8, 1.0, MigrationKernel.simple(0), 3.0, 13)
    # X_h(A) for A = the atoms of individuals 0..2
    xs = []
    for r in range(3000):
        log = simulate(cfg, r)
        xs.append([np.mean(ancestor_map(log, h, 0.0) < 3) for h in (0.0, 0.5, 1.5, 3.0)])
    xs = np.array(xs)
    se = xs.std(axis=0, ddof=1) / math.sqrt(xs.shape[0])
    assert np.all(np.abs(xs.mean(axis=0) - 3 / 8) <= 3 * se + 1e-12)


def test_wf_absorption_expectation():
    n = sympy.symbols("n", positive=True)
    closed_form = -2 * sympy.binomial(n, n - 1) * (n - 1) / n * sympy.log((n - 1) / n)
    simplified = -2 * (n - 1) * sympy.log(1 - 1 / n)
    for k in (2, 3, 7, 50):
        assert sympy.N(closed_form.subs(n, k) - simplified.subs(n, k), 30) == pytest.approx(0, abs=1e-25)
    assert sympy.simplify(sympy.expand_func(closed_form) - simplified) == 0
    assert wf_absorption_expectation(2) == pytest.approx(2 * math.log(2), abs=1e-15)
    assert abs(wf_absorption_expectation(10 ** 6) - 2) < 1e-5
    vals = [wf_absorption_expectation(k) for k in range(2, 2000)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        wf_absorption_expectation(1)


def test_write_jsonl(tmp_path):
    path = build_measure_representation(FIG1, 5.0, seed=3)
    path.write_jsonl(tmp_path / "m.jsonl", seed=3)
    recs = [json.loads(s) for s in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert recs[0] == {"kind": "header", "anchor": 5.0, "seed": 3}
    assert [r["h"] for r in recs[1:]] == [0.0, 2.0, 5.0]
    assert set(recs[1]["atoms"][0]) == {"label", "mass", "mark"}
    assert math.fsum(a["mass"] for a in recs[-1]["atoms"]) == 1.0
