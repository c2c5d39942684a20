import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from evogen.coalescent import (MERGE, RELABEL, LabeledPartition, block_frequencies_at,
                               from_event_log, simulate_spatial_kingman)
from evogen.geo import GeoTorus, MigrationKernel
from evogen.moran import (EventLog, MoranConfig, coalescence_ticks, distances_from_ticks,
                          simulate)

from oracles import kingman_mean_mrca, replay_ancestors, replay_partition

FIG4 = EventLog.from_events(4, [(1.0, "res", 1, 2), (2.0, "res", 1, 0), (3.0, "res", 2, 3)], 4.0)


def as_events(log):
    return [(float(t), "res" if k == 0 else "mig", int(a), int(b))
            for t, k, a, b in zip(log.times, log.kinds, log.a, log.b)]


def moran(d=1, N=2, M=3, gamma=1.0, horizon=4.0, seed=0):
    torus = GeoTorus.single_site() if d == 0 else GeoTorus(d, N)
    return simulate(MoranConfig(torus, M, gamma, MigrationKernel.simple(torus.d), horizon, seed))


def test_labeled_partition_canonical_order():
    p = LabeledPartition(((3, 2), (0,), (1, 4)), (7, 5, 6))
    assert p.blocks == ((0,), (1, 4), (2, 3))
    assert p.labels == (5, 6, 7)
    assert len(p) == 3
    with pytest.raises(ValueError):
        LabeledPartition(((0, 1), (1,)), (0, 0))


def test_figure5_partitions():
    path = from_event_log(FIG4, 4.0)
    assert path.partition_at(0.5).blocks == ((0,), (1,), (2,), (3,))
    assert path.partition_at(1.5).blocks == ((0,), (1,), (2, 3))
    assert path.partition_at(2.5).blocks == ((0, 1), (2, 3))
    assert path.partition_at(3.5).blocks == ((0, 1, 2, 3),)
    assert path.merge_times.tolist() == [1.0, 2.0, 3.0]
    assert [path.n_blocks_at(h) for h in (0.0, 1.0, 2.0, 3.0, 4.0)] == [4, 3, 2, 1, 1]
    assert path.tau(4) == 0.0 and path.tau(2) == 2.0 and path.tau(1) == 3.0
    D = path.distance_matrix()
    assert D[2, 3] == 1.0 and D[0, 1] == 2.0 and D[0, 3] == 3.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_backward_partition_matches_replay(seed, x, y):
    log = moran(seed=seed)
    T = 4.0 * max(x, y)
    h = T * min(x, y)
    path = from_event_log(log, T)
    assert [list(b) for b in path.partition_at(h).blocks] == replay_partition(log.n, as_events(log), T, h)
    # labels are the sites of the ancestors at time T - h
    sites = log.sites_at(T - h)
    part = path.partition_at(h)
    anc = replay_ancestors(log.n, as_events(log), T, T - h)
    for block, g in zip(part.blocks, part.labels):
        assert g == sites[anc[block[0]]]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0, 1, 3]), st.floats(0.0, 1.0))
def test_duality_tick_exact(seed, d, x):
    log = moran(d=d, N=1, M=2, seed=seed)
    T = 4.0 * x
    ticks = coalescence_ticks(log, T)
    path = from_event_log(log, T)
    assert np.array_equal(ticks, path.merge_tick_matrix())
    assert np.array_equal(distances_from_ticks(log, ticks, T), path.distance_matrix())


def test_gamma_zero_stays_singletons():
    log = moran(gamma=0.0, seed=3)
    path = from_event_log(log, 4.0)
    assert path.merge_times.size == 0
    assert len(path.partition_at(4.0)) == log.n
    assert np.all(path.kinds == RELABEL)
    direct = simulate_spatial_kingman(6, GeoTorus(1, 2), 0.0, MigrationKernel.simple(1), t_max=5.0)
    assert direct.merge_times.size == 0 and direct.tau(1) is None


def test_single_lineage_never_merges():
    p = simulate_spatial_kingman(1, GeoTorus(1, 2), 1.0, MigrationKernel.simple(1), t_max=3.0)
    assert p.merge_times.size == 0 and p.tau(1) == 0.0
    assert p.distance_matrix().shape == (1, 1)


def test_direct_simulation_structure():
    torus = GeoTorus(3, 1)
    p = simulate_spatial_kingman(30, torus, 2.0, MigrationKernel.simple(3), seed=5)
    assert p.n_blocks_at(p.horizon) == 1
    assert np.all(np.diff(p.times) > 0)
    # merges only happen between co-located blocks
    labels = {i: int(g) for i, g in enumerate(p.initial_labels)}
    for k, x, y in zip(p.kinds, p.x, p.y):
        if k == MERGE:
            assert x < y and labels[x] == labels[y]
            labels.pop(int(y))
        else:
            assert labels[int(x)] != int(y)
            labels[int(x)] = int(y)
    part = p.partition_at(p.horizon)
    assert part.labels == (labels[0],)


def test_kingman_mean_mrca():
    n = 10
    site = GeoTorus.single_site()
    k0 = MigrationKernel.simple(0)
    t = np.array([simulate_spatial_kingman(n, site, 1.0, k0, seed=1, replicate=r).tau(1)
                  for r in range(4000)])
    assert abs(t.mean() - kingman_mean_mrca(n)) <= 3 * t.std(ddof=1) / math.sqrt(t.size)
    assert kingman_mean_mrca(n) == pytest.approx(2 * (1 - 1 / n))


def test_kingman_rate_scales_time():
    site = GeoTorus.single_site()
    k0 = MigrationKernel.simple(0)
    t = np.array([simulate_spatial_kingman(2, site, 4.0, k0, seed=2, replicate=r).tau(1)
                  for r in range(4000)])
    assert abs(t.mean() - 0.25) <= 3 * t.std(ddof=1) / math.sqrt(t.size)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.lists(st.integers(0, 11), min_size=1, max_size=8, unique=True))
def test_restriction_consistency(seed, subset):
    log = moran(seed=seed)
    path = from_event_log(log, 3.0)
    sub = path.restrict(subset)
    idx = sorted(subset)
    assert np.array_equal(sub.distance_matrix(), path.distance_matrix()[np.ix_(idx, idx)])
    for h in (0.5, 1.5, 3.0):
        full = path.partition_at(h)
        expect = sorted(sorted(idx.index(i) for i in b if i in idx) for b in full.blocks)
        assert sorted(map(list, sub.partition_at(h).blocks)) == [e for e in expect if e]


def test_block_frequencies():
    p = simulate_spatial_kingman(40, GeoTorus(1, 2), 1.0, MigrationKernel.simple(1), seed=8)
    assert block_frequencies_at(p, 40).tolist() == [1 / 40] * 40
    assert block_frequencies_at(p, 1).tolist() == [1.0]
    f = block_frequencies_at(p, 3, rng=4)
    assert f.size == 3 and math.isclose(f.sum(), 1.0)
    assert np.array_equal(f, block_frequencies_at(p, 3, rng=4))
    with pytest.raises(ValueError):
        p.tau(0)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        simulate_spatial_kingman(0, GeoTorus(1, 1), 1.0, MigrationKernel.simple(1))
    with pytest.raises(ValueError):
        simulate_spatial_kingman(3, GeoTorus(1, 1), 1.0, MigrationKernel.simple(2))
    with pytest.raises(ValueError):
        simulate_spatial_kingman(2, GeoTorus(1, 1), 1.0, MigrationKernel.simple(1),
                                 initial_labels=[0, 5])
    with pytest.raises(ValueError):
        from_event_log(FIG4, 4.5)


def test_write_jsonl(tmp_path):
    path = from_event_log(FIG4, 4.0)
    path.write_jsonl(tmp_path / "c.jsonl", seed=11)
    lines = [json.loads(s) for s in (tmp_path / "c.jsonl").read_text().splitlines()]
    assert lines[0]["kind"] == "header" and lines[0]["seed"] == 11 and lines[0]["n"] == 4
    merges = [r for r in lines[1:] if r["kind"] == "merge"]
    assert [r["h"] for r in merges] == [1.0, 2.0, 3.0]
    assert merges[0]["blocks"] == [2, 3]


def test_single_site_paintbox_marginals():
    # for the non-spatial coalescent the k = 3 frequencies are uniform on the simplex
    site = GeoTorus.single_site()
    k0 = MigrationKernel.simple(0)
    rng = np.random.default_rng(21)
    F = np.array([block_frequencies_at(simulate_spatial_kingman(300, site, 1.0, k0, seed=21,
                                                                replicate=r, stop_at=3), 3, rng)
                  for r in range(2000)])
    for j in range(3):
        assert stats.kstest(F[:, j], stats.beta(1, 2).cdf).pvalue > 0.001
