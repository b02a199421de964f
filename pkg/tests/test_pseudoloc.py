import itertools

import numpy as np
import pytest

from fedepi import mobility, pseudoloc
from fedepi.mobility import UNREPORTED


def test_fit_user_model_alternating_trace():
    visits = np.array([1, 2, 1, 2, 1, 2])
    model = pseudoloc.fit_user_model(visits, 3)
    assert model.visit_dist[0, 1] == 1.0 and model.visit_dist[1, 2] == 1.0
    assert model.transition[1, 2] == 1.0
    assert model.transition[2, 1] == 1.0
    assert np.allclose(model.transition[0], 1.0 / 3.0)  # never departed: uniform


def test_fit_user_model_short_trace_uniform_fallback():
    visits = np.array([2, UNREPORTED, UNREPORTED])
    model = pseudoloc.fit_user_model(visits, 4)
    assert np.allclose(model.transition, 0.25)
    assert model.visit_dist[0, 2] == 1.0
    assert np.allclose(model.visit_dist[1], 0.25)


def test_aggregate_single_user_no_floor_equals_local():
    pop = mobility.generate_population(3, 1, 5, 12)
    local = pseudoloc.fit_user_model(pop.visits[0], 5)
    agg = pseudoloc.fit_aggregate_model(pop, 0.0)
    assert np.allclose(agg.visit_dist, local.visit_dist)
    assert np.allclose(agg.transition, local.transition)


def test_aggregate_floor_uniform_when_no_mass():
    # two regions at distance 1 and zero empirical mass in some rows:
    # each floored row is proportional to [eps, eps] -> uniform
    visits = np.full((1, 4), 0, dtype=np.int64)
    geom = mobility.RegionGeometry(xy=np.array([[0.0, 0.0], [1.0, 0.0]]))
    pop = mobility.Population(visits=visits, n_regions=2, interval_hours=2.0, geometry=geom)
    agg = pseudoloc.fit_aggregate_model(pop, 0.1, geom)
    # row 1 was the uniform fallback + equal floor -> stays uniform
    assert np.allclose(agg.transition[1], 0.5)
    assert np.allclose(agg.transition.sum(axis=1), 1.0)


def test_aggregate_matches_mean_of_user_models():
    pop = mobility.generate_population(9, 6, 5, 16)
    agg = pseudoloc.fit_aggregate_model(pop, 0.0)
    locals_ = [pseudoloc.fit_user_model(pop.visits[u], 5) for u in range(6)]
    mean_visit = np.mean([m.visit_dist for m in locals_], axis=0)
    mean_trans = np.mean([m.transition for m in locals_], axis=0)
    assert np.abs(agg.visit_dist - mean_visit).max() < 1e-12
    assert np.abs(agg.transition - mean_trans).max() < 1e-12


def test_similarity_identical_series():
    assert pseudoloc.epidemic_similarity([1, 2, 3], [1, 2, 3], 1.0, 1.0) == 1.0


def test_similarity_hand_value():
    assert pseudoloc.epidemic_similarity([5, 0], [0, 0], 1.0, 1.0) == -4.0


def test_similarity_symmetric():
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 9, size=6), rng.integers(0, 9, size=6)
    s1 = pseudoloc.epidemic_similarity(a, b, 2.0, 0.7)
    s2 = pseudoloc.epidemic_similarity(b, a, 2.0, 0.7)
    assert s1 == s2


def test_similarity_zero_distance():
    with pytest.raises(ValueError):
        pseudoloc.epidemic_similarity([1], [1], 0.0, 1.0)
    assert pseudoloc.epidemic_similarity([1], [1], 0.0, 1.0, zero_distance=0.5) == 4.0


def test_cluster_trivial_extremes():
    sim = np.zeros((5, 5))
    singletons = pseudoloc.cluster_regions(sim, 5)
    assert singletons.n_clusters == 5
    assert all(c.size == 1 for c in singletons.clusters)
    one = pseudoloc.cluster_regions(sim, 1)
    assert one.n_clusters == 1
    assert one.clusters[0].tolist() == [0, 1, 2, 3, 4]


def test_cluster_k_bounds():
    with pytest.raises(ValueError):
        pseudoloc.cluster_regions(np.zeros((3, 3)), 4)
    with pytest.raises(ValueError):
        pseudoloc.cluster_regions(np.zeros((3, 3)), 0)


def brute_force_best_2partition(sim):
    """Maximize total within-cluster similarity over all 2-partitions."""
    m = sim.shape[0]
    best, best_score = None, -np.inf
    for bits in itertools.product([0, 1], repeat=m - 1):
        assign = np.array((0,) + bits)
        score = 0.0
        for a in range(m):
            for b in range(a + 1, m):
                if assign[a] == assign[b]:
                    score += sim[a, b]
        if 0 < assign.sum() < m and score > best_score:
            best, best_score = assign, score
    return best


def test_cluster_two_blocks_matches_bruteforce():
    rng = np.random.default_rng(4)
    m = 7
    sim = rng.uniform(-1.0, -0.5, size=(m, m))
    sim = (sim + sim.T) / 2
    blocks = [list(range(4)), list(range(4, m))]
    for block in blocks:
        for a in block:
            for b in block:
                if a != b:
                    sim[a, b] = rng.uniform(4.0, 5.0)
    np.fill_diagonal(sim, 0.0)
    clustering = pseudoloc.cluster_regions(sim, 2)
    got = {tuple(c.tolist()) for c in clustering.clusters}
    assert got == {(0, 1, 2, 3), (4, 5, 6)}
    brute = brute_force_best_2partition(sim)
    brute_groups = {
        tuple(np.flatnonzero(brute == v).tolist()) for v in (0, 1)
    }
    assert got == brute_groups


def test_synthesize_singleton_clusters_reproduce_real():
    real = np.array([0, 3, 2, 1])
    clustering = pseudoloc.cluster_regions(np.zeros((4, 4)), 4)
    model = pseudoloc.MobilityModel(
        visit_dist=np.full((4, 4), 0.25), transition=np.full((4, 4), 0.25)
    )
    traces = pseudoloc.synthesize(real, clustering, model, 3, seed=0)
    assert np.array_equal(traces, np.tile(real, (3, 1)))


def test_synthesize_one_cluster_uniform_covers_regions():
    real = np.zeros(400, dtype=np.int64)
    clustering = pseudoloc.cluster_regions(np.ones((5, 5)), 1)
    model = pseudoloc.MobilityModel(
        visit_dist=np.full((400, 5), 0.2), transition=np.full((5, 5), 0.2)
    )
    trace = pseudoloc.synthesize(real, clustering, model, 1, seed=1)[0]
    counts = np.bincount(trace, minlength=5)
    assert counts.min() > 40  # roughly uniform over all 5 regions


def test_synthesize_cluster_membership_invariant():
    pop = mobility.generate_population(11, 20, 7, 30)
    cases = np.random.default_rng(0).integers(0, 5, size=(7, 3))
    sim = pseudoloc.similarity_matrix(cases, pop.geometry, 1.0)
    clustering = pseudoloc.cluster_regions(sim, 3)
    agg = pseudoloc.fit_aggregate_model(pop, 1e-4)
    for u in range(8):
        traces = pseudoloc.synthesize(pop.visits[u], clustering, agg, 2, seed=u)
        for k in range(2):
            for t in range(30):
                assert (
                    clustering.cluster_of[traces[k, t]]
                    == clustering.cluster_of[pop.visits[u, t]]
                )


def test_synthesize_deterministic_and_gap_aligned():
    real = np.array([0, UNREPORTED, 2, 1, UNREPORTED, 3])
    clustering = pseudoloc.cluster_regions(np.zeros((4, 4)), 2)
    model = pseudoloc.MobilityModel(
        visit_dist=np.full((6, 4), 0.25), transition=np.full((4, 4), 0.25)
    )
    a = pseudoloc.synthesize(real, clustering, model, 2, seed=9)
    b = pseudoloc.synthesize(real, clustering, model, 2, seed=9)
    assert np.array_equal(a, b)
    assert np.all((a[:, real == UNREPORTED]) == UNREPORTED)
    assert np.all((a[:, real != UNREPORTED]) != UNREPORTED)


def test_uniform_iid_single_region():
    real = np.zeros(10, dtype=np.int64)
    out = pseudoloc.baseline_generator("uniform_iid", real, None, 2, seed=0, n_regions=1)
    assert np.all(out == 0)


def test_aggregate_iid_marginal_matches():
    rng = np.random.default_rng(3)
    pi = rng.dirichlet(np.ones(4))
    model = pseudoloc.MobilityModel(
        visit_dist=np.tile(pi, (1, 1)), transition=np.full((4, 4), 0.25)
    )
    real = np.zeros(1, dtype=np.int64)
    draws = np.concatenate(
        [
            pseudoloc.baseline_generator("aggregate_iid", real, model, 1, seed=s, n_regions=4)[0]
            for s in range(100_000)
        ]
    )
    empirical = np.bincount(draws, minlength=4) / draws.size
    assert 0.5 * np.abs(empirical - pi).sum() < 0.01  # total variation


def test_aggregate_walk_deterministic_chain():
    transition = np.eye(3)[[1, 2, 0]]  # 0->1->2->0 cycle
    model = pseudoloc.MobilityModel(
        visit_dist=np.array([[1.0, 0.0, 0.0]] * 4), transition=transition
    )
    real = np.zeros(4, dtype=np.int64)
    out = pseudoloc.baseline_generator("aggregate_walk", real, model, 1, seed=5, n_regions=3)
    assert out[0].tolist() == [0, 1, 2, 0]


def test_unknown_generator_kind():
    with pytest.raises(ValueError):
        pseudoloc.baseline_generator("nope", np.zeros(3, dtype=np.int64), None, 1, 0, 2)


def test_pseudo_traces_format_indistinguishable():
    pop = mobility.generate_population(13, 15, 6, 20)
    agg = pseudoloc.fit_aggregate_model(pop, 1e-4)
    clustering = pseudoloc.cluster_regions(np.zeros((6, 6)), 2)
    traces = pseudoloc.generate_pseudo_traces(
        pop, "epidemic", 2, seed=3, clustering=clustering, aggregate=agg
    )
    assert traces.shape == (2, 15, 20)
    assert traces.min() >= 0 and traces.max() < 6


def test_pseudo_csv_export(tmp_path):
    traces = np.array([[[0, UNREPORTED], [1, 1]]], dtype=np.int64)
    pseudoloc.export_pseudo_csv(traces, tmp_path / "pseudo.csv")
    lines = (tmp_path / "pseudo.csv").read_text().strip().splitlines()
    assert lines[0] == "user_id,trace_idx,t,region_id"
    assert lines[1:] == ["0,1,0,0", "1,1,0,1", "1,1,1,1"]
