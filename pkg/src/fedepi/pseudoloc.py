"""Plausible decoy-trajectory synthesis.

Pipeline: fit per-user Markov mobility models, average them into an
aggregate model with a distance-decay probability floor, cluster regions
by epidemic similarity of their reported case series, lift the real
trajectory into its cluster sequence, and sample decoy walks constrained
to those clusters under the aggregate transition model. Three simpler
generators (uniform IID, aggregate IID, unconstrained aggregate walk)
serve as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mobility import UNREPORTED
from .seeding import spawn


@dataclass(frozen=True)
class MobilityModel:
    """Per-interval visit distribution and region transition matrix."""

    visit_dist: np.ndarray  # (T, M), rows sum to 1
    transition: np.ndarray  # (M, M), rows sum to 1

    def __post_init__(self):
        if np.any(self.visit_dist < 0) or np.any(self.transition < 0):
            raise ValueError("probabilities must be non-negative")
        if not np.allclose(self.visit_dist.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("visit distribution rows must sum to 1")
        if not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")


def fit_user_model(visits, n_regions):
    """Empirical visit/transition frequencies for one trajectory.

    Unreported intervals get a uniform visit row; transition rows with no
    observed departures fall back to uniform (covers users with fewer
    than two reported visits).
    """
    visits = np.asarray(visits)
    n_t = visits.size
    visit_dist = np.full((n_t, n_regions), 1.0 / n_regions)
    reported = visits != UNREPORTED
    for t in np.flatnonzero(reported):
        visit_dist[t] = 0.0
        visit_dist[t, visits[t]] = 1.0
    counts = np.zeros((n_regions, n_regions))
    both = reported[:-1] & reported[1:]
    np.add.at(counts, (visits[:-1][both], visits[1:][both]), 1.0)
    row_sums = counts.sum(axis=1)
    transition = np.full((n_regions, n_regions), 1.0 / n_regions)
    nz = row_sums > 0
    transition[nz] = counts[nz] / row_sums[nz, None]
    return MobilityModel(visit_dist=visit_dist, transition=transition)


def fit_aggregate_model(pop, epsilon_floor, geometry=None):
    """Mean of the users' local models plus a distance-decay floor.

    The floor term epsilon * max(1, d(r, r'))^-2 keeps every transition
    reachable; rows are renormalized afterwards. With epsilon_floor == 0
    and a single user this returns that user's model.
    """
    if epsilon_floor < 0:
        raise ValueError("epsilon_floor must be non-negative")
    n = pop.n_users
    if n == 0:
        raise ValueError("need at least one trajectory")
    m, n_t = pop.n_regions, pop.n_intervals
    visits = pop.visits
    reported = visits != UNREPORTED

    # mean of per-user visit rows: point mass where reported, uniform where not
    visit_dist = np.zeros((n_t, m))
    for t in range(n_t):
        counts = np.bincount(visits[reported[:, t], t], minlength=m)
        n_missing = n - counts.sum()
        visit_dist[t] = (counts + n_missing / m) / n

    # mean of per-user transition rows without materializing each model:
    # every observed (u, a -> b) pair carries weight 1 / departures(u, a);
    # rows a user never departs from contribute a uniform row.
    both = reported[:, :-1] & reported[:, 1:]
    users, ts = np.nonzero(both)
    a = visits[users, ts]
    b = visits[users, ts + 1]
    ua_key = users * m + a
    departures = np.bincount(ua_key, minlength=n * m)
    pair_w = 1.0 / departures[ua_key]
    transition = np.zeros((m, m))
    np.add.at(transition, (a, b), pair_w)
    users_departing = (departures.reshape(n, m) > 0).sum(axis=0)
    transition += ((n - users_departing) / m)[:, None]
    transition /= n
    if epsilon_floor > 0:
        geom = geometry if geometry is not None else pop.geometry
        if geom is None:
            raise ValueError("epsilon_floor > 0 requires region geometry")
        d = geom.distance_matrix()
        transition = transition + epsilon_floor * np.maximum(1.0, d) ** -2
    transition = transition / transition.sum(axis=1, keepdims=True)
    return MobilityModel(visit_dist=visit_dist, transition=transition)


def epidemic_similarity(cases_a, cases_b, distance, gamma, zero_distance=None):
    """-sum_t |x_t - x'_t| + gamma / d^2, symmetric in its arguments."""
    cases_a = np.asarray(cases_a, dtype=np.float64)
    cases_b = np.asarray(cases_b, dtype=np.float64)
    if cases_a.shape != cases_b.shape:
        raise ValueError("case series must have equal length")
    if distance <= 0:
        if zero_distance is None:
            raise ValueError("distance must be positive (pass zero_distance to substitute)")
        distance = zero_distance
    return float(-np.abs(cases_a - cases_b).sum() + gamma / distance**2)


def similarity_matrix(cases, geometry, gamma):
    """Pairwise epidemic similarity; zero distances use the smallest
    positive grid distance."""
    cases = np.asarray(cases, dtype=np.float64)
    d = geometry.distance_matrix()
    d_floor = geometry.min_positive_distance()
    d = np.where(d > 0, d, d_floor)
    diff = np.abs(cases[:, None, :] - cases[None, :, :]).sum(axis=2)
    return -diff + gamma / d**2


@dataclass(frozen=True)
class EpidemicClustering:
    """Partition of the region set."""

    cluster_of: np.ndarray  # (M,) cluster id per region
    clusters: list  # list of sorted region-id arrays

    @property
    def n_clusters(self):
        return len(self.clusters)


def cluster_regions(similarities, k):
    """Average-linkage agglomeration on a similarity matrix down to k
    clusters; merge ties break toward the lowest cluster ids."""
    sim = np.asarray(similarities, dtype=np.float64)
    m = sim.shape[0]
    if sim.shape != (m, m):
        raise ValueError("similarity matrix must be square")
    if not 1 <= k <= m:
        raise ValueError(f"k must lie in [1, {m}]")
    members = [[r] for r in range(m)]
    sizes = np.ones(m)
    avg = sim.copy().astype(np.float64)
    np.fill_diagonal(avg, -np.inf)
    alive = np.ones(m, dtype=bool)
    for _ in range(m - k):
        masked = np.where(alive[:, None] & alive[None, :], avg, -np.inf)
        i, j = np.unravel_index(np.argmax(masked), masked.shape)
        if i > j:
            i, j = j, i
        # Lance-Williams update for average linkage
        new_row = (sizes[i] * avg[i] + sizes[j] * avg[j]) / (sizes[i] + sizes[j])
        avg[i] = new_row
        avg[:, i] = new_row
        avg[i, i] = -np.inf
        members[i].extend(members[j])
        sizes[i] += sizes[j]
        alive[j] = False
    groups = sorted(
        (sorted(members[i]) for i in np.flatnonzero(alive)), key=lambda g: g[0]
    )
    cluster_of = np.empty(m, dtype=np.int64)
    clusters = []
    for cid, group in enumerate(groups):
        arr = np.asarray(group, dtype=np.int64)
        clusters.append(arr)
        cluster_of[arr] = cid
    return EpidemicClustering(cluster_of=cluster_of, clusters=clusters)


def _walk(real, candidates_of, init_weights, transition, rng):
    """Sample one decoy trace constrained to per-interval candidate sets."""
    out = np.full(real.size, UNREPORTED, dtype=np.int64)
    prev = None
    for t in range(real.size):
        if real[t] == UNREPORTED:
            continue
        cands = candidates_of(t)
        w = init_weights(t, cands) if prev is None else transition[prev, cands]
        total = w.sum()
        if total <= 0.0:
            p = np.full(cands.size, 1.0 / cands.size)
        else:
            p = w / total
        prev = int(cands[np.searchsorted(np.cumsum(p), rng.random() * 1.0, side="right").clip(max=cands.size - 1)])
        out[t] = prev
    return out


def synthesize(real_visits, clustering, aggregate, n_pseudo, seed):
    """Decoy traces constrained to the real trace's epidemic clusters.

    At the first reported interval the decoy location is drawn from the
    cluster of the real location weighted by the aggregate visit
    distribution; afterwards from the cluster of the current real
    location weighted by the aggregate transition row of the previous
    decoy location. Deterministic per (seed, trace index).
    """
    if n_pseudo < 1:
        raise ValueError("n_pseudo must be at least 1")
    real = np.asarray(real_visits)
    children = spawn(seed, n_pseudo)
    out = np.empty((n_pseudo, real.size), dtype=np.int64)

    def candidates_of(t):
        return clustering.clusters[clustering.cluster_of[real[t]]]

    for k in range(n_pseudo):
        rng = np.random.default_rng(children[k])
        out[k] = _walk(
            real,
            candidates_of,
            lambda t, c: aggregate.visit_dist[t, c],
            aggregate.transition,
            rng,
        )
    return out


def baseline_generator(kind, real_visits, aggregate, n_pseudo, seed, n_regions):
    """Baseline decoy generators: uniform_iid, aggregate_iid, aggregate_walk."""
    if n_pseudo < 1:
        raise ValueError("n_pseudo must be at least 1")
    if kind != "uniform_iid" and aggregate is None:
        raise ValueError(f"{kind} generator needs the aggregate mobility model")
    real = np.asarray(real_visits)
    children = spawn(seed, n_pseudo)
    out = np.full((n_pseudo, real.size), UNREPORTED, dtype=np.int64)
    reported = real != UNREPORTED
    all_regions = np.arange(n_regions)
    for k in range(n_pseudo):
        rng = np.random.default_rng(children[k])
        if kind == "uniform_iid":
            out[k, reported] = rng.integers(0, n_regions, size=int(reported.sum()))
        elif kind == "aggregate_iid":
            for t in np.flatnonzero(reported):
                p = aggregate.visit_dist[t]
                out[k, t] = np.searchsorted(np.cumsum(p), rng.random()).clip(
                    max=n_regions - 1
                )
        elif kind == "aggregate_walk":
            out[k] = _walk(
                real,
                lambda t: all_regions,
                lambda t, c: aggregate.visit_dist[t, c],
                aggregate.transition,
                rng,
            )
        else:
            raise ValueError(f"unknown generator kind {kind!r}")
    return out


GENERATOR_KINDS = ("uniform_iid", "aggregate_iid", "aggregate_walk", "epidemic")


def generate_pseudo_traces(pop, kind, n_pseudo, seed, clustering=None, aggregate=None):
    """Decoy traces for every user; (n_pseudo, N, T) aligned to gaps."""
    if n_pseudo == 0:
        return np.empty((0, pop.n_users, pop.n_intervals), dtype=np.int64)
    children = spawn(seed, pop.n_users)
    out = np.empty((n_pseudo, pop.n_users, pop.n_intervals), dtype=np.int64)
    for u in range(pop.n_users):
        if kind == "epidemic":
            if clustering is None or aggregate is None:
                raise ValueError("epidemic generator needs clustering and aggregate model")
            traces = synthesize(pop.visits[u], clustering, aggregate, n_pseudo, children[u])
        else:
            traces = baseline_generator(
                kind, pop.visits[u], aggregate, n_pseudo, children[u], pop.n_regions
            )
        out[:, u, :] = traces
    return out


def export_pseudo_csv(traces, path):
    """Decoy traces as ``user_id,trace_idx,t,region_id`` rows."""
    n_pseudo, n_users, n_t = traces.shape
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,trace_idx,t,region_id\n")
        for u in range(n_users):
            for k in range(n_pseudo):
                for t in range(n_t):
                    r = traces[k, u, t]
                    if r != UNREPORTED:
                        fh.write(f"{u},{k + 1},{t},{r}\n")
