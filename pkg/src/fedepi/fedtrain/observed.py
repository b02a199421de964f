"""Server-observed view of the trace data.

The server sees, per user and reported interval, an unordered set of
n_pseudo + 1 candidate locations (the real one hidden among decoys) and
builds its hypergraph, member counts, and flow statistics from that union.
Ground-truth flags (which candidate is real) are kept alongside for test
harnesses and attack evaluation only; no protocol message exposes them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from ..mobility import UNREPORTED


@dataclass
class ObservedView:
    """Deduplicated (user, cell) visit table plus raw candidate lists."""

    n_users: int
    n_regions: int
    n_intervals: int
    n_pseudo: int
    # visit table: one row per distinct (user, region, interval) claim
    visit_user: np.ndarray
    visit_cell: np.ndarray
    visit_region: np.ndarray
    visit_t: np.ndarray
    visit_is_real: np.ndarray  # bool, harness-only ground truth
    # cells (hyperedges of the server's view)
    cell_region: np.ndarray
    cell_t: np.ndarray
    n_obs: np.ndarray  # distinct users claiming each cell
    # aggregation structure
    reported_intervals: np.ndarray  # T_u per user
    weight: np.ndarray  # per visit, 1 / (T_u * M_ut)
    agg_matrix: sparse.csr_matrix  # users x cells, entries = weight
    # shuffled candidate lists for the observation log
    obs_regions: np.ndarray  # (N, T, n_pseudo + 1), UNREPORTED where absent
    obs_real_pos: np.ndarray  # (N, T) index of the real candidate, -1 where absent

    @property
    def n_cells(self):
        return self.cell_region.size

    @property
    def n_visits(self):
        return self.visit_user.size

    def real_visit_mask(self):
        return self.visit_is_real

    def trace_matrix(self):
        """All observed traces stacked as rows: real first, then decoys.

        Shape ((n_pseudo + 1) * N, T); used for server-side flow
        statistics. Row ordering does not identify which block is real to
        the flow consumer, which only counts transitions.
        """
        return self._traces

    def attach_traces(self, traces):
        self._traces = traces


def build_observed_view(real_visits, pseudo_visits, n_regions, seed):
    """Combine real and decoy trajectories into the server's view.

    ``real_visits`` is (N, T) with UNREPORTED gaps; ``pseudo_visits`` is
    (n_pseudo, N, T) aligned to the same gaps. Candidate order is
    shuffled per (user, interval) so position never identifies the real
    location.
    """
    real_visits = np.asarray(real_visits)
    n_users, n_t = real_visits.shape
    pseudo_visits = (
        np.asarray(pseudo_visits)
        if pseudo_visits is not None and len(pseudo_visits)
        else np.empty((0, n_users, n_t), dtype=np.int64)
    )
    n_pseudo = pseudo_visits.shape[0]
    stack = np.concatenate([real_visits[None], pseudo_visits], axis=0)  # (K, N, T)
    k = n_pseudo + 1
    reported = real_visits != UNREPORTED

    rng = np.random.default_rng(seed)
    order = np.argsort(rng.random((n_users, n_t, k)), axis=2)  # random permutations
    cand = np.transpose(stack, (1, 2, 0))  # (N, T, K)
    obs_regions = np.take_along_axis(cand, order, axis=2)
    obs_regions[~reported] = UNREPORTED
    obs_real_pos = np.argmax(order == 0, axis=2).astype(np.int64)
    obs_real_pos[~reported] = -1

    # flatten candidates and deduplicate (user, t, region) claims
    users = np.repeat(np.arange(n_users), n_t * k).reshape(n_users, n_t, k)
    ts = np.tile(np.repeat(np.arange(n_t), k).reshape(n_t, k), (n_users, 1, 1))
    is_real = np.zeros((n_users, n_t, k), dtype=bool)
    np.put_along_axis(is_real, obs_real_pos[:, :, None].clip(min=0), True, axis=2)
    keep = obs_regions != UNREPORTED
    fu, ft, fr, freal = users[keep], ts[keep], obs_regions[keep], is_real[keep]

    key = (fu * n_t + ft) * n_regions + fr
    uniq, inverse = np.unique(key, return_inverse=True)
    visit_is_real = np.bincount(inverse, weights=freal.astype(np.float64)) > 0
    visit_user = (uniq // (n_t * n_regions)).astype(np.int64)
    rem = uniq % (n_t * n_regions)
    visit_t = (rem // n_regions).astype(np.int64)
    visit_region = (rem % n_regions).astype(np.int64)

    cell_key = visit_region * n_t + visit_t
    uniq_cells, visit_cell = np.unique(cell_key, return_inverse=True)
    cell_region = (uniq_cells // n_t).astype(np.int64)
    cell_t = (uniq_cells % n_t).astype(np.int64)
    n_obs = np.bincount(visit_cell, minlength=uniq_cells.size).astype(np.int64)

    reported_intervals = reported.sum(axis=1).astype(np.int64)
    ut_key = visit_user * n_t + visit_t
    m_ut_counts = np.bincount(ut_key, minlength=n_users * n_t)
    m_ut = m_ut_counts[ut_key]
    t_u = reported_intervals[visit_user]
    weight = 1.0 / (t_u * m_ut)

    agg = sparse.csr_matrix(
        (weight, (visit_user, visit_cell)), shape=(n_users, uniq_cells.size)
    )

    view = ObservedView(
        n_users=n_users,
        n_regions=n_regions,
        n_intervals=n_t,
        n_pseudo=n_pseudo,
        visit_user=visit_user,
        visit_cell=visit_cell.astype(np.int64),
        visit_region=visit_region,
        visit_t=visit_t,
        visit_is_real=visit_is_real,
        cell_region=cell_region,
        cell_t=cell_t,
        n_obs=n_obs,
        reported_intervals=reported_intervals,
        weight=weight,
        agg_matrix=agg,
        obs_regions=obs_regions,
        obs_real_pos=obs_real_pos,
    )
    view.attach_traces(stack.reshape(k * n_users, n_t))
    return view
