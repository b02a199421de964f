"""Agent-based SEIR contagion over co-location contacts.

Within each time interval, users sharing a region form a well-mixed cell:
a susceptible user turns latent with probability
1 - exp(-beta * dt * I / max(1, N_cell)) where I counts infectious
co-located users. Latent users become infectious (asymptomatic with a
configurable fraction) at rate alpha, infectious users recover at rate
mu. Latent users do not transmit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mobility import UNREPORTED

S, E, I_A, I_S, R = 0, 1, 2, 3, 4
COMPARTMENT_NAMES = ("S", "E", "I_a", "I_s", "R")


@dataclass(frozen=True)
class DiseaseParams:
    """Per-day transmission, latent-exit, and recovery rates."""

    beta: float
    alpha: float
    mu: float
    asymptomatic_fraction: float = 0.3

    def __post_init__(self):
        if self.beta < 0 or self.alpha <= 0 or self.mu <= 0:
            raise ValueError("rates must be positive (beta may be zero)")
        if not 0.0 <= self.asymptomatic_fraction <= 1.0:
            raise ValueError("asymptomatic_fraction must lie in [0, 1]")

    @property
    def r0(self):
        return self.beta / self.mu


PRESETS = {
    "sars-cov-2": DiseaseParams(beta=0.405, alpha=0.2564, mu=0.071),
    "omicron": DiseaseParams(beta=0.766, alpha=0.6579, mu=0.071),
}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown disease preset {name!r}") from None


@dataclass(frozen=True)
class EpidemicLog:
    """Per-user compartment timeline plus per-region daily new cases."""

    compartments: np.ndarray  # (N, T) int8, states S..R
    new_cases: np.ndarray  # (M, days) int64, E->I transitions by region
    final_labels: np.ndarray  # (N,) int8, 1 iff the user ever left S

    @property
    def n_users(self):
        return self.compartments.shape[0]

    def infectious_mask(self):
        return (self.compartments == I_A) | (self.compartments == I_S)

    def daily_curve(self):
        return self.new_cases.sum(axis=0)


def simulate(pop, params, n_seed_infections, seed):
    """Run the SEIR process over a Population's full trajectories."""
    n, t_max = pop.visits.shape
    if n_seed_infections > n:
        raise ValueError("more seed infections than users")
    rng = np.random.default_rng(seed)
    dt_days = pop.interval_hours / 24.0
    intervals_per_day = max(1, int(round(24.0 / pop.interval_hours)))
    n_days = int(np.ceil(t_max / intervals_per_day))

    state = np.full(n, S, dtype=np.int8)
    seeds = rng.choice(n, size=n_seed_infections, replace=False)
    state[seeds] = E

    p_exit_latent = 1.0 - np.exp(-params.alpha * dt_days)
    p_recover = 1.0 - np.exp(-params.mu * dt_days)

    compartments = np.empty((n, t_max), dtype=np.int8)
    new_cases = np.zeros((pop.n_regions, n_days), dtype=np.int64)

    for t in range(t_max):
        regions = pop.visits[:, t]
        present = regions != UNREPORTED
        entry = state.copy()  # all transition draws use the interval-entry state
        infectious = (entry == I_A) | (entry == I_S)
        inf_per_region = np.bincount(
            regions[present & infectious], minlength=pop.n_regions
        )
        all_per_region = np.bincount(regions[present], minlength=pop.n_regions)

        # S -> E driven by co-located infectious density
        sus = present & (entry == S)
        if np.any(sus):
            r_s = regions[sus]
            lam = params.beta * dt_days * inf_per_region[r_s] / np.maximum(1, all_per_region[r_s])
            newly_exposed = rng.random(r_s.size) < 1.0 - np.exp(-lam)
            state[np.flatnonzero(sus)[newly_exposed]] = E

        # E -> I_a | I_s; new case attributed to the current region
        latent = np.flatnonzero(entry == E)
        if latent.size:
            exiting = latent[rng.random(latent.size) < p_exit_latent]
            if exiting.size:
                asym = rng.random(exiting.size) < params.asymptomatic_fraction
                state[exiting] = np.where(asym, I_A, I_S)
                day = t // intervals_per_day
                loc = pop.visits[exiting, t]
                loc = np.where(loc == UNREPORTED, _last_known_region(pop, exiting, t), loc)
                ok = loc != UNREPORTED
                np.add.at(new_cases, (loc[ok], day), 1)

        # I -> R
        inf_idx = np.flatnonzero(infectious)
        if inf_idx.size:
            recovering = inf_idx[rng.random(inf_idx.size) < p_recover]
            state[recovering] = R

        compartments[:, t] = state

    final_labels = (compartments[:, -1] != S).astype(np.int8)
    return EpidemicLog(
        compartments=compartments, new_cases=new_cases, final_labels=final_labels
    )


def _last_known_region(pop, users, t):
    """Most recent reported region at or before t; UNREPORTED if none."""
    out = np.full(users.size, UNREPORTED, dtype=np.int64)
    for i, u in enumerate(users):
        past = pop.visits[u, : t + 1]
        known = np.flatnonzero(past != UNREPORTED)
        if known.size:
            out[i] = past[known[-1]]
    return out


def dct_baseline(pop, log, known_positive_set):
    """Digital contact tracing: flag users sharing a (region, interval)
    cell with any known positive during that positive's infectious
    intervals."""
    known = np.asarray(sorted(known_positive_set), dtype=np.int64)
    if known.size and (known.min() < 0 or known.max() >= pop.n_users):
        raise ValueError("known positives outside the user range")
    flags = np.zeros(pop.n_users, dtype=np.int8)
    if known.size == 0:
        return flags
    infectious = log.infectious_mask()
    for t in range(pop.n_intervals):
        hot = known[infectious[known, t]]
        if hot.size == 0:
            continue
        hot_regions = pop.visits[hot, t]
        hot_regions = np.unique(hot_regions[hot_regions != UNREPORTED])
        if hot_regions.size == 0:
            continue
        here = pop.visits[:, t]
        flags[np.isin(here, hot_regions) & (here != UNREPORTED)] = 1
    return flags


def split_labels(log, train_fraction, seed):
    """Uniformly random labeled train split; remainder is the eval set."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly in (0, 1)")
    n = log.n_users
    n_train = int(train_fraction * n)
    if n_train == 0 or n_train == n:
        raise ValueError("train split would leave an empty set")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    train = np.sort(perm[:n_train])
    evaluation = np.sort(perm[n_train:])
    return train, evaluation


def reported_cases(log, pop, reporting_users):
    """Daily per-region new cases restricted to diagnosed users.

    This is the server-observable case series: only users in the
    reporting set (the labeled train split) contribute their E->I
    transition to the count.
    """
    reporting = np.zeros(log.n_users, dtype=bool)
    reporting[np.asarray(list(reporting_users), dtype=np.int64)] = True
    n_regions, n_days = log.new_cases.shape
    intervals_per_day = max(1, int(round(24.0 / pop.interval_hours)))
    cases = np.zeros((n_regions, n_days), dtype=np.int64)
    comp = log.compartments
    is_inf = (comp == I_A) | (comp == I_S)
    # a user in I at t=0 can only be a seed that exited latency in interval 0
    was_latent = np.concatenate(
        [np.ones((comp.shape[0], 1), dtype=bool), comp[:, :-1] == E], axis=1
    )
    became_infectious = was_latent & is_inf
    users, ts = np.nonzero(became_infectious & reporting[:, None])
    for u, t in zip(users, ts):
        r = pop.visits[u, t]
        if r == UNREPORTED:
            continue
        cases[r, t // intervals_per_day] += 1
    return cases


def export_labels_csv(log, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,label\n")
        for u, y in enumerate(log.final_labels):
            fh.write(f"{u},{int(y)}\n")


def export_cases_csv(new_cases, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("region_id,day,new_cases\n")
        n_regions, n_days = new_cases.shape
        for r in range(n_regions):
            for d in range(n_days):
                if new_cases[r, d]:
                    fh.write(f"{r},{d},{int(new_cases[r, d])}\n")
