"""Trajectory data model, synthetic mobility generation, and trace CSV IO.

Time is discretized into fixed intervals (default 2 hours). A trajectory
assigns each user exactly one region per interval; an interval may be
marked unreported (UNREPORTED sentinel), in which case the visit simply
does not exist from the server's point of view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError

UNREPORTED = -1


@dataclass(frozen=True)
class RegionGeometry:
    """Planar region coordinates in kilometres."""

    xy: np.ndarray  # (M, 2)

    def distance(self, r, r2):
        return float(np.hypot(*(self.xy[r] - self.xy[r2])))

    def distance_matrix(self):
        diff = self.xy[:, None, :] - self.xy[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])

    def min_positive_distance(self):
        d = self.distance_matrix()
        pos = d[d > 0]
        if pos.size == 0:
            raise ValueError("geometry has no two distinct coordinates")
        return float(pos.min())


def grid_geometry(n_regions, spacing_km=1.0):
    """Regions laid out row-major on a near-square grid."""
    side = int(np.ceil(np.sqrt(n_regions)))
    xy = np.array(
        [(spacing_km * (i % side), spacing_km * (i // side)) for i in range(n_regions)],
        dtype=np.float64,
    )
    return RegionGeometry(xy=xy)


@dataclass(frozen=True, eq=False)
class Population:
    """All user trajectories over a shared horizon.

    visits[u, t] is the region id in [0, M) or UNREPORTED.
    """

    visits: np.ndarray  # (N, T) int64
    n_regions: int
    interval_hours: float = 2.0
    geometry: RegionGeometry | None = None

    def __post_init__(self):
        v = self.visits
        if v.ndim != 2:
            raise ValueError("visits must be (N, T)")
        bad = (v != UNREPORTED) & ((v < 0) | (v >= self.n_regions))
        if np.any(bad):
            raise DataError("region id out of range in trajectories")

    @property
    def n_users(self):
        return self.visits.shape[0]

    @property
    def n_intervals(self):
        return self.visits.shape[1]

    @property
    def n_days(self):
        return self.visits.shape[1] * self.interval_hours / 24.0

    def reported_fraction(self):
        return float(np.mean(self.visits != UNREPORTED))

    def __eq__(self, other):
        if not isinstance(other, Population):
            return NotImplemented
        return (
            self.n_regions == other.n_regions
            and self.interval_hours == other.interval_hours
            and np.array_equal(self.visits, other.visits)
        )


def generate_population(
    seed,
    n_users,
    n_regions,
    n_intervals,
    interval_hours=2.0,
    leisure_prob=0.3,
    kernel_scale_km=2.0,
):
    """Synthetic home/work/leisure routine population.

    Each user gets a home and a work region (work drawn from a
    distance-decaying kernel around home). Within each day, night slots
    are spent at home, daytime slots at work; any daytime/evening slot is
    replaced with probability ``leisure_prob`` by a leisure region drawn
    from the same distance-decaying kernel. Deterministic for a fixed
    seed.
    """
    if n_users <= 0 or n_regions <= 0 or n_intervals <= 0:
        raise ValueError("population dimensions must be positive")
    if n_regions < 2:
        raise ValueError("need at least 2 regions")
    rng = np.random.default_rng(seed)
    geom = grid_geometry(n_regions)
    dist = geom.distance_matrix()
    kernel = 1.0 / (1.0 + dist / kernel_scale_km) ** 2

    slots_per_day = max(1, int(round(24.0 / interval_hours)))
    night = max(1, slots_per_day // 3)  # first third of the day at home
    day_end = slots_per_day - max(1, slots_per_day // 6)

    kernel_cdf = np.cumsum(kernel / kernel.sum(axis=1, keepdims=True), axis=1)
    homes = rng.integers(0, n_regions, size=n_users)
    slots = np.arange(n_intervals) % slots_per_day
    at_home = (slots < night) | (slots >= day_end)
    can_roam = slots >= night  # leisure replaces work/evening slots only
    visits = np.empty((n_users, n_intervals), dtype=np.int64)
    for u in range(n_users):
        home = homes[u]
        cdf = kernel_cdf[home]
        work = int(np.searchsorted(cdf, rng.random()))
        base = np.where(at_home, home, work)
        roam = can_roam & (rng.random(n_intervals) < leisure_prob)
        if np.any(roam):
            base = base.copy()
            base[roam] = np.searchsorted(cdf, rng.random(int(roam.sum())))
        visits[u] = base
    return Population(
        visits=visits,
        n_regions=n_regions,
        interval_hours=interval_hours,
        geometry=geom,
    )


def subsample_reporting(pop, eta, seed):
    """Retain each (user, interval) cell independently with probability eta."""
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must be in (0, 1]")
    if eta == 1.0:
        return pop
    rng = np.random.default_rng(seed)
    keep = rng.random(pop.visits.shape) < eta
    visits = np.where(keep, pop.visits, UNREPORTED)
    return Population(
        visits=visits,
        n_regions=pop.n_regions,
        interval_hours=pop.interval_hours,
        geometry=pop.geometry,
    )


def ingest_csv(path, n_regions=None, n_intervals=None, interval_hours=2.0):
    """Read a trace CSV (header ``user_id,t,region_id``, one reported visit
    per row). Missing (user, t) cells are marked unreported. Horizon and
    region count default to the maxima seen in the file."""
    rows = []
    max_user = max_t = max_r = -1
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "user_id,t,region_id":
            raise ParseError(f"expected header 'user_id,t,region_id', got {header!r}", 1)
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"expected 3 fields, got {len(parts)}", line_no)
            try:
                u, t, r = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", line_no) from None
            if u < 0 or t < 0 or r < 0:
                raise ParseError("negative id", line_no)
            rows.append((u, t, r, line_no))
            max_user, max_t, max_r = max(max_user, u), max(max_t, t), max(max_r, r)
    if not rows:
        raise DataError(f"{path}: empty trace file (no visits, M=T=0)")
    n_t = n_intervals if n_intervals is not None else max_t + 1
    n_r = n_regions if n_regions is not None else max_r + 1
    visits = np.full((max_user + 1, n_t), UNREPORTED, dtype=np.int64)
    for u, t, r, line_no in rows:
        if t >= n_t:
            raise DataError(f"line {line_no}: t={t} beyond horizon {n_t}")
        if r >= n_r:
            raise DataError(f"line {line_no}: region={r} beyond region count {n_r}")
        if visits[u, t] != UNREPORTED:
            raise ParseError(f"duplicate (user={u}, t={t}) visit", line_no)
        visits[u, t] = r
    return Population(visits=visits, n_regions=n_r, interval_hours=interval_hours)


def export_csv(pop, path):
    """Write the reported visits of a Population in trace CSV format."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,t,region_id\n")
        for u in range(pop.n_users):
            for t in range(pop.n_intervals):
                r = pop.visits[u, t]
                if r != UNREPORTED:
                    fh.write(f"{u},{t},{r}\n")


def export_geometry_csv(geom, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("region_id,x_km,y_km\n")
        for r, (x, y) in enumerate(geom.xy):
            fh.write(f"{r},{float(x)!r},{float(y)!r}\n")


def ingest_geometry_csv(path):
    xy = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "region_id,x_km,y_km":
            raise ParseError(f"expected header 'region_id,x_km,y_km', got {header!r}", 1)
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"expected 3 fields, got {len(parts)}", line_no)
            r, x, y = int(parts[0]), float(parts[1]), float(parts[2])
            if r != len(xy):
                raise ParseError(f"region ids must be dense and ordered, got {r}", line_no)
            xy.append((x, y))
    if not xy:
        raise DataError(f"{path}: empty geometry file")
    return RegionGeometry(xy=np.array(xy, dtype=np.float64))
