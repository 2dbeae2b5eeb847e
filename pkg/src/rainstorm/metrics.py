"""Per-storm metrics and the four-factor decomposition of total precipitation.

For events i with per-step cell counts s(i,t), mean depths a(i,t) (mm/step)
and lengths l(i)::

    intensity = sum(a*s) / sum(s) / dt          mm/hour
    size      = cell_area * sum(s) / sum(l)     km^2
    duration  = dt * sum(l) / N                 hours
    number    = N

whose product is cell_area * sum(a*s), the total amount in mm km^2.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gridio import GridGeometry, unit_vectors, vector_to_latlon

FACTORS = ("intensity_mm_per_hour", "size_km2", "duration_hours", "n_storms", "total_mm_km2")
CSV_COLUMNS = ("factor", "baseline", "comparison", "pct_diff", "pct_per_K", "ci_lo", "ci_hi")


class EmptySummaryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StormMetrics:
    event_id: int
    birth_t: int
    size_cells: np.ndarray          # s(i, t)
    mean_intensity: np.ndarray      # a(i, t), mm/step
    central_locations: np.ndarray   # (l, 2) lat, lon
    cell_area_km2: float
    dt_hours: float

    @property
    def l_steps(self) -> int:
        return len(self.size_cells)

    @property
    def duration_hours(self) -> float:
        return self.l_steps * self.dt_hours

    @property
    def amount_cells(self) -> float:
        """sum_t a(i,t) s(i,t), in mm * cells."""
        return float(np.sum(self.mean_intensity * self.size_cells))

    @property
    def total_amount_mm_km2(self) -> float:
        return self.cell_area_km2 * self.amount_cells

    @property
    def mean_size_km2(self) -> float:
        return self.cell_area_km2 * float(np.sum(self.size_cells)) / self.l_steps

    @property
    def initiation(self) -> np.ndarray:
        return self.central_locations[0]


def spherical_centroid(lat, lon, weights):
    """Weighted center of gravity on the sphere.

    Averages the cells' unit vectors and projects the mean back onto the
    sphere, so the result moves rigidly with any rotation of the inputs.
    """
    v = unit_vectors(lat, lon)
    w = np.asarray(weights, dtype=float)
    mean = (v * w[:, None]).sum(axis=0) / w.sum()
    norm = np.linalg.norm(mean)
    if norm < 1e-9:
        raise ValueError("weighted centroid is undefined (cells cancel on the sphere)")
    return vector_to_latlon(mean / norm)


def compute_metrics(event, geometry: GridGeometry) -> StormMetrics:
    sizes, means, centers = [], [], []
    for k in range(event.length):
        cells, values = event.step_cells(k)
        sizes.append(len(cells))
        means.append(values.sum() / len(cells))
        lat, lon = geometry.latlon(cells[:, 0], cells[:, 1])
        centers.append(spherical_centroid(lat, lon, values))
    return StormMetrics(event_id=event.id, birth_t=event.birth_t,
                        size_cells=np.array(sizes, dtype=np.int64),
                        mean_intensity=np.array(means, dtype=float),
                        central_locations=np.array(centers, dtype=float).reshape(-1, 2),
                        cell_area_km2=geometry.cell_area_km2, dt_hours=geometry.dt_hours)


def compute_all(events, geometry: GridGeometry, threads: int = 1) -> list[StormMetrics]:
    if threads <= 1:
        return [compute_metrics(ev, geometry) for ev in events]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ev: compute_metrics(ev, geometry), events))


def trim_negligible(metrics, fraction: float = 0.001):
    """Drop the weakest events that together hold at most ``fraction`` of the total.

    Events are ranked by total amount (ties by id); the longest prefix whose
    cumulative amount stays within ``fraction`` of the grand total is
    removed. The survivors keep their input order.
    """
    metrics = list(metrics)
    if not metrics or fraction <= 0:
        return metrics
    totals = np.array([m.total_amount_mm_km2 for m in metrics])
    order = sorted(range(len(metrics)), key=lambda i: (totals[i], metrics[i].event_id))
    csum = np.cumsum(totals[order])
    n_drop = int(np.searchsorted(csum, fraction * totals.sum(), side="right"))
    dropped = set(order[:n_drop])
    return [m for i, m in enumerate(metrics) if i not in dropped]


# ---------------------------------------------------------------- factors

@dataclass(frozen=True)
class FactorSummary:
    avg_intensity_mm_per_hour: float
    size_factor_km2: float
    duration_factor_hours: float
    n_storms: float
    total_amount_mm_km2: float
    region: str = "all"
    season: str = "all"

    def values(self) -> dict:
        return dict(zip(FACTORS, (self.avg_intensity_mm_per_hour, self.size_factor_km2,
                                  self.duration_factor_hours, self.n_storms,
                                  self.total_amount_mm_km2)))

    def product(self) -> float:
        return (self.avg_intensity_mm_per_hour * self.size_factor_km2
                * self.duration_factor_hours * self.n_storms)

    def to_csv(self) -> str:
        rows = [(name, value, "", "", "", "", "") for name, value in self.values().items()]
        return _csv(rows)


def _sums(metrics):
    """Per-event arrays sum_t a*s, sum_t s and l."""
    amount = np.array([m.amount_cells for m in metrics], dtype=float)
    cells = np.array([float(np.sum(m.size_cells)) for m in metrics], dtype=float)
    length = np.array([m.l_steps for m in metrics], dtype=float)
    return amount, cells, length


def _factors(amount, cells, length, n, cell_area, dt):
    intensity = amount / cells / dt
    size = cell_area * cells / length
    duration = dt * length / n
    return intensity, size, duration, n, cell_area * amount


def region_weights(events, metrics, geometry: GridGeometry, region_mask,
                   mode: str = "initiation") -> np.ndarray:
    """Per-event membership weights for a region.

    ``initiation`` gives 1 to events whose first central location falls in
    the region and 0 otherwise. ``fractional`` weights each event by the
    share of its precipitation that falls inside the region.
    """
    mask = np.asarray(region_mask, dtype=bool)
    if mode == "initiation":
        lat = np.array([m.initiation[0] for m in metrics])
        lon = np.array([m.initiation[1] for m in metrics])
        x, y = geometry.nearest_cell(lat, lon)
        return mask[y, x].astype(float)
    if mode == "fractional":
        w = []
        for ev in events:
            inside = total = 0.0
            for k in range(ev.length):
                cells, values = ev.step_cells(k)
                inside += float(values[mask[cells[:, 1], cells[:, 0]]].sum())
                total += float(values.sum())
            w.append(inside / total)
        return np.array(w)
    raise ValueError(f"unknown region assignment mode {mode!r}")


def factorize(metrics, weights=None, region: str = "all", season: str = "all") -> FactorSummary:
    """Four-factor decomposition of the events' total precipitation.

    Parameters
    ----------
    metrics : sequence of StormMetrics
        Usually the output of :func:`trim_negligible`.
    weights : array_like, optional
        Per-event weights from :func:`region_weights`; events with zero
        weight are ignored.
    """
    metrics = list(metrics)
    if not metrics:
        raise EmptySummaryError("no storm events to factorize")
    amount, cells, length = _sums(metrics)
    w = np.ones(len(metrics)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (len(metrics),):
        raise ValueError("one weight per event is required")
    if not w.sum() > 0:
        raise EmptySummaryError(f"no storm events in region {region!r}")
    m0 = metrics[0]
    f = _factors(float(w @ amount), float(w @ cells), float(w @ length), float(w.sum()),
                 m0.cell_area_km2, m0.dt_hours)
    return FactorSummary(*map(float, f), region=region, season=season)


# ---------------------------------------------------------------- comparisons

@dataclass(frozen=True)
class FactorRow:
    factor: str
    baseline: float
    comparison: float
    pct_diff: float
    pct_per_K: float = math.nan
    ci_lo: float = math.nan
    ci_hi: float = math.nan

    @property
    def ratio(self) -> float:
        return self.comparison / self.baseline


@dataclass(frozen=True)
class FactorComparison:
    rows: tuple
    delta_T_K: float | None = None

    def __getitem__(self, factor) -> FactorRow:
        for r in self.rows:
            if r.factor == factor:
                return r
        raise KeyError(factor)

    def to_csv(self) -> str:
        return _csv([(r.factor, r.baseline, r.comparison, r.pct_diff, r.pct_per_K,
                      r.ci_lo, r.ci_hi) for r in self.rows])


def _fmt(v):
    if isinstance(v, str):
        return v
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    return buf.getvalue()


def pct_change(baseline: float, comparison: float) -> float:
    if baseline == 0:
        raise ZeroDivisionError("baseline factor is zero; percent change undefined")
    return 100.0 * (comparison - baseline) / baseline


def compare_factors(a: FactorSummary, b: FactorSummary, delta_T_K: float | None = None,
                    ci: dict | None = None) -> FactorComparison:
    """Percent change from ``a`` (baseline) to ``b`` for every factor.

    With ``delta_T_K`` the change is also given per kelvin as a plain ratio
    of percent change to warming. ``ci`` maps factor names to (lo, hi)
    bounds on the percent change, as returned by :func:`bootstrap_ci`; the
    bounds are divided by ``delta_T_K`` too when it is given.
    """
    if delta_T_K is not None and delta_T_K == 0:
        raise ZeroDivisionError("delta_T_K must be nonzero")
    rows = []
    va, vb = a.values(), b.values()
    for name in FACTORS:
        pct = pct_change(va[name], vb[name])
        per_k = pct / delta_T_K if delta_T_K is not None else math.nan
        lo, hi = (ci or {}).get(name, (math.nan, math.nan))
        if delta_T_K is not None:
            lo, hi = sorted((lo / delta_T_K, hi / delta_T_K))
        rows.append(FactorRow(name, va[name], vb[name], pct, per_k, lo, hi))
    return FactorComparison(tuple(rows), delta_T_K)


def bootstrap_ci(metrics_a, metrics_b, n_boot: int = 2000, level: float = 0.95,
                 seed: int = 0, threads: int = 1) -> dict:
    """Percentile bootstrap intervals for the percent change of each factor.

    Whole events are resampled with replacement, independently within each
    set. Replicate ``k`` draws from its own generator derived from ``seed``,
    so results do not depend on ``threads``.

    Returns
    -------
    dict
        factor name -> (lo, hi) percent-change bounds.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be >= 2")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    metrics_a, metrics_b = list(metrics_a), list(metrics_b)
    if not metrics_a or not metrics_b:
        raise EmptySummaryError("bootstrap needs two nonempty event sets")
    sa, sb = _sums(metrics_a), _sums(metrics_b)
    area_a, dt_a = metrics_a[0].cell_area_km2, metrics_a[0].dt_hours
    area_b, dt_b = metrics_b[0].cell_area_km2, metrics_b[0].dt_hours
    na, nb = len(metrics_a), len(metrics_b)
    seeds = np.random.SeedSequence(seed).spawn(n_boot)

    def replicate(k):
        rng = np.random.default_rng(seeds[k])
        ia = rng.integers(0, na, na)
        ib = rng.integers(0, nb, nb)
        fa = _factors(*(s[ia].sum() for s in sa), na, area_a, dt_a)
        fb = _factors(*(s[ib].sum() for s in sb), nb, area_b, dt_b)
        return [100.0 * (y - x) / x for x, y in zip(fa, fb)]

    if threads <= 1:
        reps = [replicate(k) for k in range(n_boot)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reps = list(pool.map(replicate, range(n_boot)))
    reps = np.asarray(reps)
    alpha = (1.0 - level) / 2.0
    lo = np.quantile(reps, alpha, axis=0)
    hi = np.quantile(reps, 1.0 - alpha, axis=0)
    return {name: (float(lo[j]), float(hi[j])) for j, name in enumerate(FACTORS)}


def metrics_csv(metrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["event_id", "birth_t", "l_steps", "duration_hours", "mean_size_km2",
                     "total_amount_mm_km2", "init_lat", "init_lon"])
    for m in metrics:
        writer.writerow([m.event_id, m.birth_t, m.l_steps, repr(m.duration_hours),
                         repr(m.mean_size_km2), repr(m.total_amount_mm_km2),
                         repr(float(m.initiation[0])), repr(float(m.initiation[1]))])
    return buf.getvalue()


def trajectories_csv(metrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["event_id", "t", "lat", "lon", "size_cells", "mean_mm_per_step"])
    for m in metrics:
        for k in range(m.l_steps):
            writer.writerow([m.event_id, m.birth_t + k, repr(float(m.central_locations[k, 0])),
                             repr(float(m.central_locations[k, 1])), int(m.size_cells[k]),
                             repr(float(m.mean_intensity[k]))])
    return buf.getvalue()
