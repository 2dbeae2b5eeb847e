"""Per-cell maps of storm statistics.

Storm counts, sizes and durations are spread over the domain with a
Gaussian kernel on great-circle distance. For every source location the
kernel is renormalized over the in-domain cells, so each storm contributes
exactly one unit of mass to the initiation density.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .gridio import EARTH_RADIUS_KM, GridField, GridGeometry, save_field, unit_vectors

METRIC_IDS = ("seasonal_mean", "intensity", "initiation_density", "mean_size",
              "mean_duration", "ratio", "resize_factor")


@dataclass(frozen=True)
class KernelSpec:
    bandwidth_km: float = 200.0
    shape: str = "gaussian"

    def __post_init__(self):
        if self.shape != "gaussian":
            raise ValueError(f"unsupported kernel shape {self.shape!r}")
        if not self.bandwidth_km > 0:
            raise ValueError("bandwidth must be positive")


@dataclass(frozen=True, eq=False)
class MetricMap:
    geometry: GridGeometry
    values: np.ndarray
    metric: str
    mask: np.ndarray
    metadata: dict = dc_field(default_factory=dict)

    def to_field(self) -> GridField:
        return GridField(self.geometry, np.nan_to_num(self.values, nan=0.0)[None], self.mask)

    def save(self, path) -> None:
        """PGRID with one timestep; cells outside the mask are NaN."""
        save_field(self.to_field(), path)

    def to_csv(self) -> str:
        lat, lon = self.geometry.cell_latlon()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["x", "y", "lat", "lon", "value"])
        ys, xs = np.nonzero(self.mask)
        for y, x in zip(ys, xs):
            v = self.values[y, x]
            writer.writerow([x, y, repr(float(lat[y, x])), repr(float(lon[y, x])),
                             "" if np.isnan(v) else repr(float(v))])
        return buf.getvalue()


def _domain(geometry, mask):
    mask = np.asarray(mask, dtype=bool)
    lat, lon = geometry.cell_latlon()
    return mask, unit_vectors(lat[mask], lon[mask])


def log_kernel(sources, geometry: GridGeometry, mask, kernel: KernelSpec):
    """Log kernel weights, shape (n_sources, n_domain_cells).

    Row ``i`` is ``log k(source_i, s)`` normalized so that ``exp`` of the
    row sums to one over the domain cells.
    """
    mask, cells = _domain(geometry, mask)
    src = unit_vectors(np.asarray(sources)[:, 0], np.asarray(sources)[:, 1])
    chord = np.sqrt(np.clip(2.0 - 2.0 * (src @ cells.T), 0.0, 4.0))
    d = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(chord / 2.0, 1.0))
    logk = -0.5 * (d / kernel.bandwidth_km) ** 2
    peak = logk.max(axis=1, keepdims=True)
    logk -= peak + np.log(np.exp(logk - peak).sum(axis=1, keepdims=True))
    return logk


def kernel_matrix(sources, geometry, mask, kernel):
    return np.exp(log_kernel(sources, geometry, mask, kernel))


def _sources(metrics, attribution):
    """Source points and per-source event weights for the chosen attribution."""
    if attribution == "initiation":
        pts = np.array([m.initiation for m in metrics], dtype=float).reshape(-1, 2)
        return pts, np.arange(len(metrics)), np.ones(len(metrics))
    if attribution == "lifetime":
        pts, owner, w = [], [], []
        for i, m in enumerate(metrics):
            pts.append(m.central_locations)
            owner.extend([i] * m.l_steps)
            w.extend([1.0 / m.l_steps] * m.l_steps)
        return np.concatenate(pts).reshape(-1, 2), np.array(owner), np.array(w)
    raise ValueError(f"unknown attribution {attribution!r}")


def _to_map(geometry, mask, flat, metric, meta):
    out = np.full(geometry.shape, np.nan)
    out[mask] = flat
    return MetricMap(geometry, out, metric, np.asarray(mask, dtype=bool).copy(), meta)


def _chunks(n, threads):
    step = max(1, -(-n // max(1, threads)))
    return [slice(i, min(n, i + step)) for i in range(0, n, step)]


def initiation_density(metrics, geometry: GridGeometry, mask, kernel: KernelSpec = KernelSpec(),
                       attribution: str = "initiation") -> MetricMap:
    """Expected storm count per cell: sum over events of k(c_i, s)."""
    mask = np.asarray(mask, dtype=bool)
    meta = {"bandwidth_km": kernel.bandwidth_km, "kernel": kernel.shape,
            "attribution": attribution, "n_events": len(metrics)}
    if not metrics:
        return _to_map(geometry, mask, np.zeros(mask.sum()), "initiation_density", meta)
    pts, _, w = _sources(metrics, attribution)
    dens = w @ kernel_matrix(pts, geometry, mask, kernel)
    return _to_map(geometry, mask, dens, "initiation_density", meta)


def weighted_metric_map(metrics, metric: str, geometry: GridGeometry, mask,
                        kernel: KernelSpec = KernelSpec(), attribution: str = "initiation",
                        threads: int = 1) -> MetricMap:
    """Kernel-weighted average of a per-event metric at every domain cell.

    ``metric`` is ``size`` (mean km^2 per step of the event) or
    ``duration`` (hours).
    """
    if metric == "size":
        vals = np.array([m.mean_size_km2 for m in metrics])
        name = "mean_size"
    elif metric == "duration":
        vals = np.array([m.duration_hours for m in metrics])
        name = "mean_duration"
    else:
        raise ValueError(f"unknown metric {metric!r}")
    if len(vals) == 0:
        raise ValueError("weighted metric map needs at least one event")
    mask = np.asarray(mask, dtype=bool)
    pts, owner, w = _sources(metrics, attribution)
    logk = log_kernel(pts, geometry, mask, kernel) + np.log(w)[:, None]
    m = vals[owner]

    def part(sl):
        block = logk[:, sl]
        # shift per target cell so the largest weight is 1; avoids 0/0 far away
        wk = np.exp(block - block.max(axis=0, keepdims=True))
        return (wk * m[:, None]).sum(axis=0) / wk.sum(axis=0)

    chunks = _chunks(int(mask.sum()), threads)
    if threads <= 1:
        flat = np.concatenate([part(sl) for sl in chunks])
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            flat = np.concatenate(list(pool.map(part, chunks)))
    # guard against rounding just outside the range of the inputs
    flat = np.clip(flat, vals.min(), vals.max())
    meta = {"bandwidth_km": kernel.bandwidth_km, "kernel": kernel.shape,
            "attribution": attribution, "n_events": len(metrics)}
    return _to_map(geometry, mask, flat, name, meta)


def cellwise_map(field: GridField, stat: str) -> MetricMap:
    """Per-cell statistics that need no storm identification.

    ``seasonal_mean`` sums the series at each cell and reports cm per
    season (the field is taken to cover one season); ``mean_intensity``
    averages the wet steps only and reports mm/hour (NaN for dry cells).
    """
    vals = field.filled()
    mask = field.domain_mask
    if stat == "seasonal_mean":
        out = vals.sum(axis=0) / 10.0
        name = "seasonal_mean"
    elif stat in ("mean_intensity", "intensity"):
        wet = (vals > 0).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = vals.sum(axis=0) / wet / field.geometry.dt_hours
        out[wet == 0] = np.nan
        name = "intensity"
    else:
        raise ValueError(f"unknown cell-wise statistic {stat!r}")
    out = np.where(mask, out, np.nan)
    return MetricMap(field.geometry, out, name, mask.copy(), {})


def ratio_map(a: MetricMap, b: MetricMap) -> MetricMap:
    """Percent change 100 * (b - a) / a per cell; NaN where ``a`` is 0 or NaN."""
    if a.geometry != b.geometry or a.values.shape != b.values.shape:
        raise ValueError("maps are on different grids")
    if a.metric != b.metric:
        raise ValueError(f"cannot compare {a.metric!r} with {b.metric!r}")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = 100.0 * (b.values - a.values) / a.values
    out[~np.isfinite(a.values) | (a.values == 0)] = np.nan
    mask = a.mask & b.mask
    out[~mask] = np.nan
    return MetricMap(a.geometry, out, "ratio", mask,
                     {"of": a.metric, "baseline": a.metadata, "comparison": b.metadata})
