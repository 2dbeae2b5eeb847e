"""Data-driven future precipitation from observations and a model run pair.

Two steps are applied to the observed field:

A. every storm is resized about its center by a linear factor
   ``sqrt(future mean size / baseline mean size)`` read from kernel-smoothed
   model size maps at the storm's location;
B. every cell's series gets the model's fractional change in wet-step count
   and then has each wet value multiplied by the ratio of future to
   baseline model quantiles at the value's probability level.

The baseline model run goes through step A as well before the quantile
tables are built, so that observations and baseline are treated alike.

:func:`gridcellwise_simulate` is the reference method that skips step A.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .gridio import GridField, GridGeometry
from .ident import IdentParams, Region, Segment, group_by_gap, identify_field
from .metrics import compute_all, spherical_centroid, trim_negligible
from .spatial import KernelSpec, MetricMap, weighted_metric_map
from .tracking import TrackParams, track

logger = logging.getLogger(__name__)

_EIGHT = ndimage.generate_binary_structure(2, 2)
_OFFSETS = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


def _round_half_up(v):
    return int(math.floor(v + 0.5))


# ---------------------------------------------------------------- resizing

@dataclass(frozen=True, eq=False)
class ResizeFactorMap:
    geometry: GridGeometry
    factors: np.ndarray
    mask: np.ndarray

    @classmethod
    def uniform(cls, geometry, r, mask=None):
        mask = np.ones(geometry.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
        return cls(geometry, np.where(mask, float(r), np.nan), mask)

    def factor_at(self, lat, lon) -> float:
        """Factor at the nearest grid cell; 1 where the map is undefined."""
        x, y = self.geometry.nearest_cell(lat, lon)
        r = float(self.factors[y, x])
        return r if np.isfinite(r) and r > 0 else 1.0

    def as_map(self) -> MetricMap:
        return MetricMap(self.geometry, self.factors, "resize_factor", self.mask, {})


def build_resize_map(baseline_metrics, future_metrics, geometry: GridGeometry, mask,
                     kernel: KernelSpec = KernelSpec(), attribution: str = "initiation",
                     threads: int = 1) -> ResizeFactorMap:
    """Linear resize factor per cell, the square root of the size-map ratio."""
    mask = np.asarray(mask, dtype=bool)
    base = weighted_metric_map(baseline_metrics, "size", geometry, mask, kernel, attribution,
                               threads)
    fut = weighted_metric_map(future_metrics, "size", geometry, mask, kernel, attribution,
                              threads)
    with np.errstate(invalid="ignore", divide="ignore"):
        area = fut.values / base.values
    area[~np.isfinite(area) | (base.values <= 0)] = np.nan
    return ResizeFactorMap(geometry, np.sqrt(area), mask)


def _components(cells):
    """Split a cell set into 8-connected regions (cells as (n, 2) x, y)."""
    lo = cells.min(axis=0)
    grid = np.zeros(tuple((cells.max(axis=0) - lo + 1)[::-1]), dtype=bool)
    grid[cells[:, 1] - lo[1], cells[:, 0] - lo[0]] = True
    labels, _ = ndimage.label(grid, structure=_EIGHT)
    return labels[cells[:, 1] - lo[1], cells[:, 0] - lo[0]]


def split_substorms(segment: Segment, geometry: GridGeometry, gap_km: float = 120.0):
    """Break a segment into parts separated by more than ``gap_km`` edge to edge."""
    cells, values = segment.cells, segment.values
    comp = _components(cells)
    ids = np.unique(comp)
    if ids.size == 1:
        return [segment]
    members = [np.nonzero(comp == k)[0] for k in ids]
    group = group_by_gap([cells[m] for m in members], gap_km, geometry)
    if group.max() == 0:
        return [segment]
    out = []
    for g in range(group.max() + 1):
        regions = [Region(cells[m], values[m]) for m, lab in zip(members, group) if lab == g]
        out.append(Segment(regions, t=segment.t, id=len(out)))
    return out


def resize_storm(substorm: Segment, r: float, geometry: GridGeometry | None = None):
    """Scale a storm's footprint about its center by the linear factor ``r``.

    Each target cell takes the value of the storm cell nearest to its
    pre-image under the inverse scaling. The result is then shifted by whole
    cells so its centroid lands as close as possible to the original one.
    Values are never changed, only copied or dropped. Returns ``None`` when
    the storm shrinks to nothing; with ``geometry`` the result is clipped to
    the grid.
    """
    if not r > 0:
        raise ValueError("resize factor must be positive")
    cells, values = substorm.cells, substorm.values
    if r == 1.0:
        return Segment([Region(cells.copy(), values.copy())], t=substorm.t, id=substorm.id)
    center = substorm.centroid_xy()
    lo, hi = cells.min(axis=0), cells.max(axis=0)
    src = np.full(tuple((hi - lo + 1)[::-1]), np.nan)
    src[cells[:, 1] - lo[1], cells[:, 0] - lo[0]] = values

    t_lo = np.floor(center + r * (lo - 0.5 - center)) - 1
    t_hi = np.ceil(center + r * (hi + 0.5 - center)) + 1
    ty, tx = np.mgrid[int(t_lo[1]):int(t_hi[1]) + 1, int(t_lo[0]):int(t_hi[0]) + 1]
    px = np.floor(center[0] + (tx - center[0]) / r + 0.5).astype(np.int64) - lo[0]
    py = np.floor(center[1] + (ty - center[1]) / r + 0.5).astype(np.int64) - lo[1]
    ok = (px >= 0) & (py >= 0) & (px < src.shape[1]) & (py < src.shape[0])
    got = np.full(tx.shape, np.nan)
    got[ok] = src[py[ok], px[ok]]
    keep = np.isfinite(got)
    if not keep.any():
        return None
    new_cells = np.column_stack([tx[keep], ty[keep]]).astype(np.int64)
    new_vals = got[keep]
    new_center = (new_cells * new_vals[:, None]).sum(axis=0) / new_vals.sum()
    new_cells += np.floor(center - new_center + 0.5).astype(np.int64)
    if geometry is not None:
        inside = ((new_cells[:, 0] >= 0) & (new_cells[:, 0] < geometry.nx)
                  & (new_cells[:, 1] >= 0) & (new_cells[:, 1] < geometry.ny))
        if not inside.any():
            return None
        new_cells, new_vals = new_cells[inside], new_vals[inside]
    return Segment([Region(new_cells, new_vals)], t=substorm.t, id=substorm.id)


def resize_field(field: GridField, events, resize_map: ResizeFactorMap, gap_km: float = 120.0,
                 log: list | None = None) -> GridField:
    """Replace every storm in ``field`` by its resized version.

    Storm cells are cleared first; resized storms are then drawn, keeping
    the larger value where two of them overlap. Wet cells that belong to no
    storm (below the identification threshold) are left as they are.
    """
    g = field.geometry
    out = field.filled()
    mask = field.domain_mask
    segments = sorted((s for ev in events for s in ev.segments()), key=lambda s: (s.t, s.id))
    for s in segments:
        out[s.t, s.cells[:, 1], s.cells[:, 0]] = 0.0
    written = np.zeros(g.shape, dtype=np.int64)
    stamp = 0
    current_t = None
    for s in segments:
        if s.t != current_t:
            current_t = s.t
            written[:] = 0
            stamp = 0
        for sub in split_substorms(s, g, gap_km):
            c = sub.centroid_xy()
            lat, lon = spherical_centroid(*g.latlon(sub.cells[:, 0], sub.cells[:, 1]),
                                          sub.values)
            r = resize_map.factor_at(lat, lon)
            new = resize_storm(sub, r, g)
            if new is None:
                if log is not None:
                    log.append({"kind": "storm_removed", "t": int(s.t), "segment": int(s.id),
                                "x": float(c[0]), "y": float(c[1]), "r": r,
                                "n_cells": int(sub.n_cells)})
                continue
            x, y = new.cells[:, 0], new.cells[:, 1]
            inside = mask[y, x]
            x, y, v = x[inside], y[inside], new.values[inside]
            stamp += 1
            clash = (written[y, x] > 0) & (written[y, x] != stamp)
            if clash.any() and log is not None:
                log.append({"kind": "overlap", "t": int(s.t), "segment": int(s.id),
                            "n_cells": int(clash.sum())})
            out[s.t, y, x] = np.maximum(out[s.t, y, x], v)
            written[y, x] = stamp
    return field.with_values(out)


# ---------------------------------------------------------------- quantiles

@dataclass(frozen=True, eq=False)
class QuantileTransfer:
    """Per-cell wet fractions and paired quantile tables of wet values."""

    geometry: GridGeometry
    levels: np.ndarray
    w_b: np.ndarray
    w_f: np.ndarray
    q_b: np.ndarray          # (ny, nx, Q)
    q_f: np.ndarray
    promote_only: np.ndarray
    mask: np.ndarray

    def wet_change(self, x, y) -> float:
        """Multiplicative change in wet-step count at a cell (NaN if undefined)."""
        if self.w_b[y, x] == 0:
            return math.nan
        return float(self.w_f[y, x] / self.w_b[y, x])

    def ratios(self, x, y) -> np.ndarray:
        return self.q_f[y, x] / self.q_b[y, x]

    @classmethod
    def uniform(cls, geometry, ratio, wet_fraction=0.5, n_quantiles=100, mask=None):
        """Transfer with the same wet fraction and a constant quantile ratio everywhere."""
        mask = np.ones(geometry.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
        levels = np.linspace(0.0, 1.0, n_quantiles)
        q_b = np.broadcast_to(1.0 + levels, geometry.shape + (n_quantiles,)).copy()
        w = np.full(geometry.shape, float(wet_fraction))
        return cls(geometry, levels, w, w.copy(), q_b, q_b * ratio,
                   np.zeros(geometry.shape, dtype=bool), mask)


def build_quantile_transfer(baseline: GridField, future: GridField,
                            n_quantiles: int = 100) -> QuantileTransfer:
    """Wet fractions and type-7 quantiles of wet values at ``n_quantiles`` levels.

    Cells that are never wet in the baseline but wet in the future are
    flagged ``promote_only``: they can gain wet steps but have no quantile
    ratio.
    """
    if baseline.geometry != future.geometry:
        raise ValueError("baseline and future must share a grid")
    if n_quantiles < 2:
        raise ValueError("need at least two quantile levels")
    g = baseline.geometry
    mask = baseline.domain_mask & future.domain_mask
    levels = np.linspace(0.0, 1.0, n_quantiles)
    b, f = baseline.filled(), future.filled()
    w_b = np.zeros(g.shape)
    w_f = np.zeros(g.shape)
    q_b = np.full(g.shape + (n_quantiles,), np.nan)
    q_f = np.full(g.shape + (n_quantiles,), np.nan)
    promote = np.zeros(g.shape, dtype=bool)
    for y, x in zip(*np.nonzero(mask)):
        sb, sf = b[:, y, x], f[:, y, x]
        pb, pf = sb[sb > 0], sf[sf > 0]
        w_b[y, x] = pb.size / max(1, sb.size)
        w_f[y, x] = pf.size / max(1, sf.size)
        if pb.size:
            q_b[y, x] = np.quantile(pb, levels)
        if pf.size:
            q_f[y, x] = np.quantile(pf, levels)
        promote[y, x] = pb.size == 0 and pf.size > 0
    return QuantileTransfer(g, levels, w_b, w_f, q_b, q_f, promote, mask)


def _ranked(score, rng):
    """Indices with positive score, best first; ties in random order."""
    idx = np.nonzero(score > 0)[0]
    if idx.size == 0:
        return idx
    tie = rng.permutation(idx.size)
    return idx[np.lexsort((tie, -score[idx]))]


def adjust_series(series, w_b: float, w_f: float, q_b, q_f, levels, spatial_max, spatial_mean,
                  rng=None, promote_only: bool = False, log: list | None = None, where=None):
    """Wet-count change followed by quantile-ratio scaling for one cell.

    Parameters
    ----------
    series : array_like
        Observed depths at the cell (pre-adjustment).
    w_b, w_f : float
        Baseline and future wet fractions of the model cell.
    q_b, q_f : array_like
        Quantile tables of model wet values at ``levels``.
    spatial_max, spatial_mean : array_like
        Per timestep, the largest and the mean positive value among the
        cell's 8 neighbours (0 when none is wet).
    rng : numpy.random.Generator
        Breaks ties when ranking dry steps for promotion.

    Returns
    -------
    numpy.ndarray
        Adjusted series.
    """
    x0 = np.asarray(series, dtype=float)
    x = x0.copy()
    nt = x.size
    wet = x > 0
    n = int(wet.sum())
    if promote_only:
        target = max(n, min(nt, _round_half_up(w_f * nt)))
    elif w_b > 0:
        target = min(nt, max(0, _round_half_up(n * w_f / w_b)))
    else:
        target = n

    if target < n:
        idx = np.nonzero(wet)[0]
        lowest = idx[np.argsort(x[idx], kind="stable")][: n - target]
        x[lowest] = 0.0
    elif target > n:
        rng = np.random.default_rng(0) if rng is None else rng
        need = target - n
        smax = np.asarray(spatial_max, dtype=float)
        cand = _ranked(np.where(wet, 0.0, smax), rng)[:need]
        x[cand] = np.asarray(spatial_mean, dtype=float)[cand]
        need -= cand.size
        if need > 0:
            prev = np.concatenate([[0.0], x0[:-1]])
            nxt = np.concatenate([x0[1:], [0.0]])
            tmax = np.maximum(prev, nxt)
            tcount = (prev > 0).astype(int) + (nxt > 0)
            score = np.where(x > 0, 0.0, tmax)
            cand = _ranked(score, rng)[:need]
            x[cand] = (prev[cand] + nxt[cand]) / tcount[cand]
            need -= cand.size
        if need > 0 and log is not None:
            log.append({"kind": "promotion_short", **(where or {}), "missing": int(need)})

    if promote_only or not w_b > 0 or not w_f > 0:
        return x
    pos = np.nonzero(x > 0)[0]
    if pos.size == 0:
        return x
    vals = x[pos]
    if pos.size == 1:
        p = np.array([0.5])
    else:
        p = (rankdata(vals, method="average") - 1.0) / (pos.size - 1)
    ratio = np.interp(p, levels, np.asarray(q_f, dtype=float) / np.asarray(q_b, dtype=float))
    scaled = vals * ratio
    # keep the rank order of the series: sorted outputs go to sorted inputs
    order = np.argsort(vals, kind="stable")
    x[pos[order]] = np.sort(scaled, kind="stable")
    return x


def _neighbour_stats(vals, mask):
    """Max and mean of positive in-domain 8-neighbour values, per (t, y, x)."""
    nt, ny, nx = vals.shape
    pad = np.zeros((nt, ny + 2, nx + 2))
    pad[:, 1:-1, 1:-1] = np.where(mask, vals, 0.0)
    smax = np.zeros_like(vals)
    ssum = np.zeros_like(vals)
    cnt = np.zeros(vals.shape, dtype=np.int64)
    for dy, dx in _OFFSETS:
        nb = pad[:, 1 + dy:1 + dy + ny, 1 + dx:1 + dx + nx]
        smax = np.maximum(smax, nb)
        ssum += nb
        cnt += nb > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        smean = np.where(cnt > 0, ssum / np.maximum(cnt, 1), 0.0)
    return smax, smean


def apply_quantile_transfer(obs: GridField, transfer: QuantileTransfer, seed: int = 0,
                            threads: int = 1, log: list | None = None) -> GridField:
    """Run :func:`adjust_series` at every in-domain cell of ``obs``.

    Each observation cell uses the transfer of the nearest model cell.
    Neighbour statistics come from the unadjusted field, and each cell has
    its own random stream derived from ``seed``, so the result does not
    depend on ``threads``.
    """
    g = obs.geometry
    vals = obs.filled()
    smax, smean = _neighbour_stats(vals, obs.domain_mask)
    lat, lon = g.cell_latlon()
    mx, my = transfer.geometry.nearest_cell(lat, lon)
    out = vals.copy()
    rows = [y for y in range(g.ny) if obs.domain_mask[y].any()]

    def do_row(y):
        entries = []
        for x in np.nonzero(obs.domain_mask[y])[0]:
            tx, ty = mx[y, x], my[y, x]
            if not transfer.mask[ty, tx]:
                continue
            promote = bool(transfer.promote_only[ty, tx])
            if promote:
                entries.append({"kind": "promote_only", "x": int(x), "y": int(y)})
            rng = np.random.default_rng([seed, int(y), int(x)])
            out[:, y, x] = adjust_series(vals[:, y, x], transfer.w_b[ty, tx],
                                         transfer.w_f[ty, tx], transfer.q_b[ty, tx],
                                         transfer.q_f[ty, tx], transfer.levels,
                                         smax[:, y, x], smean[:, y, x], rng, promote,
                                         entries, {"x": int(x), "y": int(y)})
        return entries

    if threads <= 1:
        logs = [do_row(y) for y in rows]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logs = list(pool.map(do_row, rows))
    if log is not None:
        for entries in logs:
            log.extend(entries)
    return obs.with_values(out)


# ---------------------------------------------------------------- pipelines

@dataclass(frozen=True)
class SimParams:
    ident: IdentParams = dc_field(default_factory=IdentParams)
    track: TrackParams = dc_field(default_factory=TrackParams)
    kernel: KernelSpec = dc_field(default_factory=KernelSpec)
    trim_fraction: float = 0.001
    gap_km: float = 120.0
    n_quantiles: int = 100
    attribution: str = "initiation"
    seed: int = 0


def storm_events(field: GridField, params: SimParams = SimParams(), threads: int = 1):
    segs = identify_field(field, params.ident, threads)
    return track(segs, field.geometry, params.track)


def simulate_future(obs: GridField, baseline: GridField, future: GridField,
                    params: SimParams = SimParams(), threads: int = 1,
                    log: list | None = None) -> GridField:
    """Storm-based simulation: resize observed storms, then transfer quantiles."""
    if baseline.geometry != future.geometry:
        raise ValueError("baseline and future model runs must share a grid")
    g = baseline.geometry
    base_events = storm_events(baseline, params, threads)
    fut_events = storm_events(future, params, threads)
    obs_events = storm_events(obs, params, threads)
    base_m = trim_negligible(compute_all(base_events, g, threads), params.trim_fraction)
    fut_m = trim_negligible(compute_all(fut_events, g, threads), params.trim_fraction)
    mask = baseline.domain_mask & future.domain_mask
    if base_m and fut_m:
        rmap = build_resize_map(base_m, fut_m, g, mask, params.kernel, params.attribution,
                                threads)
    else:
        logger.warning("no storms in one of the model runs; storms are not resized")
        rmap = ResizeFactorMap.uniform(g, 1.0, mask)
    obs_resized = resize_field(obs, obs_events, rmap, params.gap_km, log)
    base_resized = resize_field(baseline, base_events, rmap, params.gap_km, None)
    transfer = build_quantile_transfer(base_resized, future, params.n_quantiles)
    return apply_quantile_transfer(obs_resized, transfer, params.seed, threads, log)


def gridcellwise_simulate(obs: GridField, baseline: GridField, future: GridField,
                          n_quantiles: int = 100, seed: int = 0, threads: int = 1,
                          log: list | None = None) -> GridField:
    """Reference method: per-cell quantile transfer, no spatial information."""
    transfer = build_quantile_transfer(baseline, future, n_quantiles)
    return apply_quantile_transfer(obs, transfer, seed, threads, log)


def write_log(log, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
