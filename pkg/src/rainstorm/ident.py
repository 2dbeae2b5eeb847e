"""Rainstorm segments at a single timestep.

Contiguous wet regions are grouped into segments with almost-connected
component labeling: two regions belong together when they would touch
after dilating each by a fixed radius, i.e. when the distance between
their closest cells is at most twice that radius. Large and small regions
are treated separately so that a few scattered wet cells between two big
rain areas cannot chain them together.

Distances are between cell centers in km on the flat grid.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .gridio import GridField, GridGeometry

_EPS_KM = 1e-9

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


@dataclass(frozen=True, eq=False)
class Region:
    """One contiguous wet area: ``cells`` is an (n, 2) int array of (x, y)."""

    cells: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.cells)

    @property
    def total(self) -> float:
        return float(self.values.sum())


@dataclass(eq=False)
class Segment:
    """A rainstorm segment: one or more regions at timestep ``t``."""

    regions: list
    t: int
    id: int = 0

    @cached_property
    def cells(self) -> np.ndarray:
        return np.concatenate([r.cells for r in self.regions]).astype(np.int64)

    @cached_property
    def values(self) -> np.ndarray:
        return np.concatenate([r.values for r in self.regions]).astype(np.float64)

    @cached_property
    def keys(self) -> np.ndarray:
        """Sorted int64 cell keys, used for set arithmetic between segments."""
        c = self.cells
        return np.sort((c[:, 1] << 32) | c[:, 0])

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def centroid_xy(self) -> np.ndarray:
        """Precipitation-weighted centroid in fractional grid coordinates."""
        w = self.values
        return (self.cells * w[:, None]).sum(axis=0) / w.sum()

    def centroid_km(self, geometry: GridGeometry) -> np.ndarray:
        return self.centroid_xy() * (geometry.dx_km, geometry.dy_km)


@dataclass(frozen=True)
class IdentParams:
    wet_threshold_mm_per_step: float = 0.1
    connectivity: int = 8
    dilation_radius_km: float = 24.0
    large_region_min_area_km2: float = 1000.0
    large_region_min_cells: int | None = None
    small_attach_max_km: float = 48.0

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.wet_threshold_mm_per_step < 0:
            raise ValueError("wet threshold must be >= 0")
        if self.dilation_radius_km < 0 or self.small_attach_max_km < 0:
            raise ValueError("distances must be >= 0")
        if self.large_region_min_cells is not None and self.large_region_min_cells < 1:
            raise ValueError("large_region_min_cells must be >= 1")

    def min_cells(self, geometry: GridGeometry) -> int:
        if self.large_region_min_cells is not None:
            return self.large_region_min_cells
        return max(1, math.ceil(self.large_region_min_area_km2 / geometry.cell_area_km2
                                - 1e-9))


# ---------------------------------------------------------------- distances

def _km(cells, geometry):
    return np.asarray(cells, dtype=float) * (geometry.dx_km, geometry.dy_km)


def _boundary(cells):
    """Cells with at least one 4-neighbour outside the set.

    The closest pair between two disjoint cell sets always lies on their
    boundaries, so distance queries only need these.
    """
    if len(cells) <= 4:
        return cells
    lo = cells.min(axis=0)
    hi = cells.max(axis=0)
    grid = np.zeros((hi[1] - lo[1] + 1, hi[0] - lo[0] + 1), dtype=bool)
    grid[cells[:, 1] - lo[1], cells[:, 0] - lo[0]] = True
    interior = ndimage.binary_erosion(grid, structure=_STRUCTURES[4], border_value=0)
    keep = ~interior[cells[:, 1] - lo[1], cells[:, 0] - lo[0]]
    return cells[keep]


class _CellSets:
    """Boundary cells (km) of several cell sets with lazily built KD-trees."""

    def __init__(self, cell_sets, geometry):
        self.pts = [_km(_boundary(np.asarray(c)), geometry) for c in cell_sets]
        self.lo = np.array([p.min(axis=0) for p in self.pts]).reshape(-1, 2)
        self.hi = np.array([p.max(axis=0) for p in self.pts]).reshape(-1, 2)
        self._trees = {}

    def tree(self, i):
        if i not in self._trees:
            self._trees[i] = cKDTree(self.pts[i])
        return self._trees[i]

    def box_gap(self, lo, hi):
        """Lower bound on distance from the box [lo, hi] to every set."""
        g = np.maximum(0.0, np.maximum(self.lo - hi, lo - self.hi))
        return np.hypot(g[:, 0], g[:, 1])

    def distance(self, i, pts, upper=np.inf):
        """Minimum distance from set ``i`` to the points ``pts`` (inf beyond ``upper``)."""
        d, _ = self.tree(i).query(pts, k=1, distance_upper_bound=upper)
        return float(np.min(d))


def group_by_gap(cell_sets, gap_km: float, geometry: GridGeometry) -> np.ndarray:
    """Connected components of the graph linking sets closer than ``gap_km``.

    Returns one component label per input set; labels are numbered in order
    of first appearance so the result is deterministic.
    """
    n = len(cell_sets)
    if n == 0:
        return np.zeros(0, dtype=int)
    sets = _CellSets(cell_sets, geometry)
    limit = gap_km + _EPS_KM
    rows, cols = [], []
    for i in range(n - 1):
        near = np.nonzero(sets.box_gap(sets.lo[i], sets.hi[i])[i + 1:] <= limit)[0] + i + 1
        for j in near:
            # query the smaller set against the larger one's tree
            a, b = (i, j) if len(sets.pts[i]) >= len(sets.pts[j]) else (j, i)
            if sets.distance(a, sets.pts[b], upper=limit) <= limit:
                rows.append(i)
                cols.append(j)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    _, first = np.unique(labels, return_index=True)
    remap = np.empty(labels.max() + 1, dtype=int)
    remap[labels[np.sort(first)]] = np.arange(first.size)
    return remap[labels]


def min_distance_km(cells_a, cells_b, geometry: GridGeometry) -> float:
    """Smallest center-to-center distance between two cell sets."""
    a = _km(_boundary(np.asarray(cells_a)), geometry)
    b = _km(_boundary(np.asarray(cells_b)), geometry)
    d, _ = cKDTree(a).query(b, k=1)
    return float(np.min(d))


# ---------------------------------------------------------------- stages

def connected_regions(values, mask, params: IdentParams = IdentParams()) -> list[Region]:
    """Maximal connected sets of cells wetter than the threshold.

    Regions come back in raster order of their first cell; cells inside a
    region are in raster (y, then x) order.
    """
    values = np.asarray(values, dtype=float)
    wet = np.asarray(mask, dtype=bool) & (np.nan_to_num(values) > params.wet_threshold_mm_per_step)
    labels, n = ndimage.label(wet, structure=_STRUCTURES[params.connectivity])
    if n == 0:
        return []
    ys, xs = np.nonzero(labels)
    lab = labels[ys, xs]
    order = np.argsort(lab, kind="stable")
    ys, xs, lab = ys[order], xs[order], lab[order]
    bounds = np.searchsorted(lab, np.arange(1, n + 2))
    regions = []
    for k in range(n):
        sl = slice(bounds[k], bounds[k + 1])
        cells = np.column_stack([xs[sl], ys[sl]]).astype(np.int64)
        regions.append(Region(cells, values[ys[sl], xs[sl]]))
    return regions


def _sort_key(cells):
    i = np.lexsort((cells[:, 0], cells[:, 1]))[0]
    return (int(cells[i, 1]), int(cells[i, 0]))


def _finalize(groups, t):
    segs = [Segment(regions=sorted(g, key=lambda r: _sort_key(r.cells)), t=t) for g in groups]
    segs.sort(key=lambda s: _sort_key(s.cells))
    for i, s in enumerate(segs):
        s.id = i
    return segs


def _cluster(regions, radius_km, geometry):
    labels = group_by_gap([r.cells for r in regions], 2.0 * radius_km, geometry)
    groups = [[] for _ in range(labels.max() + 1 if len(labels) else 0)]
    for r, lab in zip(regions, labels):
        groups[lab].append(r)
    return groups


def almost_connected_label(regions, radius_km: float, geometry: GridGeometry,
                           t: int = 0) -> list[Segment]:
    """Merge regions that would connect after dilating each by ``radius_km``."""
    return _finalize(_cluster(list(regions), radius_km, geometry), t)


def identify_segments(values, mask, geometry: GridGeometry,
                      params: IdentParams = IdentParams(), t: int = 0) -> list[Segment]:
    """Four-stage segmentation of one timestep.

    1. contiguous wet regions;
    2. almost-connected labeling of the large regions only;
    3. each small region joins the nearest stage-2 segment if it lies within
       ``small_attach_max_km`` (ties: larger total precipitation, then the
       earlier segment);
    4. the remaining small regions are clustered among themselves.
    """
    regions = connected_regions(values, mask, params)
    if not regions:
        return []
    min_cells = params.min_cells(geometry)
    large = [r for r in regions if len(r) >= min_cells]
    small = [r for r in regions if len(r) < min_cells]
    groups = _cluster(large, params.dilation_radius_km, geometry)

    leftover = []
    if groups and small:
        seg_cells = [np.concatenate([r.cells for r in g]) for g in groups]
        seg_totals = np.array([sum(r.total for r in g) for g in groups])
        sets = _CellSets(seg_cells, geometry)
        limit = params.small_attach_max_km + _EPS_KM
        attach = []
        for r in small:
            pts = _km(_boundary(r.cells), geometry)
            near = np.nonzero(sets.box_gap(pts.min(axis=0), pts.max(axis=0)) <= limit)[0]
            best = None
            for j in near:
                d = sets.distance(j, pts, upper=limit)
                if d > limit:
                    continue
                key = (d, -seg_totals[j], j)
                if best is None or key[0] < best[0] - _EPS_KM or (
                        abs(key[0] - best[0]) <= _EPS_KM and key[1:] < best[1:]):
                    best = key
            attach.append(None if best is None else best[2])
        for r, j in zip(small, attach):
            if j is None:
                leftover.append(r)
            else:
                groups[j].append(r)
    else:
        leftover = small
    groups += _cluster(leftover, params.dilation_radius_km, geometry)
    return _finalize(groups, t)


def identify_field(field: GridField, params: IdentParams = IdentParams(),
                   threads: int = 1) -> list[list[Segment]]:
    """Segments for every timestep of ``field`` (list indexed by t)."""
    vals = field.filled()

    def one(t):
        return identify_segments(vals[t], field.domain_mask, field.geometry, params, t=t)

    if threads <= 1:
        return [one(t) for t in range(field.nt)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(field.nt)))
